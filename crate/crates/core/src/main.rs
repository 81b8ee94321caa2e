use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use graffmap::pipeline::{self, PipelineConfig, PipelineError, StageReport};
use graffmap::synth::{self, IntensityField};

#[derive(Parser)]
#[command(name = "graffmap", version, about = "Street-level graffiti quantification pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Pipeline config file.
    #[arg(long, global = true, default_value = "graffmap.toml")]
    config: PathBuf,
    /// Rerun a completed stage even if its inputs changed; clears later stages.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Draw sample locations over the region.
    Sample,
    /// Acquire street-level views for every sample location.
    Fetch,
    /// Ingest and link a detection file.
    Detect {
        /// Detection file; overrides `detections_file` in the config.
        #[arg(long)]
        detections: Option<PathBuf>,
    },
    /// Score each location.
    Score,
    /// Average scores per district and classify.
    Aggregate,
    /// Draw the district choropleth as SVG.
    Render,
    /// Mask average precision of detections against annotations.
    Evaluate {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        /// Also write the report here.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Repeated random-sample estimates over a synthetic field.
    Simulate {
        /// Field definition; the built-in standard field when omitted.
        #[arg(long)]
        field: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 1000)]
        trials: u64,
        #[arg(long, default_value_t = 0)]
        first_seed: u64,
        #[arg(long, default_value_t = 0.0)]
        noise_sd: f64,
        #[arg(long, default_value_t = 10.0)]
        quadrature_m: f64,
        /// Trials CSV (`seed,n,estimate`); stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn report(r: &StageReport) {
    if r.skipped {
        println!("{}: skipped, {}", r.command, r.summary);
    } else {
        println!("{}: {}", r.command, r.summary);
    }
}

fn stage(cli: &Cli) -> Result<(), PipelineError> {
    let cfg = PipelineConfig::load(&cli.config)?;
    let r = match &cli.command {
        Command::Sample => pipeline::cmd_sample(&cfg, cli.force)?,
        Command::Fetch => pipeline::cmd_fetch(&cfg, cli.force)?,
        Command::Detect { detections } => pipeline::cmd_detect(&cfg, detections.as_deref(), cli.force)?,
        Command::Score => pipeline::cmd_score(&cfg, cli.force)?,
        Command::Aggregate => pipeline::cmd_aggregate(&cfg, cli.force)?,
        Command::Render => pipeline::cmd_render(&cfg)?,
        Command::Evaluate { .. } | Command::Simulate { .. } => unreachable!("handled without a config"),
    };
    report(&r);
    Ok(())
}

fn evaluate(detections: &Path, annotations: &Path, iou: f64, output: Option<&Path>) -> Result<(), PipelineError> {
    let r = pipeline::cmd_evaluate(detections, annotations, iou)?;
    let mut text = serde_json::to_string_pretty(&r).expect("report serializes");
    text.push('\n');
    if let Some(path) = output {
        fs::write(path, &text).map_err(|e| PipelineError::Failed {
            command: "evaluate",
            message: format!("{}: {e}", path.display()),
        })?;
    }
    print!("{text}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn simulate(
    field: Option<&Path>,
    n: usize,
    trials: u64,
    first_seed: u64,
    noise_sd: f64,
    quadrature_m: f64,
    output: Option<&Path>,
) -> Result<(), Box<dyn std::error::Error>> {
    let field = match field {
        Some(p) => IntensityField::from_toml(&fs::read_to_string(p)?)?,
        None => IntensityField::standard(),
    };
    let truth = synth::true_region_mean(&field, quadrature_m)?;
    let seeds: Vec<u64> = (first_seed..first_seed + trials).collect();
    let estimates = synth::random_trials(&field, n, &seeds, noise_sd)?;
    let summary = synth::summarize(&estimates);
    match output {
        Some(p) => synth::write_trials_csv(&estimates, fs::File::create(p)?)?,
        None => synth::write_trials_csv(&estimates, std::io::stdout().lock())?,
    }
    eprintln!(
        "true mean {truth:.6}; estimate mean {:.6}, sd {:.6}, standard error {:.6}; bias {:.2} standard errors",
        summary.mean,
        summary.sd,
        summary.std_error,
        (summary.mean - truth) / summary.std_error
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Evaluate {
            detections,
            annotations,
            iou,
            output,
        } => evaluate(detections, annotations, *iou, output.as_deref()),
        Command::Simulate {
            field,
            n,
            trials,
            first_seed,
            noise_sd,
            quadrature_m,
            output,
        } => {
            return match simulate(
                field.as_deref(),
                *n,
                *trials,
                *first_seed,
                *noise_sd,
                *quadrature_m,
                output.as_deref(),
            ) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("simulate: {e}");
                    ExitCode::from(1)
                }
            };
        }
        _ => stage(&cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
