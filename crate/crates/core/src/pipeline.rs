//! Stage-per-command orchestration over one output directory.
//!
//! Each stage records a fingerprint of its inputs and checksums of its
//! outputs in `manifest.json`. A stage runs only when every earlier stage is
//! complete, is skipped when its inputs are unchanged, and refuses to run
//! over changed inputs unless forced. Forcing a stage clears every later one.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::acquisition::{
    self, HttpProviderConfig, Provider, ProviderClient, StubProvider, ViewRecord, ViewStatus, DEFAULT_HEADINGS,
};
use crate::detection::{self, DetectionSet, DEFAULT_CONFIDENCE_THRESHOLD};
use crate::geo::{self, RegionPolygon, SampleSet, SamplingScheme};
use crate::metrics::{self, IndicatorTable, LocationScore, DEFAULT_LOG_EPSILON};
use crate::par;
use crate::render::{self, PALETTE};

pub const CONFIG_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".graffmap.lock";
const MANIFEST_VERSION: u32 = 1;

pub const SAMPLES_CSV: &str = "samples.csv";
pub const SAMPLES_GEOJSON: &str = "samples.geojson";
pub const CACHE_DIR: &str = "cache";
pub const VIEWS_JSON: &str = "views.json";
pub const COVERAGE_JSON: &str = "coverage.json";
pub const YEAR_CENSUS_CSV: &str = "year_census.csv";
pub const DETECTIONS_JSON: &str = "detections.json";
pub const SCORES_CSV: &str = "scores.csv";
pub const REGIONS_CSV: &str = "regions.csv";
pub const REGIONS_GEOJSON: &str = "regions.geojson";
pub const CORRELATION_JSON: &str = "correlation.json";
pub const MAP_SVG: &str = "map.svg";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {field}: {message}")]
    ConfigInvalid { field: String, message: String },
    #[error("{command}: stage `{missing}` is not complete; run `graffmap {}` first", missing.command())]
    StageOrderViolation { command: &'static str, missing: Stage },
    #[error("{command}: inputs changed since the last completed run; rerun with --force")]
    InputsChanged { command: &'static str },
    #[error("{command}: output directory is locked ({} exists)", path.display())]
    Locked { command: &'static str, path: PathBuf },
    #[error("{command}: {message}")]
    Failed { command: &'static str, message: String },
}

impl PipelineError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::ConfigInvalid { .. } => 2,
            PipelineError::StageOrderViolation { .. } => 3,
            _ => 1,
        }
    }
}

fn config_err(field: impl Into<String>, message: impl Into<String>) -> PipelineError {
    PipelineError::ConfigInvalid {
        field: field.into(),
        message: message.into(),
    }
}

fn fail<E: fmt::Display>(command: &'static str) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError::Failed {
        command,
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProviderSettings {
    /// Directory of fixture images plus `manifest.json`.
    Stub {
        dir: PathBuf,
    },
    Http(HttpProviderConfig),
}

/// Pipeline configuration, read from TOML. Relative paths are resolved
/// against the directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub config_version: u32,
    pub region_geojson: PathBuf,
    pub districts_geojson: PathBuf,
    pub sampling: SamplingScheme,
    #[serde(default = "default_headings")]
    pub headings: Vec<f64>,
    pub provider: ProviderSettings,
    #[serde(default = "default_threshold")]
    pub confidence_threshold: f64,
    /// Locations with fewer scored views are left out of regional means.
    #[serde(default = "default_min_views")]
    pub min_views: usize,
    #[serde(default = "default_n_classes")]
    pub n_classes: usize,
    #[serde(default = "default_log_epsilon")]
    pub log_epsilon: f64,
    /// Scale partially covered locations up to their planned view count.
    #[serde(default)]
    pub rescale_partial: bool,
    /// Leave fetched third-party views out of scoring.
    #[serde(default = "default_true")]
    pub exclude_third_party: bool,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    /// Re-request views cached as failed. Takes effect on a forced fetch.
    #[serde(default)]
    pub retry_failed: bool,
    #[serde(default)]
    pub detections_file: Option<PathBuf>,
    /// `region_id,value` CSV correlated against regional levels.
    #[serde(default)]
    pub indicator_csv: Option<PathBuf>,
    pub output_dir: PathBuf,
    #[serde(skip)]
    source_hash: String,
}

fn default_headings() -> Vec<f64> {
    DEFAULT_HEADINGS.to_vec()
}

fn default_threshold() -> f64 {
    DEFAULT_CONFIDENCE_THRESHOLD
}

fn default_min_views() -> usize {
    1
}

fn default_n_classes() -> usize {
    5
}

fn default_log_epsilon() -> f64 {
    DEFAULT_LOG_EPSILON
}

fn default_true() -> bool {
    true
}

fn default_max_in_flight() -> usize {
    4
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| config_err(path.display().to_string(), e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        PipelineConfig::from_toml(&text, base)
    }

    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, PipelineError> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| {
            let field = e.span().map_or("(document)".to_string(), |s| locate_key(text, s.start));
            config_err(field, e.message().to_string())
        })?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        };
        resolve(&mut cfg.region_geojson);
        resolve(&mut cfg.districts_geojson);
        resolve(&mut cfg.output_dir);
        if let ProviderSettings::Stub { dir } = &mut cfg.provider {
            resolve(dir);
        }
        if let Some(p) = &mut cfg.detections_file {
            resolve(p);
        }
        if let Some(p) = &mut cfg.indicator_csv {
            resolve(p);
        }
        cfg.source_hash = sha256_hex(text.as_bytes());
        cfg.validate()?;
        Ok(cfg)
    }

    /// SHA-256 of the config text this was read from.
    pub fn source_hash(&self) -> &str {
        &self.source_hash
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.config_version != CONFIG_VERSION {
            return Err(config_err(
                "config_version",
                format!("unsupported version {}, expected {CONFIG_VERSION}", self.config_version),
            ));
        }
        require_file("region_geojson", &self.region_geojson)?;
        require_file("districts_geojson", &self.districts_geojson)?;
        match self.sampling {
            SamplingScheme::Systematic { spacing_m } if !(spacing_m.is_finite() && spacing_m > 0.0) => {
                return Err(config_err(
                    "sampling.spacing_m",
                    format!("must be positive, got {spacing_m}"),
                ));
            }
            SamplingScheme::Random { n: 0, .. } => return Err(config_err("sampling.n", "must be at least 1")),
            _ => {}
        }
        if self.headings.is_empty() {
            return Err(config_err("headings", "at least one heading is required"));
        }
        for (i, &h) in self.headings.iter().enumerate() {
            if !(h.is_finite() && (0.0..360.0).contains(&h)) {
                return Err(config_err(format!("headings[{i}]"), format!("{h} is outside [0, 360)")));
            }
            if self.headings[..i].contains(&h) {
                return Err(config_err(format!("headings[{i}]"), format!("duplicate heading {h}")));
            }
        }
        match &self.provider {
            ProviderSettings::Stub { dir } => {
                if !dir.is_dir() {
                    return Err(config_err(
                        "provider.dir",
                        format!("{} is not a directory", dir.display()),
                    ));
                }
                require_file("provider.dir", &dir.join("manifest.json"))?;
            }
            ProviderSettings::Http(h) => {
                if !cfg!(feature = "http") {
                    return Err(config_err("provider.kind", "built without HTTP support"));
                }
                if h.url_template.is_empty() {
                    return Err(config_err("provider.url_template", "must not be empty"));
                }
                if !(h.requests_per_second.is_finite() && h.requests_per_second > 0.0) {
                    return Err(config_err("provider.requests_per_second", "must be positive"));
                }
                if h.width == 0 || h.height == 0 {
                    return Err(config_err("provider.width", "image dimensions must be positive"));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(config_err(
                "confidence_threshold",
                format!("{} is outside [0, 1]", self.confidence_threshold),
            ));
        }
        if self.min_views == 0 {
            return Err(config_err("min_views", "must be at least 1"));
        }
        if !(2..=PALETTE.len()).contains(&self.n_classes) {
            return Err(config_err(
                "n_classes",
                format!("must be between 2 and {}", PALETTE.len()),
            ));
        }
        if !(self.log_epsilon.is_finite() && self.log_epsilon > 0.0) {
            return Err(config_err("log_epsilon", "must be positive"));
        }
        if self.max_in_flight == 0 {
            return Err(config_err("max_in_flight", "must be at least 1"));
        }
        if let Some(p) = &self.detections_file {
            require_file("detections_file", p)?;
        }
        if let Some(p) = &self.indicator_csv {
            require_file("indicator_csv", p)?;
        }
        if self.output_dir.exists() && !self.output_dir.is_dir() {
            return Err(config_err("output_dir", "exists and is not a directory"));
        }
        Ok(())
    }
}

fn require_file(field: &str, path: &Path) -> Result<(), PipelineError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(config_err(field, format!("{} does not exist", path.display())))
    }
}

/// Best-effort dotted key path of the TOML entry enclosing byte `offset`.
fn locate_key(text: &str, offset: usize) -> String {
    let mut table = String::new();
    let mut key = String::new();
    let mut pos = 0;
    for line in text.split_inclusive('\n') {
        let t = line.trim();
        if t.starts_with('[') && !t.starts_with("[[") {
            table = t.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            key.clear();
        } else if let Some((k, _)) = t.split_once('=') {
            key = k.trim().to_string();
        }
        pos += line.len();
        if pos > offset {
            break;
        }
    }
    match (table.is_empty(), key.is_empty()) {
        (true, true) => "(document)".into(),
        (true, false) => key,
        (false, true) => table,
        (false, false) => format!("{table}.{key}"),
    }
}

/// Manifest stage flags, in pipeline order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Sampled,
    Fetched,
    Detected,
    Scored,
    Aggregated,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Sampled,
        Stage::Fetched,
        Stage::Detected,
        Stage::Scored,
        Stage::Aggregated,
    ];

    /// The subcommand that completes this stage.
    pub fn command(self) -> &'static str {
        match self {
            Stage::Sampled => "sample",
            Stage::Fetched => "fetch",
            Stage::Detected => "detect",
            Stage::Scored => "score",
            Stage::Aggregated => "aggregate",
        }
    }

    pub fn prerequisites(self) -> &'static [Stage] {
        let i = Stage::ALL.iter().position(|s| *s == self).expect("stage is listed");
        &Stage::ALL[..i]
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Sampled => "sampled",
            Stage::Fetched => "fetched",
            Stage::Detected => "detected",
            Stage::Scored => "scored",
            Stage::Aggregated => "aggregated",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Hash of everything the stage read.
    pub fingerprint: String,
    /// Output path relative to the output directory → SHA-256.
    pub artifacts: BTreeMap<String, String>,
}

/// Completion state of one output directory. A stage is complete exactly
/// when it has a record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub config_hash: String,
    pub stages: BTreeMap<Stage, StageRecord>,
}

impl Default for RunManifest {
    fn default() -> Self {
        RunManifest {
            manifest_version: MANIFEST_VERSION,
            config_hash: String::new(),
            stages: BTreeMap::new(),
        }
    }
}

impl RunManifest {
    pub fn is_complete(&self, stage: Stage) -> bool {
        self.stages.contains_key(&stage)
    }

    /// Marks `stage` complete. Fails with the first incomplete earlier stage.
    pub fn complete(&mut self, stage: Stage, record: StageRecord) -> Result<(), Stage> {
        if let Some(missing) = stage.prerequisites().iter().find(|s| !self.is_complete(**s)) {
            return Err(*missing);
        }
        self.stages.insert(stage, record);
        Ok(())
    }

    /// Clears `stage` and every later stage.
    pub fn clear_from(&mut self, stage: Stage) {
        self.stages.retain(|s, _| *s < stage);
    }

    pub fn load(dir: &Path) -> std::io::Result<Self> {
        match fs::read(dir.join(MANIFEST_FILE)) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(std::io::Error::other),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(RunManifest::default()),
            Err(e) => Err(e),
        }
    }

    pub fn save(&self, dir: &Path) -> std::io::Result<()> {
        write_atomic(&dir.join(MANIFEST_FILE), &pretty_json(self))
    }
}

/// Exclusive hold on an output directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path, command: &'static str) -> Result<RunLock, PipelineError> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{} {}", std::process::id(), command);
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(PipelineError::Locked { command, path }),
            Err(e) => Err(fail(command)(e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// What a command did.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageReport {
    pub command: &'static str,
    pub skipped: bool,
    pub summary: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_sha(path: &Path) -> std::io::Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

fn pretty_json<T: Serialize + ?Sized>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("in-memory values serialize");
    bytes.push(b'\n');
    bytes
}

fn artifacts_intact(dir: &Path, record: &StageRecord) -> bool {
    record
        .artifacts
        .iter()
        .all(|(name, sum)| file_sha(&dir.join(name)).is_ok_and(|s| &s == sum))
}

fn upstream(manifest: &RunManifest, stage: Stage) -> Value {
    json!(manifest.stages.get(&stage).map(|r| &r.artifacts))
}

fn run_stage(
    cfg: &PipelineConfig,
    stage: Stage,
    force: bool,
    fingerprint: impl FnOnce(&RunManifest) -> Result<Value, PipelineError>,
    body: impl FnOnce() -> Result<(Vec<&'static str>, String), PipelineError>,
) -> Result<StageReport, PipelineError> {
    let command = stage.command();
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(fail(command))?;
    let _lock = RunLock::acquire(out, command)?;
    let mut manifest = RunManifest::load(out).map_err(fail(command))?;
    if let Some(&missing) = stage.prerequisites().iter().find(|s| !manifest.is_complete(**s)) {
        return Err(PipelineError::StageOrderViolation { command, missing });
    }
    let fingerprint = sha256_hex(fingerprint(&manifest)?.to_string().as_bytes());
    if let Some(done) = manifest.stages.get(&stage) {
        if !force {
            if done.fingerprint == fingerprint && artifacts_intact(out, done) {
                return Ok(StageReport {
                    command,
                    skipped: true,
                    summary: "up to date".into(),
                });
            }
            return Err(PipelineError::InputsChanged { command });
        }
    }
    manifest.clear_from(stage);
    manifest.config_hash = cfg.source_hash.clone();
    manifest.save(out).map_err(fail(command))?;

    let (names, summary) = body()?;
    let mut artifacts = BTreeMap::new();
    for name in names {
        artifacts.insert(name.to_string(), file_sha(&out.join(name)).map_err(fail(command))?);
    }
    manifest
        .complete(stage, StageRecord { fingerprint, artifacts })
        .map_err(|missing| PipelineError::StageOrderViolation { command, missing })?;
    manifest.save(out).map_err(fail(command))?;
    Ok(StageReport {
        command,
        skipped: false,
        summary,
    })
}

fn read_text(command: &'static str, path: &Path) -> Result<String, PipelineError> {
    fs::read_to_string(path).map_err(|e| PipelineError::Failed {
        command,
        message: format!("{}: {e}", path.display()),
    })
}

fn read_bytes(command: &'static str, path: &Path) -> Result<Vec<u8>, PipelineError> {
    fs::read(path).map_err(|e| PipelineError::Failed {
        command,
        message: format!("{}: {e}", path.display()),
    })
}

fn input_sha(command: &'static str, path: &Path) -> Result<String, PipelineError> {
    Ok(sha256_hex(&read_bytes(command, path)?))
}

fn write_out(command: &'static str, cfg: &PipelineConfig, name: &str, bytes: &[u8]) -> Result<(), PipelineError> {
    write_atomic(&cfg.output_dir.join(name), bytes).map_err(fail(command))
}

/// The single polygon sampled over.
pub fn load_sampling_region(cfg: &PipelineConfig) -> Result<RegionPolygon, PipelineError> {
    let text = read_text("sample", &cfg.region_geojson)?;
    let mut regions = geo::load_regions(&text).map_err(|e| config_err("region_geojson", e.to_string()))?;
    if regions.len() != 1 {
        return Err(config_err(
            "region_geojson",
            format!("expected exactly one polygon, found {}", regions.len()),
        ));
    }
    Ok(regions.remove(0))
}

pub fn load_districts(cfg: &PipelineConfig) -> Result<Vec<RegionPolygon>, PipelineError> {
    let text = read_text("aggregate", &cfg.districts_geojson)?;
    geo::load_regions(&text).map_err(|e| config_err("districts_geojson", e.to_string()))
}

fn load_sample(command: &'static str, cfg: &PipelineConfig) -> Result<SampleSet, PipelineError> {
    let region = load_sampling_region(cfg)?;
    let bytes = read_bytes(command, &cfg.output_dir.join(SAMPLES_CSV))?;
    SampleSet::read_csv(bytes.as_slice(), cfg.sampling, region.id()).map_err(fail(command))
}

fn load_views(command: &'static str, cfg: &PipelineConfig) -> Result<Vec<ViewRecord>, PipelineError> {
    let bytes = read_bytes(command, &cfg.output_dir.join(VIEWS_JSON))?;
    serde_json::from_slice(&bytes).map_err(fail(command))
}

/// Draws the sample: `samples.csv` and `samples.geojson`.
pub fn cmd_sample(cfg: &PipelineConfig, force: bool) -> Result<StageReport, PipelineError> {
    const CMD: &str = "sample";
    run_stage(
        cfg,
        Stage::Sampled,
        force,
        |_| {
            Ok(json!({
                "region": input_sha(CMD, &cfg.region_geojson)?,
                "sampling": cfg.sampling,
            }))
        },
        || {
            let region = load_sampling_region(cfg)?;
            let sample = match cfg.sampling {
                SamplingScheme::Systematic { spacing_m } => geo::systematic_grid(&region, spacing_m),
                SamplingScheme::Random { n, seed } => geo::random_sample(&region, n, seed),
            }
            .map_err(fail(CMD))?;
            let mut csv = Vec::new();
            sample.write_csv(&mut csv).map_err(fail(CMD))?;
            write_out(CMD, cfg, SAMPLES_CSV, &csv)?;
            write_out(CMD, cfg, SAMPLES_GEOJSON, &pretty_json(&sample.to_geojson()))?;
            Ok((
                vec![SAMPLES_CSV, SAMPLES_GEOJSON],
                format!("{} points over region {}", sample.len(), region.id()),
            ))
        },
    )
}

/// Builds the provider client named by the config.
pub fn provider_client(cfg: &PipelineConfig) -> Result<Box<dyn ProviderClient>, PipelineError> {
    match &cfg.provider {
        ProviderSettings::Stub { dir } => Ok(Box::new(
            StubProvider::open(dir).map_err(|e| config_err("provider.dir", e.to_string()))?,
        )),
        #[cfg(feature = "http")]
        ProviderSettings::Http(h) => Ok(Box::new(
            acquisition::HttpProvider::new(h.clone()).map_err(|e| config_err("provider", e.to_string()))?,
        )),
        #[cfg(not(feature = "http"))]
        ProviderSettings::Http(_) => Err(config_err("provider.kind", "built without HTTP support")),
    }
}

/// Acquires every planned view through the configured provider.
pub fn cmd_fetch(cfg: &PipelineConfig, force: bool) -> Result<StageReport, PipelineError> {
    let client = provider_client(cfg)?;
    cmd_fetch_with(cfg, force, client.as_ref())
}

/// [`cmd_fetch`] with an explicit client. Writes `views.json`,
/// `coverage.json`, `year_census.csv` and the image cache.
pub fn cmd_fetch_with(
    cfg: &PipelineConfig,
    force: bool,
    client: &dyn ProviderClient,
) -> Result<StageReport, PipelineError> {
    const CMD: &str = "fetch";
    run_stage(
        cfg,
        Stage::Fetched,
        force,
        |m| {
            let stub_manifest = match &cfg.provider {
                ProviderSettings::Stub { dir } => Some(input_sha(CMD, &dir.join("manifest.json"))?),
                ProviderSettings::Http(_) => None,
            };
            Ok(json!({
                "sample": upstream(m, Stage::Sampled),
                "headings": cfg.headings,
                "provider": cfg.provider,
                "stub_manifest": stub_manifest,
            }))
        },
        || {
            let sample = load_sample(CMD, cfg)?;
            let specs = acquisition::plan_views(&sample, &cfg.headings).map_err(fail(CMD))?;
            let records = acquisition::fetch_views_with(
                &specs,
                client,
                &cfg.output_dir.join(CACHE_DIR),
                cfg.max_in_flight,
                cfg.retry_failed,
            )
            .map_err(fail(CMD))?;
            let coverage = acquisition::coverage_report(&records, &sample).map_err(fail(CMD))?;
            let mut census = Vec::new();
            coverage.write_year_csv(&mut census).map_err(fail(CMD))?;
            write_out(CMD, cfg, VIEWS_JSON, &pretty_json(&records))?;
            write_out(CMD, cfg, COVERAGE_JSON, &pretty_json(&coverage))?;
            write_out(CMD, cfg, YEAR_CENSUS_CSV, &census)?;
            let count = |s: ViewStatus| records.iter().filter(|r| r.status == s).count();
            Ok((
                vec![VIEWS_JSON, COVERAGE_JSON, YEAR_CENSUS_CSV],
                format!(
                    "{} views: {} fetched, {} without imagery, {} failed; {} of {} points mapped",
                    records.len(),
                    count(ViewStatus::Fetched),
                    count(ViewStatus::NoImagery),
                    count(ViewStatus::Failed),
                    coverage.mapped_points,
                    coverage.total_points
                ),
            ))
        },
    )
}

/// Ingests a detection file, checks every image against the fetched views
/// and writes the linked sets to `detections.json` in view order. The file
/// given here takes precedence over `detections_file` in the config.
pub fn cmd_detect(cfg: &PipelineConfig, detections: Option<&Path>, force: bool) -> Result<StageReport, PipelineError> {
    const CMD: &str = "detect";
    let path = match (detections, &cfg.detections_file) {
        (Some(p), _) => {
            require_file("--detections", p)?;
            p.to_path_buf()
        }
        (None, Some(p)) => p.clone(),
        (None, None) => {
            return Err(config_err(
                "detections_file",
                "no detection file given in the config or with --detections",
            ))
        }
    };
    run_stage(
        cfg,
        Stage::Detected,
        force,
        |m| {
            Ok(json!({
                "views": upstream(m, Stage::Fetched),
                "detections": input_sha(CMD, &path)?,
            }))
        },
        || {
            let sets = detection::parse_detection_file(&read_bytes(CMD, &path)?).map_err(fail(CMD))?;
            let views = load_views(CMD, cfg)?;
            let fetched: HashMap<&str, &ViewRecord> = views
                .iter()
                .filter(|v| v.status == ViewStatus::Fetched)
                .map(|v| (v.image_id.as_str(), v))
                .collect();
            let mut by_id: HashMap<&str, &DetectionSet> = HashMap::new();
            for d in &sets {
                let Some(v) = fetched.get(d.image_id()) else {
                    return Err(PipelineError::Failed {
                        command: CMD,
                        message: format!("detections for image {} match no fetched view", d.image_id()),
                    });
                };
                if (v.width, v.height) != (d.width(), d.height()) {
                    return Err(PipelineError::Failed {
                        command: CMD,
                        message: format!(
                            "image {} is {}x{} but its detections are {}x{}",
                            d.image_id(),
                            v.width,
                            v.height,
                            d.width(),
                            d.height()
                        ),
                    });
                }
                by_id.insert(d.image_id(), d);
            }
            let mut emitted = HashSet::new();
            let mut linked = Vec::new();
            let mut covered_views = 0;
            for v in views.iter().filter(|v| v.status == ViewStatus::Fetched) {
                if let Some(d) = by_id.get(v.image_id.as_str()) {
                    covered_views += 1;
                    if emitted.insert(d.image_id()) {
                        linked.push((*d).clone());
                    }
                }
            }
            write_out(CMD, cfg, DETECTIONS_JSON, &detection::emit_detection_file(&linked))?;
            Ok((
                vec![DETECTIONS_JSON],
                format!(
                    "{} detection sets linked to {} of {} fetched views",
                    linked.len(),
                    covered_views,
                    fetched.len()
                ),
            ))
        },
    )
}

/// Scores every sample point into `scores.csv`.
pub fn cmd_score(cfg: &PipelineConfig, force: bool) -> Result<StageReport, PipelineError> {
    const CMD: &str = "score";
    run_stage(
        cfg,
        Stage::Scored,
        force,
        |m| {
            Ok(json!({
                "views": upstream(m, Stage::Fetched),
                "detections": upstream(m, Stage::Detected),
                "confidence_threshold": cfg.confidence_threshold,
                "rescale_partial": cfg.rescale_partial,
                "exclude_third_party": cfg.exclude_third_party,
            }))
        },
        || {
            let views = load_views(CMD, cfg)?;
            let sets = detection::parse_detection_file(&read_bytes(CMD, &cfg.output_dir.join(DETECTIONS_JSON))?)
                .map_err(fail(CMD))?;
            let by_id: HashMap<&str, &DetectionSet> = sets.iter().map(|d| (d.image_id(), d)).collect();
            let mut groups: Vec<(usize, usize)> = Vec::new();
            for (i, v) in views.iter().enumerate() {
                match groups.last_mut() {
                    Some((start, end)) if views[*start].spec.point_id == v.spec.point_id => *end = i + 1,
                    _ => groups.push((i, i + 1)),
                }
            }
            let scored = par::map(&groups, |&(start, end)| {
                let pairs: Vec<(ViewRecord, Option<DetectionSet>)> = views[start..end]
                    .iter()
                    .map(|v| {
                        let usable = v.status == ViewStatus::Fetched
                            && !(cfg.exclude_third_party && v.provider == Provider::ThirdParty);
                        let det = usable
                            .then(|| by_id.get(v.image_id.as_str()).map(|d| (*d).clone()))
                            .flatten();
                        (v.clone(), det)
                    })
                    .collect();
                metrics::location_score(&pairs, cfg.confidence_threshold).map(|s| {
                    if cfg.rescale_partial {
                        s.rescaled_to_planned()
                    } else {
                        s
                    }
                })
            });
            let scores: Vec<LocationScore> = scored.into_iter().collect::<Result<_, _>>().map_err(fail(CMD))?;
            let mut csv = Vec::new();
            metrics::write_scores_csv(&scores, &mut csv).map_err(fail(CMD))?;
            write_out(CMD, cfg, SCORES_CSV, &csv)?;
            let partial = scores.iter().filter(|s| s.k_actual < s.k_planned).count();
            let empty = scores.iter().filter(|s| s.k_actual == 0).count();
            Ok((
                vec![SCORES_CSV],
                format!(
                    "{} locations scored ({} partial, {} without scored views)",
                    scores.len(),
                    partial,
                    empty
                ),
            ))
        },
    )
}

/// Rank-correlation summary written next to the regional table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub method: String,
    pub spearman: Option<f64>,
    /// Regions present in both the aggregates and the indicator.
    pub shared_regions: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Averages scores per district into `regions.csv` and `regions.geojson`,
/// plus `correlation.json` when an indicator is configured. Points outside
/// every district are ignored.
pub fn cmd_aggregate(cfg: &PipelineConfig, force: bool) -> Result<StageReport, PipelineError> {
    const CMD: &str = "aggregate";
    run_stage(
        cfg,
        Stage::Aggregated,
        force,
        |m| {
            let indicator = match &cfg.indicator_csv {
                Some(p) => Some(input_sha(CMD, p)?),
                None => None,
            };
            Ok(json!({
                "sample": upstream(m, Stage::Sampled),
                "scores": upstream(m, Stage::Scored),
                "districts": input_sha(CMD, &cfg.districts_geojson)?,
                "min_views": cfg.min_views,
                "n_classes": cfg.n_classes,
                "log_epsilon": cfg.log_epsilon,
                "indicator": indicator,
            }))
        },
        || {
            let districts = load_districts(cfg)?;
            let sample = load_sample(CMD, cfg)?;
            let assignment = metrics::assign_districts(&sample, &districts);
            let scores = metrics::read_scores_csv(read_bytes(CMD, &cfg.output_dir.join(SCORES_CSV))?.as_slice())
                .map_err(fail(CMD))?;
            let assigned: Vec<LocationScore> = scores
                .into_iter()
                .filter(|s| assignment.contains_key(&s.point_id))
                .collect();
            let aggregates = metrics::region_aggregate(&assigned, &assignment, cfg.min_views).map_err(fail(CMD))?;
            let aggregates =
                metrics::log_class_breaks(&aggregates, cfg.n_classes, cfg.log_epsilon).map_err(fail(CMD))?;
            let mut csv = Vec::new();
            metrics::write_regions_csv(&aggregates, &mut csv).map_err(fail(CMD))?;
            write_out(CMD, cfg, REGIONS_CSV, &csv)?;
            write_out(
                CMD,
                cfg,
                REGIONS_GEOJSON,
                &pretty_json(&metrics::regions_geojson(&aggregates, &districts)),
            )?;
            let mut names = vec![REGIONS_CSV, REGIONS_GEOJSON];
            let mut summary = format!(
                "{} of {} districts aggregated from {} located points",
                aggregates.len(),
                districts.iter().map(|d| d.id()).collect::<HashSet<_>>().len(),
                assigned.len()
            );
            if let Some(p) = &cfg.indicator_csv {
                let table = IndicatorTable::read_csv(read_bytes(CMD, p)?.as_slice()).map_err(fail(CMD))?;
                let shared_regions = aggregates.iter().filter(|a| table.get(&a.region_id).is_some()).count();
                let report = match metrics::rank_correlation(&aggregates, &table) {
                    Ok(rho) => {
                        summary.push_str(&format!("; Spearman {rho:.4} over {shared_regions} regions"));
                        CorrelationReport {
                            method: "spearman".into(),
                            spearman: Some(rho),
                            shared_regions,
                            error: None,
                        }
                    }
                    Err(e) => {
                        summary.push_str(&format!("; no correlation: {e}"));
                        CorrelationReport {
                            method: "spearman".into(),
                            spearman: None,
                            shared_regions,
                            error: Some(e.to_string()),
                        }
                    }
                };
                write_out(CMD, cfg, CORRELATION_JSON, &pretty_json(&report))?;
                names.push(CORRELATION_JSON);
            }
            Ok((names, summary))
        },
    )
}

/// Draws `map.svg` from the aggregated regions. Always redrawn.
pub fn cmd_render(cfg: &PipelineConfig) -> Result<StageReport, PipelineError> {
    const CMD: &str = "render";
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(fail(CMD))?;
    let _lock = RunLock::acquire(out, CMD)?;
    let manifest = RunManifest::load(out).map_err(fail(CMD))?;
    if let Some(&missing) = Stage::ALL.iter().find(|s| !manifest.is_complete(**s)) {
        return Err(PipelineError::StageOrderViolation { command: CMD, missing });
    }
    let districts = load_districts(cfg)?;
    let aggregates =
        metrics::read_regions_csv(read_bytes(CMD, &out.join(REGIONS_CSV))?.as_slice()).map_err(fail(CMD))?;
    let svg = render::render_svg(&aggregates, &districts, cfg.n_classes);
    write_out(CMD, cfg, MAP_SVG, svg.as_bytes())?;
    Ok(StageReport {
        command: CMD,
        skipped: false,
        summary: format!("{} districts drawn", svg.matches("<path ").count()),
    })
}

/// Detector quality against annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub average_precision: f64,
    pub iou_threshold: f64,
    pub iou_type: String,
    pub interpolation: String,
    pub images: usize,
    pub annotations: usize,
    pub detections: usize,
}

/// Mask average precision of a detection file against an annotation file.
pub fn cmd_evaluate(
    detections: &Path,
    annotations: &Path,
    iou_threshold: f64,
) -> Result<EvaluationReport, PipelineError> {
    const CMD: &str = "evaluate";
    let dets = detection::parse_detection_file(&read_bytes(CMD, detections)?).map_err(|e| PipelineError::Failed {
        command: CMD,
        message: format!("{}: {e}", detections.display()),
    })?;
    let anns = detection::parse_annotation_file(&read_bytes(CMD, annotations)?).map_err(|e| PipelineError::Failed {
        command: CMD,
        message: format!("{}: {e}", annotations.display()),
    })?;
    let ap = detection::average_precision(&dets, &anns, iou_threshold).map_err(fail(CMD))?;
    Ok(EvaluationReport {
        average_precision: ap,
        iou_threshold,
        iou_type: "segm".into(),
        interpolation: "all_points".into(),
        images: anns.len(),
        annotations: anns.iter().map(|a| a.masks().len()).sum(),
        detections: dets.iter().map(|d| d.instances().len()).sum(),
    })
}

/// Runs sample through render in order.
pub fn run_all(cfg: &PipelineConfig, detections: Option<&Path>) -> Result<Vec<StageReport>, PipelineError> {
    Ok(vec![
        cmd_sample(cfg, false)?,
        cmd_fetch(cfg, false)?,
        cmd_detect(cfg, detections, false)?,
        cmd_score(cfg, false)?,
        cmd_aggregate(cfg, false)?,
        cmd_render(cfg)?,
    ])
}
