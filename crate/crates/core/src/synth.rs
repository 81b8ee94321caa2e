//! Synthetic city: a ground-truth graffiti intensity field with a known
//! regional mean, and a simulated detector that turns it into noisy
//! location scores. Used to check the regional estimator without real data.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::DEFAULT_CONFIDENCE_THRESHOLD;
use crate::geo::{self, GeoError, GeoPoint, RegionPolygon, SampleSet, Xy};
use crate::metrics::{self, LocationScore, MetricsError};
use crate::par;

/// Views per simulated location.
pub const SIMULATED_VIEWS: usize = 4;

/// Minimum number of quadrature nodes for a trustworthy region mean.
pub const MIN_QUADRATURE_NODES: usize = 1000;

/// Upper bound of the spurious area added by a simulated false positive.
const FALSE_POSITIVE_MAX_AREA: f64 = 0.1;

/// The checked-in standard test field.
pub const STANDARD_FIELD_TOML: &str = include_str!("../fixtures/standard_field.toml");

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("quadrature spacing too coarse: {nodes} nodes inside the region, need {MIN_QUADRATURE_NODES}")]
    QuadratureTooCoarse { nodes: usize },
    #[error("invalid field: {0}")]
    InvalidField(String),
    #[error("invalid detector: {0}")]
    InvalidDetector(String),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("field config: {0}")]
    Config(#[from] toml::de::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("CSV: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianBump {
    pub center: GeoPoint,
    pub sigma_m: f64,
    pub amplitude: f64,
}

/// `intensity(p) = baseline + sum(amplitude * exp(-d^2 / (2 sigma^2)))`
/// with `d` measured in the region's local projection.
#[derive(Debug, Clone)]
pub struct IntensityField {
    region: RegionPolygon,
    components: Vec<GaussianBump>,
    baseline: f64,
    centers_xy: Vec<Xy>,
}

impl IntensityField {
    pub fn new(region: RegionPolygon, components: Vec<GaussianBump>, baseline: f64) -> Result<Self, SynthError> {
        if !(baseline.is_finite() && baseline >= 0.0) {
            return Err(SynthError::InvalidField(format!("baseline {baseline}")));
        }
        for c in &components {
            if !(c.sigma_m.is_finite() && c.sigma_m > 0.0) {
                return Err(SynthError::InvalidField(format!("sigma_m {}", c.sigma_m)));
            }
            if !(c.amplitude.is_finite() && c.amplitude >= 0.0) {
                return Err(SynthError::InvalidField(format!("amplitude {}", c.amplitude)));
            }
        }
        let proj = *region.projection();
        let centers_xy = components.iter().map(|c| proj.to_xy(c.center)).collect();
        Ok(IntensityField {
            region,
            components,
            baseline,
            centers_xy,
        })
    }

    pub fn from_config(cfg: &FieldConfig) -> Result<Self, SynthError> {
        let center = GeoPoint::new(cfg.center_lat, cfg.center_lon)?;
        let region = RegionPolygon::rectangle("synthetic", center, cfg.width_m, cfg.height_m)?;
        let local = geo::make_projection(center)?;
        let components = cfg
            .components
            .iter()
            .map(|c| {
                Ok(GaussianBump {
                    center: local.from_xy(Xy::new(c.dx_m, c.dy_m))?,
                    sigma_m: c.sigma_m,
                    amplitude: c.amplitude,
                })
            })
            .collect::<Result<Vec<_>, GeoError>>()?;
        IntensityField::new(region, components, cfg.baseline)
    }

    pub fn from_toml(text: &str) -> Result<Self, SynthError> {
        IntensityField::from_config(&toml::from_str(text)?)
    }

    /// The field described by [`STANDARD_FIELD_TOML`].
    pub fn standard() -> Self {
        IntensityField::from_toml(STANDARD_FIELD_TOML).expect("standard field config is valid")
    }

    pub fn region(&self) -> &RegionPolygon {
        &self.region
    }

    pub fn components(&self) -> &[GaussianBump] {
        &self.components
    }

    pub fn baseline(&self) -> f64 {
        self.baseline
    }

    pub fn intensity(&self, p: GeoPoint) -> f64 {
        self.intensity_xy(self.region.projection().to_xy(p))
    }

    fn intensity_xy(&self, q: Xy) -> f64 {
        self.baseline
            + self
                .components
                .iter()
                .zip(&self.centers_xy)
                .map(|(c, xy)| {
                    let d2 = (q.x - xy.x).powi(2) + (q.y - xy.y).powi(2);
                    c.amplitude * (-d2 / (2.0 * c.sigma_m * c.sigma_m)).exp()
                })
                .sum::<f64>()
    }
}

/// Serialized form of a rectangular field; offsets in meters from the
/// rectangle centre.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldConfig {
    pub center_lat: f64,
    pub center_lon: f64,
    pub width_m: f64,
    pub height_m: f64,
    pub baseline: f64,
    #[serde(default)]
    pub components: Vec<ComponentConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentConfig {
    pub dx_m: f64,
    pub dy_m: f64,
    pub sigma_m: f64,
    pub amplitude: f64,
}

/// Mean intensity over the region by the midpoint rule: nodes at the centres
/// of a `quadrature_spacing_m` lattice over the bounding box, keeping those
/// inside the region.
pub fn true_region_mean(field: &IntensityField, quadrature_spacing_m: f64) -> Result<f64, SynthError> {
    if !(quadrature_spacing_m.is_finite() && quadrature_spacing_m > 0.0) {
        return Err(GeoError::InvalidSpacing(quadrature_spacing_m).into());
    }
    let s = quadrature_spacing_m;
    let (lo, hi) = field.region.bbox_xy();
    let nx = ((hi.x - lo.x) / s).ceil().max(1.0) as usize;
    let ny = ((hi.y - lo.y) / s).ceil().max(1.0) as usize;
    let rows = par::map_range(ny, |j| {
        let y = lo.y + (j as f64 + 0.5) * s;
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in 0..nx {
            let q = Xy::new(lo.x + (i as f64 + 0.5) * s, y);
            if field.region.contains_xy(q) {
                sum += field.intensity_xy(q);
                count += 1;
            }
        }
        (sum, count)
    });
    let (sum, nodes) = rows.into_iter().fold((0.0, 0), |(s, n), (rs, rn)| (s + rs, n + rn));
    if nodes < MIN_QUADRATURE_NODES {
        return Err(SynthError::QuadratureTooCoarse { nodes });
    }
    Ok(sum / nodes as f64)
}

/// Score perturbation applied to the true intensity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulatedDetector {
    pub noise_sd: f64,
    /// Probability that a location picks up a spurious area in
    /// `[0, 0.1)` on top of its noisy intensity.
    pub false_positive_rate: f64,
    pub seed: u64,
}

impl SimulatedDetector {
    pub fn exact() -> Self {
        SimulatedDetector {
            noise_sd: 0.0,
            false_positive_rate: 0.0,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        if !(self.noise_sd.is_finite() && self.noise_sd >= 0.0) {
            return Err(SynthError::InvalidDetector(format!("noise_sd {}", self.noise_sd)));
        }
        if !(0.0..=1.0).contains(&self.false_positive_rate) {
            return Err(SynthError::InvalidDetector(format!(
                "false_positive_rate {}",
                self.false_positive_rate
            )));
        }
        Ok(())
    }
}

/// Simulated `G(P)` for every sample point:
/// `clamp(intensity + N(0, noise_sd) [+ spurious area], 0, 4)`.
///
/// Point `i` draws from ChaCha8 stream `i` of the detector seed, so results
/// are identical whether points are scored in parallel or not.
pub fn sample_scores(
    field: &IntensityField,
    sample: &SampleSet,
    detector: &SimulatedDetector,
) -> Result<Vec<LocationScore>, SynthError> {
    detector.validate()?;
    let normal = Normal::new(0.0, detector.noise_sd).expect("validated noise_sd");
    let k = SIMULATED_VIEWS as f64;
    let values = par::map_range(sample.len(), |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(detector.seed);
        rng.set_stream(i as u64);
        let noise = normal.sample(&mut rng);
        let spurious: f64 = rng.random();
        let area: f64 = rng.random();
        let mut g = field.intensity(sample.points[i]) + noise;
        if spurious < detector.false_positive_rate {
            g += area * FALSE_POSITIVE_MAX_AREA;
        }
        g.clamp(0.0, k)
    });
    Ok(sample
        .entries()
        .zip(values)
        .map(|((point_id, location), g_value)| LocationScore {
            point_id,
            location,
            g_value,
            k_planned: SIMULATED_VIEWS,
            k_actual: SIMULATED_VIEWS,
            threshold: DEFAULT_CONFIDENCE_THRESHOLD,
        })
        .collect())
}

/// Regional estimate `G(R)` from scores that all lie in one region.
pub fn region_estimate(scores: &[LocationScore], region_id: &str) -> Result<f64, SynthError> {
    let assignment: BTreeMap<String, String> = scores
        .iter()
        .map(|s| (s.point_id.clone(), region_id.to_string()))
        .collect();
    let aggs = metrics::region_aggregate(scores, &assignment, 1)?;
    Ok(aggs.first().map_or(0.0, |a| a.g_region))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialEstimate {
    pub seed: u64,
    pub n: usize,
    pub estimate: f64,
}

/// One `G(R)` estimate per seed from a random sample of size `n`; the seed
/// drives both the sample and the detector noise. Trials run in parallel.
pub fn random_trials(
    field: &IntensityField,
    n: usize,
    seeds: &[u64],
    noise_sd: f64,
) -> Result<Vec<TrialEstimate>, SynthError> {
    let results = par::map(seeds, |&seed| -> Result<TrialEstimate, SynthError> {
        let sample = geo::random_sample(&field.region, n, seed)?;
        let detector = SimulatedDetector {
            noise_sd,
            false_positive_rate: 0.0,
            seed,
        };
        let scores = sample_scores(field, &sample, &detector)?;
        Ok(TrialEstimate {
            seed,
            n,
            estimate: region_estimate(&scores, field.region.id())?,
        })
    });
    results.into_iter().collect()
}

/// `G(R)` from a noise-free systematic grid at `spacing_m`.
pub fn systematic_estimate(field: &IntensityField, spacing_m: f64) -> Result<f64, SynthError> {
    let sample = geo::systematic_grid(&field.region, spacing_m)?;
    let scores = sample_scores(field, &sample, &SimulatedDetector::exact())?;
    region_estimate(&scores, field.region.id())
}

/// Mean, sample standard deviation and standard error of trial estimates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialSummary {
    pub mean: f64,
    pub sd: f64,
    pub std_error: f64,
}

pub fn summarize(trials: &[TrialEstimate]) -> TrialSummary {
    let n = trials.len() as f64;
    let mean = trials.iter().map(|t| t.estimate).sum::<f64>() / n;
    let var = trials.iter().map(|t| (t.estimate - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let sd = var.sqrt();
    TrialSummary {
        mean,
        sd,
        std_error: sd / n.sqrt(),
    }
}

/// Writes `seed,n,estimate`.
pub fn write_trials_csv<W: Write>(trials: &[TrialEstimate], out: W) -> Result<(), SynthError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["seed", "n", "estimate"])?;
    for t in trials {
        w.write_record([t.seed.to_string(), t.n.to_string(), t.estimate.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
