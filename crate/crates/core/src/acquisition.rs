//! View acquisition: plan `k` headings per sample point, fetch images through
//! a [`ProviderClient`] with an on-disk cache, filter by metadata, and
//! summarise coverage.
//!
//! Cache layout under the cache directory:
//!
//! ```text
//! <point_id>/<heading>.jpg        image bytes (Fetched only)
//! <point_id>/<heading>.meta.json  outcome and metadata (every status)
//! ```
//!
//! Every outcome, including `NoImagery` and `Failed`, is cached so that a
//! re-run over the same specs makes no provider calls.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{Cursor, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geo::{GeoPoint, SampleSet};

/// Headings of the default four-view plan.
pub const DEFAULT_HEADINGS: [f64; 4] = [0.0, 90.0, 180.0, 270.0];

#[derive(Debug, Error)]
pub enum AcquisitionError {
    #[error("heading {0} appears more than once")]
    DuplicateHeading(f64),
    #[error("heading {0} is outside [0, 360)")]
    InvalidHeading(f64),
    #[error("at least one heading is required")]
    NoHeadings,
    #[error("max_in_flight must be at least 1")]
    ZeroConcurrency,
    #[error("cache directory {path} is not writable: {source}")]
    CacheUnwritable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("record refers to unknown point_id {0}")]
    UnknownPointId(String),
    #[error("provider configuration: {0}")]
    ProviderConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("CSV: {0}")]
    Csv(#[from] csv::Error),
}

/// One planned capture: a location and a compass heading (degrees clockwise
/// from north).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewSpec {
    pub point_id: String,
    pub location: GeoPoint,
    pub heading: f64,
}

impl ViewSpec {
    /// `<point_id>_<heading>`, the name stem used by fixtures and adapters.
    pub fn key(&self) -> String {
        format!("{}_{}", self.point_id, format_heading(self.heading))
    }
}

/// Shortest decimal rendering of a heading (`90`, `22.5`).
pub fn format_heading(h: f64) -> String {
    format!("{h}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provider {
    FirstParty,
    ThirdParty,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewStatus {
    Fetched,
    NoImagery,
    Failed,
}

/// Outcome of acquiring one view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub spec: ViewSpec,
    /// SHA-256 of the image bytes, hex encoded. Empty unless Fetched.
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub capture_year: Option<i32>,
    pub provider: Provider,
    pub status: ViewStatus,
}

impl ViewRecord {
    fn without_image(spec: ViewSpec, status: ViewStatus, capture_year: Option<i32>, provider: Provider) -> Self {
        ViewRecord {
            spec,
            image_id: String::new(),
            width: 0,
            height: 0,
            capture_year,
            provider,
            status,
        }
    }
}

/// One spec per (point, heading), ordered by point then ascending heading.
pub fn plan_views(sample: &SampleSet, headings: &[f64]) -> Result<Vec<ViewSpec>, AcquisitionError> {
    if headings.is_empty() {
        return Err(AcquisitionError::NoHeadings);
    }
    let mut sorted = headings.to_vec();
    for &h in &sorted {
        if !(h.is_finite() && (0.0..360.0).contains(&h)) {
            return Err(AcquisitionError::InvalidHeading(h));
        }
    }
    sorted.sort_by(f64::total_cmp);
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(AcquisitionError::DuplicateHeading(w[0]));
    }
    Ok(sample
        .entries()
        .flat_map(|(id, p)| {
            sorted.iter().map(move |&heading| ViewSpec {
                point_id: id.clone(),
                location: p,
                heading,
            })
        })
        .collect())
}

/// What a provider returned for one spec.
#[derive(Debug, Clone, PartialEq)]
pub enum ProviderResponse {
    Image {
        bytes: Vec<u8>,
        capture_year: Option<i32>,
        provider: Provider,
    },
    NoImagery,
}

/// A source of street-level imagery. Implementations must be callable from
/// several threads at once.
pub trait ProviderClient: Sync {
    fn fetch(&self, spec: &ViewSpec) -> Result<ProviderResponse, String>;
}

/// Sidecar metadata for one view in a stub provider directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StubEntry {
    pub year: Option<i32>,
    pub provider: Provider,
    pub status: ViewStatus,
}

/// Provider backed by a directory of `<point_id>_<heading>.jpg` files and a
/// `manifest.json` mapping `<point_id>_<heading>` to a [`StubEntry`]. Specs
/// absent from the manifest have no imagery.
pub struct StubProvider {
    dir: PathBuf,
    manifest: BTreeMap<String, StubEntry>,
    calls: AtomicUsize,
}

impl StubProvider {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, AcquisitionError> {
        let dir = dir.into();
        let text = fs::read_to_string(dir.join("manifest.json"))?;
        let manifest = serde_json::from_str(&text)?;
        Ok(StubProvider {
            dir,
            manifest,
            calls: AtomicUsize::new(0),
        })
    }

    /// Number of `fetch` calls served so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ProviderClient for StubProvider {
    fn fetch(&self, spec: &ViewSpec) -> Result<ProviderResponse, String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let key = spec.key();
        let Some(entry) = self.manifest.get(&key) else {
            return Ok(ProviderResponse::NoImagery);
        };
        match entry.status {
            ViewStatus::NoImagery => Ok(ProviderResponse::NoImagery),
            ViewStatus::Failed => Err(format!("{key}: scripted failure")),
            ViewStatus::Fetched => {
                let path = self.dir.join(format!("{key}.jpg"));
                let bytes = fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
                Ok(ProviderResponse::Image {
                    bytes,
                    capture_year: entry.year,
                    provider: entry.provider,
                })
            }
        }
    }
}

/// Token bucket with unit capacity: successive acquisitions are spaced at
/// least `1 / rate` seconds apart.
pub struct RateLimiter {
    interval: Duration,
    next_slot: Mutex<Option<Instant>>,
}

impl RateLimiter {
    pub fn new(requests_per_second: f64) -> Result<Self, AcquisitionError> {
        if !(requests_per_second.is_finite() && requests_per_second > 0.0) {
            return Err(AcquisitionError::ProviderConfig(format!(
                "requests_per_second must be positive, got {requests_per_second}"
            )));
        }
        Ok(RateLimiter {
            interval: Duration::from_secs_f64(1.0 / requests_per_second),
            next_slot: Mutex::new(None),
        })
    }

    /// Blocks until a request may be sent.
    pub fn acquire(&self) {
        let wait_until = {
            let mut slot = self.next_slot.lock().expect("rate limiter poisoned");
            let now = Instant::now();
            let start = match *slot {
                Some(t) if t > now => t,
                _ => now,
            };
            *slot = Some(start + self.interval);
            start
        };
        let now = Instant::now();
        if wait_until > now {
            thread::sleep(wait_until - now);
        }
    }
}

/// Settings of the generic HTTP provider.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpProviderConfig {
    /// Image URL with `{lat}`, `{lon}`, `{heading}`, `{width}`, `{height}`
    /// and optionally `{api_key}` placeholders.
    pub url_template: String,
    /// Optional metadata URL (same placeholders) answering JSON with
    /// `status`, `date` (`YYYY[-MM]`) and `copyright` fields.
    #[serde(default)]
    pub metadata_url_template: Option<String>,
    /// Environment variable holding the API key.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_rps")]
    pub requests_per_second: f64,
    #[serde(default = "default_image_size")]
    pub width: u32,
    #[serde(default = "default_image_size")]
    pub height: u32,
    /// Copyright substring identifying first-party imagery. Without it the
    /// provider of every view is `Unknown`.
    #[serde(default)]
    pub first_party_marker: Option<String>,
}

fn default_rps() -> f64 {
    10.0
}

fn default_image_size() -> u32 {
    640
}

impl HttpProviderConfig {
    /// Substitutes placeholders in `template` for `spec`.
    pub fn render_url(&self, template: &str, spec: &ViewSpec, api_key: &str) -> String {
        template
            .replace("{lat}", &spec.location.lat().to_string())
            .replace("{lon}", &spec.location.lon().to_string())
            .replace("{heading}", &format_heading(spec.heading))
            .replace("{width}", &self.width.to_string())
            .replace("{height}", &self.height.to_string())
            .replace("{api_key}", api_key)
    }
}

/// Provider speaking plain HTTP GET, rate limited by a token bucket.
#[cfg(feature = "http")]
pub struct HttpProvider {
    config: HttpProviderConfig,
    api_key: String,
    limiter: RateLimiter,
    agent: ureq::Agent,
}

#[cfg(feature = "http")]
impl HttpProvider {
    pub fn new(config: HttpProviderConfig) -> Result<Self, AcquisitionError> {
        let api_key = match &config.api_key_env {
            Some(var) => std::env::var(var)
                .map_err(|_| AcquisitionError::ProviderConfig(format!("environment variable {var} is not set")))?,
            None => String::new(),
        };
        let limiter = RateLimiter::new(config.requests_per_second)?;
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(60)))
            .build()
            .into();
        Ok(HttpProvider {
            config,
            api_key,
            limiter,
            agent,
        })
    }

    fn get(&self, url: &str) -> Result<(u16, Vec<u8>), String> {
        self.limiter.acquire();
        let mut resp = self.agent.get(url).call().map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .with_config()
            .limit(64 * 1024 * 1024)
            .read_to_vec()
            .map_err(|e| e.to_string())?;
        Ok((status, body))
    }
}

#[cfg(feature = "http")]
impl ProviderClient for HttpProvider {
    fn fetch(&self, spec: &ViewSpec) -> Result<ProviderResponse, String> {
        let mut capture_year = None;
        let mut provider = Provider::Unknown;
        if let Some(tpl) = &self.config.metadata_url_template {
            let url = self.config.render_url(tpl, spec, &self.api_key);
            let (status, body) = self.get(&url)?;
            if status == 404 {
                return Ok(ProviderResponse::NoImagery);
            }
            if status != 200 {
                return Err(format!("metadata request returned HTTP {status}"));
            }
            let meta: serde_json::Value = serde_json::from_slice(&body).map_err(|e| e.to_string())?;
            match meta.get("status").and_then(|s| s.as_str()) {
                Some("OK") | None => {}
                Some("ZERO_RESULTS") | Some("NOT_FOUND") => return Ok(ProviderResponse::NoImagery),
                Some(other) => return Err(format!("metadata status {other}")),
            }
            capture_year = meta
                .get("date")
                .and_then(|d| d.as_str())
                .and_then(|d| d.get(..4))
                .and_then(|y| y.parse().ok());
            if let Some(marker) = &self.config.first_party_marker {
                let copyright = meta.get("copyright").and_then(|c| c.as_str()).unwrap_or("");
                provider = if copyright.contains(marker.as_str()) {
                    Provider::FirstParty
                } else {
                    Provider::ThirdParty
                };
            }
        }
        let url = self.config.render_url(&self.config.url_template, spec, &self.api_key);
        let (status, bytes) = self.get(&url)?;
        match status {
            200 => Ok(ProviderResponse::Image {
                bytes,
                capture_year,
                provider,
            }),
            404 => Ok(ProviderResponse::NoImagery),
            s => Err(format!("image request returned HTTP {s}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CacheMeta {
    image_id: String,
    width: u32,
    height: u32,
    capture_year: Option<i32>,
    provider: Provider,
    status: ViewStatus,
}

/// SHA-256 of `bytes`, hex encoded.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Paths of the cached files for a spec.
pub fn cache_paths(cache_dir: &Path, spec: &ViewSpec) -> (PathBuf, PathBuf) {
    let dir = cache_dir.join(&spec.point_id);
    let h = format_heading(spec.heading);
    (dir.join(format!("{h}.jpg")), dir.join(format!("{h}.meta.json")))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension(format!("tmp-{}-{:?}", std::process::id(), thread::current().id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

fn read_cached(cache_dir: &Path, spec: &ViewSpec, retry_failed: bool) -> Option<ViewRecord> {
    let (img, meta_path) = cache_paths(cache_dir, spec);
    let meta: CacheMeta = serde_json::from_slice(&fs::read(meta_path).ok()?).ok()?;
    if meta.status == ViewStatus::Failed && retry_failed {
        return None;
    }
    if meta.status == ViewStatus::Fetched && !img.is_file() {
        return None;
    }
    Some(ViewRecord {
        spec: spec.clone(),
        image_id: meta.image_id,
        width: meta.width,
        height: meta.height,
        capture_year: meta.capture_year,
        provider: meta.provider,
        status: meta.status,
    })
}

fn store(cache_dir: &Path, record: &ViewRecord, bytes: Option<&[u8]>) -> Result<(), AcquisitionError> {
    let (img, meta_path) = cache_paths(cache_dir, &record.spec);
    let dir = img.parent().expect("cache path has a parent");
    let unwritable = |source| AcquisitionError::CacheUnwritable {
        path: dir.to_path_buf(),
        source,
    };
    fs::create_dir_all(dir).map_err(unwritable)?;
    if let Some(bytes) = bytes {
        write_atomic(&img, bytes).map_err(unwritable)?;
    }
    let meta = CacheMeta {
        image_id: record.image_id.clone(),
        width: record.width,
        height: record.height,
        capture_year: record.capture_year,
        provider: record.provider,
        status: record.status,
    };
    let json = serde_json::to_vec_pretty(&meta)?;
    write_atomic(&meta_path, &json).map_err(unwritable)?;
    Ok(())
}

fn image_dimensions(bytes: &[u8]) -> Option<(u32, u32)> {
    let dims = image::ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .ok()?
        .into_dimensions()
        .ok()?;
    (dims.0 > 0 && dims.1 > 0).then_some(dims)
}

fn fetch_one(
    spec: &ViewSpec,
    client: &dyn ProviderClient,
    cache_dir: &Path,
    retry_failed: bool,
) -> Result<ViewRecord, AcquisitionError> {
    if let Some(hit) = read_cached(cache_dir, spec, retry_failed) {
        return Ok(hit);
    }
    let (record, bytes) = match client.fetch(spec) {
        Ok(ProviderResponse::Image {
            bytes,
            capture_year,
            provider,
        }) => match image_dimensions(&bytes) {
            Some((width, height)) => (
                ViewRecord {
                    spec: spec.clone(),
                    image_id: content_hash(&bytes),
                    width,
                    height,
                    capture_year,
                    provider,
                    status: ViewStatus::Fetched,
                },
                Some(bytes),
            ),
            None => (
                ViewRecord::without_image(spec.clone(), ViewStatus::Failed, capture_year, provider),
                None,
            ),
        },
        Ok(ProviderResponse::NoImagery) => (
            ViewRecord::without_image(spec.clone(), ViewStatus::NoImagery, None, Provider::Unknown),
            None,
        ),
        Err(_) => (
            ViewRecord::without_image(spec.clone(), ViewStatus::Failed, None, Provider::Unknown),
            None,
        ),
    };
    store(cache_dir, &record, bytes.as_deref())?;
    Ok(record)
}

/// Fetches every spec, at most `max_in_flight` at a time. Cache hits skip
/// the client; per-view failures become `Failed` records. The output order
/// matches `specs`. Only cache write failures abort the batch.
pub fn fetch_views(
    specs: &[ViewSpec],
    client: &dyn ProviderClient,
    cache_dir: &Path,
    max_in_flight: usize,
) -> Result<Vec<ViewRecord>, AcquisitionError> {
    fetch_views_with(specs, client, cache_dir, max_in_flight, false)
}

/// [`fetch_views`], optionally re-requesting views cached as `Failed`.
pub fn fetch_views_with(
    specs: &[ViewSpec],
    client: &dyn ProviderClient,
    cache_dir: &Path,
    max_in_flight: usize,
    retry_failed: bool,
) -> Result<Vec<ViewRecord>, AcquisitionError> {
    if max_in_flight == 0 {
        return Err(AcquisitionError::ZeroConcurrency);
    }
    fs::create_dir_all(cache_dir).map_err(|source| AcquisitionError::CacheUnwritable {
        path: cache_dir.to_path_buf(),
        source,
    })?;
    let slots: Vec<Mutex<Option<Result<ViewRecord, AcquisitionError>>>> =
        specs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let workers = max_in_flight.min(specs.len());
    thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                if abort.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= specs.len() {
                    break;
                }
                let result = fetch_one(&specs[i], client, cache_dir, retry_failed);
                if result.is_err() {
                    abort.store(true, Ordering::SeqCst);
                }
                *slots[i].lock().expect("result slot poisoned") = Some(result);
            });
        }
    });
    let mut out = Vec::with_capacity(specs.len());
    let mut first_err = None;
    for slot in slots {
        match slot.into_inner().expect("result slot poisoned") {
            Some(Ok(r)) => out.push(r),
            Some(Err(e)) => {
                first_err.get_or_insert(e);
            }
            None => {}
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

/// Record filter; `All` is the conjunction of its members.
#[derive(Debug, Clone, PartialEq)]
pub enum MetadataPredicate {
    FirstParty,
    Fetched,
    YearRange { min: i32, max: i32 },
    All(Vec<MetadataPredicate>),
}

impl MetadataPredicate {
    pub fn matches(&self, r: &ViewRecord) -> bool {
        match self {
            MetadataPredicate::FirstParty => r.provider == Provider::FirstParty,
            MetadataPredicate::Fetched => r.status == ViewStatus::Fetched,
            MetadataPredicate::YearRange { min, max } => r.capture_year.is_some_and(|y| (*min..=*max).contains(&y)),
            MetadataPredicate::All(ps) => ps.iter().all(|p| p.matches(r)),
        }
    }

    pub fn and(self, other: MetadataPredicate) -> MetadataPredicate {
        match self {
            MetadataPredicate::All(mut ps) => {
                ps.push(other);
                MetadataPredicate::All(ps)
            }
            p => MetadataPredicate::All(vec![p, other]),
        }
    }
}

pub fn filter_views(records: &[ViewRecord], predicate: &MetadataPredicate) -> Vec<ViewRecord> {
    records.iter().filter(|r| predicate.matches(r)).cloned().collect()
}

/// Point-level acquisition census.
///
/// A view counts toward coverage when it is `Fetched` from a provider other
/// than a third party; fetched third-party views are tallied in
/// `excluded_third_party` instead. A point is mapped when at least one of its
/// views counts, and is assigned the most frequent capture year among its
/// counted views (ties go to the latest year).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub total_points: usize,
    pub mapped_points: usize,
    pub views_fetched: usize,
    pub per_year_counts: BTreeMap<i32, usize>,
    pub excluded_third_party: usize,
}

impl CoverageReport {
    /// Year census CSV with columns `year,points`.
    pub fn write_year_csv<W: Write>(&self, out: W) -> Result<(), AcquisitionError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["year", "points"])?;
        for (year, n) in &self.per_year_counts {
            w.write_record([year.to_string(), n.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn coverage_report(records: &[ViewRecord], sample: &SampleSet) -> Result<CoverageReport, AcquisitionError> {
    let known: HashSet<String> = sample.entries().map(|(id, _)| id).collect();
    let mut years_by_point: HashMap<&str, Vec<Option<i32>>> = HashMap::new();
    let mut views_fetched = 0;
    let mut excluded_third_party = 0;
    for r in records {
        if !known.contains(&r.spec.point_id) {
            return Err(AcquisitionError::UnknownPointId(r.spec.point_id.clone()));
        }
        if r.status != ViewStatus::Fetched {
            continue;
        }
        if r.provider == Provider::ThirdParty {
            excluded_third_party += 1;
            continue;
        }
        views_fetched += 1;
        years_by_point.entry(&r.spec.point_id).or_default().push(r.capture_year);
    }
    let mut per_year_counts = BTreeMap::new();
    for years in years_by_point.values() {
        let mut tally: BTreeMap<i32, usize> = BTreeMap::new();
        for y in years.iter().flatten() {
            *tally.entry(*y).or_default() += 1;
        }
        // BTreeMap iterates ascending, so max_by_key keeps the latest on ties.
        if let Some((&year, _)) = tally.iter().max_by_key(|(_, &n)| n) {
            *per_year_counts.entry(year).or_default() += 1;
        }
    }
    Ok(CoverageReport {
        total_points: sample.len(),
        mapped_points: years_by_point.len(),
        views_fetched,
        per_year_counts,
        excluded_third_party,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{systematic_grid, RegionPolygon, SamplingScheme};

    fn sample(n: usize) -> SampleSet {
        let points = (0..n)
            .map(|i| GeoPoint::new(-23.5 + i as f64 * 1e-3, -46.6).unwrap())
            .collect();
        SampleSet {
            scheme: SamplingScheme::Systematic { spacing_m: 102.0 },
            region_id: "r".into(),
            points,
        }
    }

    fn png(w: u32, h: u32, shade: u8) -> Vec<u8> {
        let img = image::RgbImage::from_pixel(w, h, image::Rgb([shade, 0, 0]));
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png).unwrap();
        out.into_inner()
    }

    fn record(point: &str, status: ViewStatus, year: Option<i32>, provider: Provider) -> ViewRecord {
        ViewRecord {
            spec: ViewSpec {
                point_id: point.into(),
                location: GeoPoint::new(0.0, 0.0).unwrap(),
                heading: 0.0,
            },
            image_id: if status == ViewStatus::Fetched {
                "x".into()
            } else {
                String::new()
            },
            width: 1,
            height: 1,
            capture_year: year,
            provider,
            status,
        }
    }

    #[test]
    fn plan_examples() {
        let s = sample(3);
        let specs = plan_views(&s, &DEFAULT_HEADINGS).unwrap();
        assert_eq!(specs.len(), 12);
        assert_eq!(specs[0].point_id, "000000");
        assert_eq!(specs[1].heading, 90.0);
        assert_eq!(specs[4].point_id, "000001");
        assert_eq!(plan_views(&s, &[0.0]).unwrap().len(), 3);
        let unordered = plan_views(&s, &[270.0, 0.0]).unwrap();
        assert_eq!(unordered[0].heading, 0.0);
        assert!(matches!(
            plan_views(&s, &[0.0, 0.0]),
            Err(AcquisitionError::DuplicateHeading(_))
        ));
        assert!(matches!(
            plan_views(&s, &[360.0]),
            Err(AcquisitionError::InvalidHeading(_))
        ));
        assert!(matches!(plan_views(&s, &[]), Err(AcquisitionError::NoHeadings)));
        assert_eq!(specs[1].key(), "000000_90");
    }

    #[test]
    fn default_plan_scale() {
        // 68,752 mapped points with four headings each.
        let points = 68_752usize;
        assert_eq!(points * DEFAULT_HEADINGS.len(), 275_008);
        assert!(275_339 - 275_008 < points / 100);
    }

    /// Client that returns images, with scripted failures, and records the
    /// peak number of concurrent calls.
    struct Scripted {
        fail: HashSet<usize>,
        none: bool,
        calls: AtomicUsize,
        active: AtomicUsize,
        peak: AtomicUsize,
    }

    impl Scripted {
        fn new(fail: &[usize], none: bool) -> Self {
            Scripted {
                fail: fail.iter().copied().collect(),
                none,
                calls: AtomicUsize::new(0),
                active: AtomicUsize::new(0),
                peak: AtomicUsize::new(0),
            }
        }
    }

    impl ProviderClient for Scripted {
        fn fetch(&self, spec: &ViewSpec) -> Result<ProviderResponse, String> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            let now = self.active.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            thread::sleep(Duration::from_millis(5));
            self.active.fetch_sub(1, Ordering::SeqCst);
            let idx: usize = spec.point_id.parse().unwrap();
            if self.fail.contains(&idx) {
                return Err("scripted".into());
            }
            if self.none {
                return Ok(ProviderResponse::NoImagery);
            }
            Ok(ProviderResponse::Image {
                bytes: png(8, 6, idx as u8),
                capture_year: Some(2017),
                provider: Provider::FirstParty,
            })
        }
    }

    #[test]
    fn fetch_with_failures_preserves_order() {
        let dir = tempfile::tempdir().unwrap();
        let specs = plan_views(&sample(10), &[0.0]).unwrap();
        let client = Scripted::new(&[3, 7], false);
        let recs = fetch_views(&specs, &client, dir.path(), 4).unwrap();
        assert_eq!(recs.len(), 10);
        for (i, r) in recs.iter().enumerate() {
            assert_eq!(r.spec, specs[i]);
            let expected = if i == 3 || i == 7 {
                ViewStatus::Failed
            } else {
                ViewStatus::Fetched
            };
            assert_eq!(r.status, expected);
        }
        let fetched = recs.iter().filter(|r| r.status == ViewStatus::Fetched).count();
        assert_eq!(fetched, 8);
        assert_eq!((recs[0].width, recs[0].height), (8, 6));
        assert_eq!(recs[0].image_id, content_hash(&png(8, 6, 0)));
        assert!(client.peak.load(Ordering::SeqCst) <= 4);

        // Second run: everything comes from the cache.
        let again = Scripted::new(&[], false);
        let recs2 = fetch_views(&specs, &again, dir.path(), 4).unwrap();
        assert_eq!(again.calls.load(Ordering::SeqCst), 0);
        assert_eq!(recs, recs2);

        // Retrying failed views only touches the two failures.
        let retry = Scripted::new(&[], false);
        let recs3 = fetch_views_with(&specs, &retry, dir.path(), 4, true).unwrap();
        assert_eq!(retry.calls.load(Ordering::SeqCst), 2);
        assert!(recs3.iter().all(|r| r.status == ViewStatus::Fetched));
    }

    #[test]
    fn concurrency_bound_is_respected() {
        for limit in [1, 2, 5] {
            let dir = tempfile::tempdir().unwrap();
            let specs = plan_views(&sample(12), &DEFAULT_HEADINGS).unwrap();
            let client = Scripted::new(&[], false);
            fetch_views(&specs, &client, dir.path(), limit).unwrap();
            let peak = client.peak.load(Ordering::SeqCst);
            assert!(peak <= limit && peak >= 1, "limit {limit} peak {peak}");
        }
    }

    #[test]
    fn no_imagery_everywhere() {
        let dir = tempfile::tempdir().unwrap();
        let specs = plan_views(&sample(4), &DEFAULT_HEADINGS).unwrap();
        let recs = fetch_views(&specs, &Scripted::new(&[], true), dir.path(), 3).unwrap();
        assert!(recs.iter().all(|r| r.status == ViewStatus::NoImagery));
        assert!(matches!(
            fetch_views(&specs, &Scripted::new(&[], true), dir.path(), 0),
            Err(AcquisitionError::ZeroConcurrency)
        ));
    }

    #[test]
    fn undecodable_bytes_become_failed() {
        struct Garbage;
        impl ProviderClient for Garbage {
            fn fetch(&self, _: &ViewSpec) -> Result<ProviderResponse, String> {
                Ok(ProviderResponse::Image {
                    bytes: b"not an image".to_vec(),
                    capture_year: None,
                    provider: Provider::Unknown,
                })
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let specs = plan_views(&sample(1), &[0.0]).unwrap();
        let recs = fetch_views(&specs, &Garbage, dir.path(), 1).unwrap();
        assert_eq!(recs[0].status, ViewStatus::Failed);
    }

    #[test]
    fn unwritable_cache_aborts() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        let specs = plan_views(&sample(2), &[0.0]).unwrap();
        let err = fetch_views(&specs, &Scripted::new(&[], false), &blocker, 2).unwrap_err();
        assert!(matches!(err, AcquisitionError::CacheUnwritable { .. }), "{err}");
    }

    #[test]
    fn stub_provider_reads_fixture_dir() {
        let dir = tempfile::tempdir().unwrap();
        let specs = plan_views(&sample(2), &[0.0, 90.0]).unwrap();
        fs::write(dir.path().join("000000_0.jpg"), png(4, 4, 1)).unwrap();
        fs::write(dir.path().join("000001_90.jpg"), png(5, 4, 2)).unwrap();
        let manifest = r#"{
            "000000_0": {"year": 2016, "provider": "first_party", "status": "fetched"},
            "000000_90": {"year": null, "provider": "unknown", "status": "failed"},
            "000001_90": {"year": 2017, "provider": "third_party", "status": "fetched"}
        }"#;
        fs::write(dir.path().join("manifest.json"), manifest).unwrap();
        let stub = StubProvider::open(dir.path()).unwrap();
        let cache = tempfile::tempdir().unwrap();
        let recs = fetch_views(&specs, &stub, cache.path(), 2).unwrap();
        let statuses: Vec<ViewStatus> = recs.iter().map(|r| r.status).collect();
        assert_eq!(
            statuses,
            [
                ViewStatus::Fetched,
                ViewStatus::Failed,
                ViewStatus::NoImagery,
                ViewStatus::Fetched
            ]
        );
        assert_eq!(recs[3].provider, Provider::ThirdParty);
        assert_eq!(recs[0].capture_year, Some(2016));
        assert_eq!(stub.calls(), 4);
        assert!(cache.path().join("000000").join("0.jpg").is_file());
        assert!(cache.path().join("000001").join("90.meta.json").is_file());
    }

    #[test]
    fn filter_examples() {
        let recs = vec![
            record("a", ViewStatus::Fetched, Some(2017), Provider::FirstParty),
            record("a", ViewStatus::Fetched, Some(2016), Provider::ThirdParty),
            record("a", ViewStatus::NoImagery, None, Provider::ThirdParty),
        ];
        assert_eq!(filter_views(&recs, &MetadataPredicate::FirstParty).len(), 1);
        assert!(filter_views(&[], &MetadataPredicate::Fetched).is_empty());
        let p = MetadataPredicate::Fetched.and(MetadataPredicate::YearRange { min: 2016, max: 2016 });
        assert_eq!(filter_views(&recs, &p), vec![recs[1].clone()]);
    }

    #[test]
    fn year_census_from_table() {
        // Points per acquisition year in a city-scale survey.
        let table = [
            (2010, 1_241),
            (2011, 16_311),
            (2012, 207),
            (2013, 422),
            (2014, 2_182),
            (2015, 4_563),
            (2016, 4_211),
            (2017, 39_391),
            (2018, 317),
        ];
        let recs: Vec<ViewRecord> = table
            .iter()
            .flat_map(|&(y, n)| (0..n).map(move |_| record("p", ViewStatus::Fetched, Some(y), Provider::FirstParty)))
            .collect();
        let kept = filter_views(&recs, &MetadataPredicate::YearRange { min: 2017, max: 2017 });
        assert_eq!(kept.len(), 39_391);
    }

    #[test]
    fn coverage_examples() {
        let s = sample(2);
        let specs = plan_views(&s, &DEFAULT_HEADINGS).unwrap();
        let recs: Vec<ViewRecord> = specs
            .iter()
            .map(|spec| {
                let mut r = record(&spec.point_id, ViewStatus::Fetched, Some(2017), Provider::FirstParty);
                r.spec = spec.clone();
                if spec.point_id == "000001" {
                    r.status = ViewStatus::NoImagery;
                    r.capture_year = None;
                }
                r
            })
            .collect();
        let rep = coverage_report(&recs, &s).unwrap();
        assert_eq!(rep.total_points, 2);
        assert_eq!(rep.mapped_points, 1);
        assert_eq!(rep.views_fetched, 4);
        assert_eq!(rep.per_year_counts, BTreeMap::from([(2017, 1)]));

        let tie: Vec<ViewRecord> = [2016, 2016, 2017, 2017]
            .iter()
            .map(|&y| record("000000", ViewStatus::Fetched, Some(y), Provider::FirstParty))
            .collect();
        let rep = coverage_report(&tie, &s).unwrap();
        assert_eq!(rep.per_year_counts, BTreeMap::from([(2017, 1)]));

        let stray = [record("zzz", ViewStatus::Fetched, None, Provider::FirstParty)];
        assert!(matches!(
            coverage_report(&stray, &s),
            Err(AcquisitionError::UnknownPointId(_))
        ));
    }

    #[test]
    fn coverage_census_fixture() {
        // 100 points: i % 5 == 0 unmapped, i % 7 == 0 third-party only,
        // otherwise 3 views in year 2010 + (i % 4) plus one 2018 view.
        let region = RegionPolygon::rectangle("r", GeoPoint::new(-23.5, -46.6).unwrap(), 990.0, 990.0).unwrap();
        let s = systematic_grid(&region, 100.0).unwrap();
        assert_eq!(s.len(), 100);
        let mut recs = Vec::new();
        let mut expected: BTreeMap<i32, usize> = BTreeMap::new();
        let mut mapped = 0;
        let mut third = 0;
        let mut fetched = 0;
        for (i, (id, _)) in s.entries().enumerate() {
            if i % 5 == 0 {
                recs.push(record(&id, ViewStatus::NoImagery, None, Provider::Unknown));
                continue;
            }
            if i % 7 == 0 {
                recs.push(record(&id, ViewStatus::Fetched, Some(2012), Provider::ThirdParty));
                third += 1;
                continue;
            }
            let y = 2010 + (i % 4) as i32;
            for _ in 0..3 {
                recs.push(record(&id, ViewStatus::Fetched, Some(y), Provider::FirstParty));
            }
            recs.push(record(&id, ViewStatus::Fetched, Some(2018), Provider::FirstParty));
            fetched += 4;
            mapped += 1;
            *expected.entry(y).or_default() += 1;
        }
        let rep = coverage_report(&recs, &s).unwrap();
        assert_eq!(rep.mapped_points, mapped);
        assert_eq!(rep.excluded_third_party, third);
        assert_eq!(rep.views_fetched, fetched);
        assert_eq!(rep.per_year_counts, expected);
        assert!(rep.per_year_counts.values().sum::<usize>() <= rep.mapped_points);

        recs.reverse();
        assert_eq!(coverage_report(&recs, &s).unwrap(), rep);

        let mut csv = Vec::new();
        rep.write_year_csv(&mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with("year,points\n2010,"));
    }

    #[test]
    fn rate_limiter_spaces_requests() {
        let rl = RateLimiter::new(50.0).unwrap();
        let start = Instant::now();
        for _ in 0..5 {
            rl.acquire();
        }
        assert!(start.elapsed() >= Duration::from_millis(75));
        assert!(RateLimiter::new(0.0).is_err());
    }

    #[test]
    fn url_templating() {
        let cfg = HttpProviderConfig {
            url_template: "https://h/img?loc={lat},{lon}&heading={heading}&size={width}x{height}&key={api_key}".into(),
            metadata_url_template: None,
            api_key_env: None,
            requests_per_second: 10.0,
            width: 640,
            height: 480,
            first_party_marker: None,
        };
        let spec = ViewSpec {
            point_id: "000001".into(),
            location: GeoPoint::new(-23.5, -46.25).unwrap(),
            heading: 90.0,
        };
        assert_eq!(
            cfg.render_url(&cfg.url_template, &spec, "K"),
            "https://h/img?loc=-23.5,-46.25&heading=90&size=640x480&key=K"
        );
    }

    #[cfg(feature = "http")]
    #[test]
    fn http_provider_against_local_server() {
        use std::io::{BufRead, BufReader};
        use std::net::TcpListener;

        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let body = png(6, 3, 9);
        let served = body.clone();
        let server = thread::spawn(move || {
            for _ in 0..3 {
                let (mut stream, _) = listener.accept().unwrap();
                let mut line = String::new();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                reader.read_line(&mut line).unwrap();
                loop {
                    let mut h = String::new();
                    reader.read_line(&mut h).unwrap();
                    if h == "\r\n" || h.is_empty() {
                        break;
                    }
                }
                let path = line.split_whitespace().nth(1).unwrap().to_string();
                let (status, ctype, payload): (&str, &str, Vec<u8>) = if path.starts_with("/meta") {
                    if path.contains("heading=180") {
                        ("200 OK", "application/json", br#"{"status":"ZERO_RESULTS"}"#.to_vec())
                    } else {
                        (
                            "200 OK",
                            "application/json",
                            br#"{"status":"OK","date":"2017-05","copyright":"(c) Acme"}"#.to_vec(),
                        )
                    }
                } else {
                    ("200 OK", "image/png", served.clone())
                };
                let head = format!(
                    "HTTP/1.1 {status}\r\nContent-Type: {ctype}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                    payload.len()
                );
                stream.write_all(head.as_bytes()).unwrap();
                stream.write_all(&payload).unwrap();
            }
        });
        let cfg = HttpProviderConfig {
            url_template: format!("http://{addr}/img?h={{heading}}"),
            metadata_url_template: Some(format!("http://{addr}/meta?heading={{heading}}")),
            api_key_env: None,
            requests_per_second: 100.0,
            width: 6,
            height: 3,
            first_party_marker: Some("Acme".into()),
        };
        let client = HttpProvider::new(cfg).unwrap();
        let mk = |heading| ViewSpec {
            point_id: "000000".into(),
            location: GeoPoint::new(0.0, 0.0).unwrap(),
            heading,
        };
        match client.fetch(&mk(0.0)).unwrap() {
            ProviderResponse::Image {
                bytes,
                capture_year,
                provider,
            } => {
                assert_eq!(bytes, body);
                assert_eq!(capture_year, Some(2017));
                assert_eq!(provider, Provider::FirstParty);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(client.fetch(&mk(180.0)).unwrap(), ProviderResponse::NoImagery);
        server.join().unwrap();
    }

    #[cfg(feature = "http")]
    #[test]
    fn http_provider_requires_api_key_variable() {
        let cfg = HttpProviderConfig {
            url_template: "http://localhost/".into(),
            metadata_url_template: None,
            api_key_env: Some("GRAFFMAP_TEST_SURELY_UNSET_VAR".into()),
            requests_per_second: 1.0,
            width: 1,
            height: 1,
            first_party_marker: None,
        };
        assert!(matches!(
            HttpProvider::new(cfg),
            Err(AcquisitionError::ProviderConfig(_))
        ));
    }
}
