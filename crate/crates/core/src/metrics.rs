//! Graffiti levels: the per-location score `G(P)` (sum of the graffiti area
//! fractions of the location's views), the per-region score `G(R)` (mean of
//! `G(P)` over the region's sampled locations), log-scale class breaks for
//! choropleths, and Spearman correlation against a district indicator.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::acquisition::{ViewRecord, ViewStatus};
use crate::detection::{area_fraction, DetectionSet};
use crate::geo::{GeoPoint, RegionPolygon, SampleSet};
use crate::par;

pub const DEFAULT_LOG_EPSILON: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("a location score needs at least one view")]
    NoViews,
    #[error("views belong to different points: {0} and {1}")]
    MixedPointIds(String, String),
    #[error("view {point_id}/{heading}: detections are for image {found}, view has image {expected}")]
    DetectionMismatch {
        point_id: String,
        heading: f64,
        expected: String,
        found: String,
    },
    #[error("point {0} has no region assignment")]
    UnassignedPoint(String),
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("epsilon must be positive and finite, got {0}")]
    InvalidEpsilon(f64),
    #[error("rank correlation needs at least 3 shared regions, found {0}")]
    InsufficientOverlap(usize),
    #[error("rank correlation is undefined when one side has no variation")]
    ConstantRanks,
    #[error("indicator value for {0} is not finite")]
    NonFiniteIndicator(String),
    #[error("CSV: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for MetricsError {
    fn from(e: csv::Error) -> Self {
        MetricsError::Csv(e.to_string())
    }
}

/// `G(P)` for one location with the number of views it rests on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationScore {
    pub point_id: String,
    pub location: GeoPoint,
    pub g_value: f64,
    pub k_planned: usize,
    pub k_actual: usize,
    pub threshold: f64,
}

impl LocationScore {
    /// Scales `g_value` by `k_planned / k_actual`, extrapolating a partially
    /// covered location to its full view plan. Scores without any scored
    /// view are returned unchanged.
    pub fn rescaled_to_planned(&self) -> LocationScore {
        let mut out = self.clone();
        if self.k_actual > 0 && self.k_actual < self.k_planned {
            out.g_value = self.g_value * self.k_planned as f64 / self.k_actual as f64;
        }
        out
    }
}

/// Scores one location from all of its planned views. Only `Fetched` views
/// with detections contribute; the sum runs in view order.
pub fn location_score(
    views: &[(ViewRecord, Option<DetectionSet>)],
    threshold: f64,
) -> Result<LocationScore, MetricsError> {
    let (first, _) = views.first().ok_or(MetricsError::NoViews)?;
    let mut g_value = 0.0;
    let mut k_actual = 0;
    for (record, det) in views {
        if record.spec.point_id != first.spec.point_id {
            return Err(MetricsError::MixedPointIds(
                first.spec.point_id.clone(),
                record.spec.point_id.clone(),
            ));
        }
        let (ViewStatus::Fetched, Some(det)) = (record.status, det) else {
            continue;
        };
        if det.image_id() != record.image_id {
            return Err(MetricsError::DetectionMismatch {
                point_id: record.spec.point_id.clone(),
                heading: record.spec.heading,
                expected: record.image_id.clone(),
                found: det.image_id().to_string(),
            });
        }
        g_value += area_fraction(det, threshold);
        k_actual += 1;
    }
    Ok(LocationScore {
        point_id: first.spec.point_id.clone(),
        location: first.spec.location,
        g_value,
        k_planned: views.len(),
        k_actual,
        threshold,
    })
}

/// `G(R)` for one region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionAggregate {
    pub region_id: String,
    pub g_region: f64,
    pub n: usize,
    pub class_index: usize,
}

/// Mean score per region over locations with at least `min_views` scored
/// views. Sums run in point_id order, so the result does not depend on the
/// order of `scores`. Regions left without locations are omitted. Output is
/// sorted by region id.
pub fn region_aggregate(
    scores: &[LocationScore],
    assignment: &BTreeMap<String, String>,
    min_views: usize,
) -> Result<Vec<RegionAggregate>, MetricsError> {
    let mut ordered: Vec<&LocationScore> = scores.iter().collect();
    ordered.sort_by(|a, b| a.point_id.cmp(&b.point_id));
    let mut acc: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for s in ordered {
        let region = assignment
            .get(&s.point_id)
            .ok_or_else(|| MetricsError::UnassignedPoint(s.point_id.clone()))?;
        if s.k_actual < min_views {
            continue;
        }
        let entry = acc.entry(region).or_insert((0.0, 0));
        entry.0 += s.g_value;
        entry.1 += 1;
    }
    Ok(acc
        .into_iter()
        .map(|(region, (sum, n))| RegionAggregate {
            region_id: region.to_string(),
            g_region: sum / n as f64,
            n,
            class_index: 0,
        })
        .collect())
}

/// Maps each sample point to the first district (in input order) that
/// contains it. Points outside every district are left out.
pub fn assign_districts(sample: &SampleSet, districts: &[RegionPolygon]) -> BTreeMap<String, String> {
    let hits = par::map(&sample.points, |&p| {
        districts.iter().find(|d| d.contains(p)).map(|d| d.id().to_string())
    });
    sample
        .entries()
        .zip(hits)
        .filter_map(|((id, _), hit)| hit.map(|r| (id, r)))
        .collect()
}

/// Assigns equal-width classes over `ln(g_region + epsilon)`; the minimum
/// lands in class 0 and the maximum in `n_classes - 1`. When all values are
/// equal every region gets class 0.
pub fn log_class_breaks(
    aggregates: &[RegionAggregate],
    n_classes: usize,
    epsilon: f64,
) -> Result<Vec<RegionAggregate>, MetricsError> {
    if n_classes < 2 {
        return Err(MetricsError::TooFewClasses(n_classes));
    }
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(MetricsError::InvalidEpsilon(epsilon));
    }
    let logs: Vec<f64> = aggregates.iter().map(|a| (a.g_region + epsilon).ln()).collect();
    let lo = logs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(aggregates
        .iter()
        .zip(&logs)
        .map(|(a, &v)| {
            let class_index = if hi > lo {
                let t = (v - lo) / (hi - lo);
                ((t * n_classes as f64).floor() as usize).min(n_classes - 1)
            } else {
                0
            };
            RegionAggregate {
                class_index,
                ..a.clone()
            }
        })
        .collect())
}

/// External per-region indicator (e.g. a development index).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IndicatorTable {
    values: BTreeMap<String, f64>,
}

impl IndicatorTable {
    pub fn new(values: BTreeMap<String, f64>) -> Result<Self, MetricsError> {
        if let Some((k, _)) = values.iter().find(|(_, v)| !v.is_finite()) {
            return Err(MetricsError::NonFiniteIndicator(k.clone()));
        }
        Ok(IndicatorTable { values })
    }

    pub fn get(&self, region_id: &str) -> Option<f64> {
        self.values.get(region_id).copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Reads a `region_id,value` CSV (header required).
    pub fn read_csv<R: Read>(input: R) -> Result<Self, MetricsError> {
        let mut r = csv::Reader::from_reader(input);
        let headers = r.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["region_id", "value"] {
            return Err(MetricsError::Csv("expected header region_id,value".into()));
        }
        let mut values = BTreeMap::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let v: f64 = rec[1]
                .trim()
                .parse()
                .map_err(|_| MetricsError::Csv(format!("row {}: bad value {:?}", i + 1, &rec[1])))?;
            values.insert(rec[0].to_string(), v);
        }
        IndicatorTable::new(values)
    }
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman correlation between `g_region` and the indicator over the
/// regions present in both.
pub fn rank_correlation(aggregates: &[RegionAggregate], indicator: &IndicatorTable) -> Result<f64, MetricsError> {
    let (g, ind): (Vec<f64>, Vec<f64>) = aggregates
        .iter()
        .filter_map(|a| indicator.get(&a.region_id).map(|v| (a.g_region, v)))
        .unzip();
    if g.len() < 3 {
        return Err(MetricsError::InsufficientOverlap(g.len()));
    }
    pearson(&average_ranks(&g), &average_ranks(&ind)).ok_or(MetricsError::ConstantRanks)
}

/// Writes `point_id,lat,lon,g_value,k_actual,k_planned,threshold`.
pub fn write_scores_csv<W: Write>(scores: &[LocationScore], out: W) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "point_id",
        "lat",
        "lon",
        "g_value",
        "k_actual",
        "k_planned",
        "threshold",
    ])?;
    for s in scores {
        w.write_record([
            s.point_id.clone(),
            s.location.lat().to_string(),
            s.location.lon().to_string(),
            s.g_value.to_string(),
            s.k_actual.to_string(),
            s.k_planned.to_string(),
            s.threshold.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scores_csv<R: Read>(input: R) -> Result<Vec<LocationScore>, MetricsError> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |col: &str| MetricsError::Csv(format!("row {}: bad {col}", i + 1));
        let f = |k: usize, col: &str| rec[k].parse::<f64>().map_err(|_| bad(col));
        let u = |k: usize, col: &str| rec[k].parse::<usize>().map_err(|_| bad(col));
        out.push(LocationScore {
            point_id: rec[0].to_string(),
            location: GeoPoint::new(f(1, "lat")?, f(2, "lon")?).map_err(|_| bad("coordinate"))?,
            g_value: f(3, "g_value")?,
            k_actual: u(4, "k_actual")?,
            k_planned: u(5, "k_planned")?,
            threshold: f(6, "threshold")?,
        });
    }
    Ok(out)
}

/// Writes `region_id,g_region,n,class_index`.
pub fn write_regions_csv<W: Write>(aggregates: &[RegionAggregate], out: W) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["region_id", "g_region", "n", "class_index"])?;
    for a in aggregates {
        w.write_record([
            a.region_id.clone(),
            a.g_region.to_string(),
            a.n.to_string(),
            a.class_index.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_regions_csv<R: Read>(input: R) -> Result<Vec<RegionAggregate>, MetricsError> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |col: &str| MetricsError::Csv(format!("row {}: bad {col}", i + 1));
        out.push(RegionAggregate {
            region_id: rec[0].to_string(),
            g_region: rec[1].parse().map_err(|_| bad("g_region"))?,
            n: rec[2].parse().map_err(|_| bad("n"))?,
            class_index: rec[3].parse().map_err(|_| bad("class_index"))?,
        });
    }
    Ok(out)
}

/// FeatureCollection with one feature per aggregated region, carrying
/// `g_region`, `n` and `class_index`. Multi-part districts become
/// MultiPolygons.
pub fn regions_geojson(aggregates: &[RegionAggregate], districts: &[RegionPolygon]) -> Value {
    let features: Vec<Value> = aggregates
        .iter()
        .map(|a| {
            let parts: Vec<Value> = districts
                .iter()
                .filter(|d| d.id() == a.region_id)
                .map(|d| d.geojson_coordinates())
                .collect();
            let geometry = match parts.len() {
                0 => Value::Null,
                1 => json!({"type": "Polygon", "coordinates": parts[0]}),
                _ => json!({"type": "MultiPolygon", "coordinates": parts}),
            };
            json!({
                "type": "Feature",
                "properties": {
                    "id": a.region_id,
                    "g_region": a.g_region,
                    "n": a.n,
                    "class_index": a.class_index,
                },
                "geometry": geometry,
            })
        })
        .collect();
    json!({"type": "FeatureCollection", "features": features})
}
