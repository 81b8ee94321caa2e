//! Brute-force oracles and random fixture builders shared by the
//! integration tests. Nothing here calls the library's mask decoding,
//! area, IoU or averaging code.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::Rng;

use graffmap::acquisition::{Provider, ViewRecord, ViewSpec, ViewStatus};
use graffmap::detection::{AnnotationSet, DetectionSet, Instance, RleMask};
use graffmap::geo::GeoPoint;
use graffmap::metrics::LocationScore;

/// Run lengths of a row-major bit vector, leading with background.
pub fn encode_bits(bits: &[bool]) -> Vec<u32> {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u32;
    for &b in bits {
        if b == current {
            run += 1;
        } else {
            counts.push(run);
            current = b;
            run = 1;
        }
    }
    counts.push(run);
    counts
}

pub fn decode_counts(counts: &[u32]) -> Vec<bool> {
    let mut bits = Vec::new();
    for (i, &c) in counts.iter().enumerate() {
        bits.extend(std::iter::repeat_n(i % 2 == 1, c as usize));
    }
    bits
}

pub fn random_bits<R: Rng>(rng: &mut R, n: usize) -> Vec<bool> {
    let density: f64 = rng.random_range(0.0..0.7);
    // Blobs: a few random rectangles-in-index-space for overlap.
    let mut bits = vec![false; n];
    if n == 0 {
        return bits;
    }
    for _ in 0..rng.random_range(0..3) {
        let a = rng.random_range(0..n);
        let b = rng.random_range(a..n);
        for bit in &mut bits[a..=b.min(a + n / 3)] {
            *bit = true;
        }
    }
    for bit in &mut bits {
        if rng.random_bool(density * 0.5) {
            *bit = !*bit;
        }
    }
    bits
}

pub fn random_mask<R: Rng>(rng: &mut R, h: u32, w: u32) -> RleMask {
    let bits = random_bits(rng, (h * w) as usize);
    RleMask::new(h, w, encode_bits(&bits)).expect("oracle encoding is valid")
}

/// Confidences on a 0.01 grid, so uniform rescaling cannot create ties.
pub fn random_confidence<R: Rng>(rng: &mut R) -> f64 {
    rng.random_range(1..=100) as f64 / 100.0
}

pub fn random_detection_set<R: Rng>(rng: &mut R, image_id: &str, h: u32, w: u32, max_instances: usize) -> DetectionSet {
    let n = rng.random_range(0..=max_instances);
    let instances = (0..n)
        .map(|_| Instance::new(random_mask(rng, h, w), random_confidence(rng)).unwrap())
        .collect();
    DetectionSet::new(image_id, w, h, instances).unwrap()
}

pub fn union_pixels(set: &DetectionSet, threshold: f64) -> u64 {
    let n = (set.width() * set.height()) as usize;
    let mut union = vec![false; n];
    for inst in set.instances().iter().filter(|i| i.confidence() >= threshold) {
        for (u, b) in union.iter_mut().zip(decode_counts(inst.mask().counts())) {
            *u |= b;
        }
    }
    union.iter().filter(|&&b| b).count() as u64
}

pub fn oracle_area_fraction(set: &DetectionSet, threshold: f64) -> f64 {
    union_pixels(set, threshold) as f64 / (set.width() as f64 * set.height() as f64)
}

pub fn oracle_iou(a: &RleMask, b: &RleMask) -> f64 {
    let (da, db) = (decode_counts(a.counts()), decode_counts(b.counts()));
    let inter = da.iter().zip(&db).filter(|(x, y)| **x && **y).count();
    let union = da.iter().zip(&db).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// VOC all-points AP by enumerating the ranking: for every recall level
/// j/N, the best precision at any cut-off reaching that recall.
pub fn oracle_ap(dets: &[DetectionSet], anns: &[AnnotationSet], iou_threshold: f64) -> f64 {
    let total: usize = anns.iter().map(|a| a.masks().len()).sum();
    assert!(total > 0);
    let mut ranked: Vec<(f64, &str, usize, &RleMask)> = Vec::new();
    for d in dets {
        for (k, inst) in d.instances().iter().enumerate() {
            ranked.push((inst.confidence(), d.image_id(), k, inst.mask()));
        }
    }
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(b.1)).then(a.2.cmp(&b.2)));
    let mut taken: BTreeMap<&str, Vec<bool>> = anns
        .iter()
        .map(|a| (a.image_id(), vec![false; a.masks().len()]))
        .collect();
    let mut tp_flags = Vec::new();
    for (_, image, _, mask) in &ranked {
        let ann = anns.iter().find(|a| a.image_id() == *image).unwrap();
        let used = taken.get_mut(image).unwrap();
        let mut best: Option<(f64, usize)> = None;
        for (j, m) in ann.masks().iter().enumerate() {
            if used[j] {
                continue;
            }
            let iou = oracle_iou(mask, m);
            if iou >= iou_threshold && best.is_none_or(|(b, _)| iou > b) {
                best = Some((iou, j));
            }
        }
        match best {
            Some((_, j)) => {
                used[j] = true;
                tp_flags.push(true);
            }
            None => tp_flags.push(false),
        }
    }
    let mut points = Vec::new();
    let mut tp = 0usize;
    for (k, &hit) in tp_flags.iter().enumerate() {
        tp += usize::from(hit);
        points.push((tp, tp as f64 / (k + 1) as f64));
    }
    (1..=total)
        .map(|j| {
            let best = points
                .iter()
                .filter(|(hits, _)| *hits >= j)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max);
            best / total as f64
        })
        .sum()
}

pub fn view(point_id: &str, heading: f64, status: ViewStatus, image_id: &str, w: u32, h: u32) -> ViewRecord {
    ViewRecord {
        spec: ViewSpec {
            point_id: point_id.into(),
            location: GeoPoint::new(-23.5, -46.6).unwrap(),
            heading,
        },
        image_id: if status == ViewStatus::Fetched {
            image_id.into()
        } else {
            String::new()
        },
        width: w,
        height: h,
        capture_year: Some(2017),
        provider: Provider::FirstParty,
        status,
    }
}

/// Views of one point with optional detections: every status occurs,
/// and some fetched views have no detection set.
pub fn random_point_views<R: Rng>(
    rng: &mut R,
    point_id: &str,
    max_views: usize,
) -> Vec<(ViewRecord, Option<DetectionSet>)> {
    let k = rng.random_range(1..=max_views);
    (0..k)
        .map(|v| {
            let status = match rng.random_range(0..10) {
                0 => ViewStatus::NoImagery,
                1 => ViewStatus::Failed,
                _ => ViewStatus::Fetched,
            };
            let (h, w) = (rng.random_range(1..7), rng.random_range(1..7));
            let id = format!("{point_id}-{v}");
            let det = (status == ViewStatus::Fetched && rng.random_bool(0.9))
                .then(|| random_detection_set(rng, &id, h, w, 4));
            (view(point_id, v as f64 * 60.0, status, &id, w, h), det)
        })
        .collect()
}

/// Location score recomputed: ordered sum of oracle fractions over usable views.
pub fn oracle_location_score(views: &[(ViewRecord, Option<DetectionSet>)], threshold: f64) -> (f64, usize) {
    let mut g = 0.0;
    let mut k = 0;
    for (rec, det) in views {
        if let (ViewStatus::Fetched, Some(d)) = (rec.status, det) {
            g += oracle_area_fraction(d, threshold);
            k += 1;
        }
    }
    (g, k)
}

/// Regional means recomputed in point_id order.
pub fn oracle_region_means(
    scores: &[LocationScore],
    assignment: &BTreeMap<String, String>,
    min_views: usize,
) -> BTreeMap<String, (f64, usize)> {
    let mut by_point: Vec<&LocationScore> = scores.iter().collect();
    by_point.sort_by(|a, b| a.point_id.cmp(&b.point_id));
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for s in by_point.into_iter().filter(|s| s.k_actual >= min_views) {
        let e = sums.entry(assignment[&s.point_id].clone()).or_insert((0.0, 0));
        e.0 += s.g_value;
        e.1 += 1;
    }
    sums.into_iter().map(|(r, (sum, n))| (r, (sum / n as f64, n))).collect()
}
