//! Instance masks and what is derived from them: the per-view graffiti area
//! fraction, mask IoU, average precision against annotations, and the JSON
//! wire format shared with the segmentation adapter.
//!
//! Masks are run-length encoded in row-major order (row 0 left to right,
//! then row 1, ...). Runs alternate background/foreground and always start
//! with a background run, which may be empty:
//!
//! ```text
//! 2x2, counts [1, 2, 1]  ->  . #
//!                            # .
//! ```

use std::collections::{HashMap, HashSet};

use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

use crate::par;

/// The single label this crate deals in.
pub const GRAFFITI_LABEL: &str = "graffiti";

/// Confidence cut-off applied when none is configured.
pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.5;

/// Only version of the detection wire format understood by this crate.
pub const FORMAT_VERSION: u64 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectionError {
    #[error("malformed RLE: {0}")]
    MalformedRle(String),
    #[error("dimension mismatch: {a_h}x{a_w} vs {b_h}x{b_w}")]
    DimensionMismatch { a_h: u32, a_w: u32, b_h: u32, b_w: u32 },
    #[error("confidence must be finite and within [0, 1], got {0}")]
    InvalidConfidence(f64),
    #[error("IoU threshold must lie in (0, 1], got {0}")]
    InvalidIouThreshold(f64),
    #[error("no annotations for image {0}")]
    MissingAnnotationForImage(String),
    #[error("image {0} appears more than once")]
    DuplicateImage(String),
    #[error("average precision is undefined without annotations")]
    ZeroAnnotations,
    #[error("schema violation at {pointer}: {message}")]
    SchemaViolation { pointer: String, message: String },
}

/// Row-major bit grid, the decoded form of an [`RleMask`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitGrid {
    height: u32,
    width: u32,
    bits: Vec<bool>,
}

impl BitGrid {
    pub fn new(height: u32, width: u32) -> Self {
        BitGrid {
            height,
            width,
            bits: vec![false; height as usize * width as usize],
        }
    }

    pub fn from_bits(height: u32, width: u32, bits: Vec<bool>) -> Option<Self> {
        (bits.len() == height as usize * width as usize).then_some(BitGrid { height, width, bits })
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn get(&self, row: u32, col: u32) -> bool {
        self.bits[row as usize * self.width as usize + col as usize]
    }

    pub fn set(&mut self, row: u32, col: u32, value: bool) {
        self.bits[row as usize * self.width as usize + col as usize] = value;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count_ones(&self) -> u64 {
        self.bits.iter().filter(|&&b| b).count() as u64
    }
}

/// Run-length encoded binary mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RleMask {
    height: u32,
    width: u32,
    counts: Vec<u32>,
}

impl RleMask {
    pub fn new(height: u32, width: u32, counts: Vec<u32>) -> Result<Self, DetectionError> {
        if height == 0 || width == 0 {
            return Err(DetectionError::MalformedRle(format!(
                "empty mask size {height}x{width}"
            )));
        }
        if counts.is_empty() {
            return Err(DetectionError::MalformedRle("no runs".into()));
        }
        if let Some(i) = counts.iter().skip(1).position(|&c| c == 0) {
            return Err(DetectionError::MalformedRle(format!(
                "zero-length run at index {}",
                i + 1
            )));
        }
        let total: u64 = counts.iter().map(|&c| c as u64).sum();
        let expected = height as u64 * width as u64;
        if total != expected {
            return Err(DetectionError::MalformedRle(format!(
                "runs sum to {total}, expected {expected}"
            )));
        }
        Ok(RleMask { height, width, counts })
    }

    /// A mask with no foreground.
    pub fn empty(height: u32, width: u32) -> Result<Self, DetectionError> {
        RleMask::new(height, width, vec![height.saturating_mul(width)])
    }

    pub fn encode(grid: &BitGrid) -> Result<Self, DetectionError> {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for &b in grid.bits() {
            if b != current {
                counts.push(run);
                run = 0;
                current = b;
            }
            run += 1;
        }
        counts.push(run);
        RleMask::new(grid.height, grid.width, counts)
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn pixel_count(&self) -> u64 {
        self.height as u64 * self.width as u64
    }

    /// Foreground pixel count.
    pub fn area(&self) -> u64 {
        self.counts.iter().skip(1).step_by(2).map(|&c| c as u64).sum()
    }

    /// Foreground runs as half-open `[start, end)` pixel-index intervals,
    /// sorted and disjoint.
    pub fn foreground_runs(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        let mut pos = 0u64;
        self.counts.iter().enumerate().filter_map(move |(i, &c)| {
            let start = pos;
            pos += c as u64;
            (i % 2 == 1).then_some((start, pos))
        })
    }

    fn same_size(&self, other: &RleMask) -> Result<(), DetectionError> {
        if self.height != other.height || self.width != other.width {
            return Err(DetectionError::DimensionMismatch {
                a_h: self.height,
                a_w: self.width,
                b_h: other.height,
                b_w: other.width,
            });
        }
        Ok(())
    }
}

/// Expands a mask to its bit grid.
pub fn decode_mask(m: &RleMask) -> BitGrid {
    let mut grid = BitGrid::new(m.height, m.width);
    for (start, end) in m.foreground_runs() {
        for b in &mut grid.bits[start as usize..end as usize] {
            *b = true;
        }
    }
    grid
}

/// A detected graffiti instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    mask: RleMask,
    confidence: f64,
}

impl Instance {
    pub fn new(mask: RleMask, confidence: f64) -> Result<Self, DetectionError> {
        if !(confidence.is_finite() && (0.0..=1.0).contains(&confidence)) {
            return Err(DetectionError::InvalidConfidence(confidence));
        }
        Ok(Instance { mask, confidence })
    }

    pub fn mask(&self) -> &RleMask {
        &self.mask
    }

    pub fn confidence(&self) -> f64 {
        self.confidence
    }

    pub fn label(&self) -> &'static str {
        GRAFFITI_LABEL
    }
}

/// Detector output for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSet {
    image_id: String,
    width: u32,
    height: u32,
    instances: Vec<Instance>,
}

impl DetectionSet {
    pub fn new(
        image_id: impl Into<String>,
        width: u32,
        height: u32,
        instances: Vec<Instance>,
    ) -> Result<Self, DetectionError> {
        for inst in &instances {
            check_mask_size(inst.mask(), height, width)?;
        }
        Ok(DetectionSet {
            image_id: image_id.into(),
            width,
            height,
            instances,
        })
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    /// Copy with every confidence multiplied by `factor` (clamped to 1).
    pub fn with_scaled_confidences(&self, factor: f64) -> Result<Self, DetectionError> {
        let instances = self
            .instances
            .iter()
            .map(|i| Instance::new(i.mask.clone(), (i.confidence * factor).min(1.0)))
            .collect::<Result<_, _>>()?;
        DetectionSet::new(self.image_id.clone(), self.width, self.height, instances)
    }
}

/// Ground truth for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationSet {
    image_id: String,
    width: u32,
    height: u32,
    masks: Vec<RleMask>,
}

impl AnnotationSet {
    pub fn new(
        image_id: impl Into<String>,
        width: u32,
        height: u32,
        masks: Vec<RleMask>,
    ) -> Result<Self, DetectionError> {
        for m in &masks {
            check_mask_size(m, height, width)?;
        }
        Ok(AnnotationSet {
            image_id: image_id.into(),
            width,
            height,
            masks,
        })
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn masks(&self) -> &[RleMask] {
        &self.masks
    }
}

fn check_mask_size(m: &RleMask, height: u32, width: u32) -> Result<(), DetectionError> {
    if m.height != height || m.width != width {
        return Err(DetectionError::DimensionMismatch {
            a_h: m.height,
            a_w: m.width,
            b_h: height,
            b_w: width,
        });
    }
    Ok(())
}

/// Merged length of sorted-per-source half-open intervals.
fn union_length(mut runs: Vec<(u64, u64)>) -> u64 {
    runs.sort_unstable();
    let mut total = 0;
    let mut current: Option<(u64, u64)> = None;
    for (s, e) in runs {
        match current {
            Some((cs, ce)) if s <= ce => current = Some((cs, ce.max(e))),
            Some((cs, ce)) => {
                total += ce - cs;
                current = Some((s, e));
            }
            None => current = Some((s, e)),
        }
    }
    if let Some((cs, ce)) = current {
        total += ce - cs;
    }
    total
}

/// Pixels covered by at least one instance with confidence at or above the
/// threshold.
pub fn covered_pixels(d: &DetectionSet, confidence_threshold: f64) -> u64 {
    let runs: Vec<(u64, u64)> = d
        .instances
        .iter()
        .filter(|i| i.confidence >= confidence_threshold)
        .flat_map(|i| i.mask.foreground_runs())
        .collect();
    union_length(runs)
}

/// Fraction of the image covered by the union of all instances whose
/// confidence is at or above the threshold. Overlaps count once.
pub fn area_fraction(d: &DetectionSet, confidence_threshold: f64) -> f64 {
    let total = d.width as u64 * d.height as u64;
    if total == 0 {
        return 0.0;
    }
    covered_pixels(d, confidence_threshold) as f64 / total as f64
}

/// Intersection over union of two masks; 0 when both are empty.
pub fn mask_iou(a: &RleMask, b: &RleMask) -> Result<f64, DetectionError> {
    a.same_size(b)?;
    let ra: Vec<(u64, u64)> = a.foreground_runs().collect();
    let rb: Vec<(u64, u64)> = b.foreground_runs().collect();
    let (mut i, mut j) = (0, 0);
    let mut inter = 0u64;
    while i < ra.len() && j < rb.len() {
        let lo = ra[i].0.max(rb[j].0);
        let hi = ra[i].1.min(rb[j].1);
        if hi > lo {
            inter += hi - lo;
        }
        if ra[i].1 < rb[j].1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    let union = a.area() + b.area() - inter;
    if union == 0 {
        return Ok(0.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Average precision of `dets` against `anns` (Pascal VOC, all-points
/// interpolation, mask IoU).
///
/// Detections from every image are pooled and ranked by confidence
/// (descending; ties by image id, then instance index). Each is greedily
/// matched to the unmatched annotation of its image with the highest IoU,
/// provided that IoU reaches `iou_threshold`. Recall is measured against
/// all annotations, including those in images that have no detections.
pub fn average_precision(
    dets: &[DetectionSet],
    anns: &[AnnotationSet],
    iou_threshold: f64,
) -> Result<f64, DetectionError> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(DetectionError::InvalidIouThreshold(iou_threshold));
    }
    let mut ann_by_image: HashMap<&str, &AnnotationSet> = HashMap::new();
    for a in anns {
        if ann_by_image.insert(a.image_id(), a).is_some() {
            return Err(DetectionError::DuplicateImage(a.image_id.clone()));
        }
    }
    let mut seen = HashSet::new();
    let mut paired = Vec::with_capacity(dets.len());
    for d in dets {
        if !seen.insert(d.image_id()) {
            return Err(DetectionError::DuplicateImage(d.image_id.clone()));
        }
        let a = ann_by_image
            .get(d.image_id())
            .ok_or_else(|| DetectionError::MissingAnnotationForImage(d.image_id.clone()))?;
        if a.width != d.width || a.height != d.height {
            return Err(DetectionError::DimensionMismatch {
                a_h: d.height,
                a_w: d.width,
                b_h: a.height,
                b_w: a.width,
            });
        }
        paired.push((d, *a));
    }
    let total_annotations: usize = anns.iter().map(|a| a.masks.len()).sum();
    if total_annotations == 0 {
        return Err(DetectionError::ZeroAnnotations);
    }

    // ious[image][det][ann]
    let ious: Vec<Vec<Vec<f64>>> = par::map(&paired, |(d, a)| {
        d.instances
            .iter()
            .map(|inst| {
                a.masks
                    .iter()
                    .map(|m| mask_iou(inst.mask(), m).unwrap_or(0.0))
                    .collect()
            })
            .collect()
    });

    let mut ranking: Vec<(usize, usize)> = paired
        .iter()
        .enumerate()
        .flat_map(|(img, (d, _))| (0..d.instances.len()).map(move |k| (img, k)))
        .collect();
    ranking.sort_by(|&(ia, ka), &(ib, kb)| {
        let ca = paired[ia].0.instances[ka].confidence;
        let cb = paired[ib].0.instances[kb].confidence;
        cb.total_cmp(&ca)
            .then_with(|| paired[ia].0.image_id.cmp(&paired[ib].0.image_id))
            .then_with(|| ka.cmp(&kb))
    });

    let mut matched: Vec<Vec<bool>> = paired.iter().map(|(_, a)| vec![false; a.masks.len()]).collect();
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(ranking.len());
    let mut recall = Vec::with_capacity(ranking.len());
    for (rank, &(img, k)) in ranking.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (g, &iou) in ious[img][k].iter().enumerate() {
            if matched[img][g] || iou < iou_threshold {
                continue;
            }
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            matched[img][g] = true;
            tp += 1;
        }
        precision.push(tp as f64 / (rank + 1) as f64);
        recall.push(tp as f64 / total_annotations as f64);
    }

    // Precision envelope, then area under the step curve.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        if *r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = *r;
        }
    }
    Ok(ap)
}

#[derive(Serialize)]
struct WireDoc<I> {
    format_version: u64,
    images: Vec<WireImage<I>>,
}

#[derive(Serialize)]
struct WireImage<I> {
    image_id: String,
    width: u32,
    height: u32,
    instances: Vec<I>,
}

#[derive(Serialize)]
struct WireDetection<'a> {
    label: &'static str,
    confidence: f64,
    rle: WireRle<'a>,
}

#[derive(Serialize)]
struct WireAnnotation<'a> {
    label: &'static str,
    rle: WireRle<'a>,
}

#[derive(Serialize)]
struct WireRle<'a> {
    size: [u32; 2],
    counts: &'a [u32],
}

impl<'a> From<&'a RleMask> for WireRle<'a> {
    fn from(m: &'a RleMask) -> Self {
        WireRle {
            size: [m.height, m.width],
            counts: &m.counts,
        }
    }
}

fn finish(doc: &impl Serialize) -> Vec<u8> {
    let mut out = serde_json::to_vec(doc).expect("wire document serializes");
    out.push(b'\n');
    out
}

/// Serializes detections to the version-1 wire format.
pub fn emit_detection_file(sets: &[DetectionSet]) -> Vec<u8> {
    let doc = WireDoc {
        format_version: FORMAT_VERSION,
        images: sets
            .iter()
            .map(|d| WireImage {
                image_id: d.image_id.clone(),
                width: d.width,
                height: d.height,
                instances: d
                    .instances
                    .iter()
                    .map(|i| WireDetection {
                        label: GRAFFITI_LABEL,
                        confidence: i.confidence,
                        rle: (&i.mask).into(),
                    })
                    .collect(),
            })
            .collect(),
    };
    finish(&doc)
}

/// Serializes annotations to the version-1 wire format (no confidences).
pub fn emit_annotation_file(sets: &[AnnotationSet]) -> Vec<u8> {
    let doc = WireDoc {
        format_version: FORMAT_VERSION,
        images: sets
            .iter()
            .map(|a| WireImage {
                image_id: a.image_id.clone(),
                width: a.width,
                height: a.height,
                instances: a
                    .masks
                    .iter()
                    .map(|m| WireAnnotation {
                        label: GRAFFITI_LABEL,
                        rle: m.into(),
                    })
                    .collect(),
            })
            .collect(),
    };
    finish(&doc)
}

fn violation(pointer: impl Into<String>, message: impl Into<String>) -> DetectionError {
    DetectionError::SchemaViolation {
        pointer: pointer.into(),
        message: message.into(),
    }
}

fn field<'v>(obj: &'v Value, ptr: &str, key: &str) -> Result<&'v Value, DetectionError> {
    obj.get(key)
        .ok_or_else(|| violation(format!("{ptr}/{key}"), "missing field"))
}

fn as_u32(v: &Value, ptr: &str) -> Result<u32, DetectionError> {
    v.as_u64()
        .and_then(|n| u32::try_from(n).ok())
        .ok_or_else(|| violation(ptr, "expected a non-negative 32-bit integer"))
}

struct RawImage {
    image_id: String,
    width: u32,
    height: u32,
    instances: Vec<(RleMask, Option<f64>)>,
}

fn parse_images(bytes: &[u8], with_confidence: bool) -> Result<Vec<RawImage>, DetectionError> {
    let doc: Value = serde_json::from_slice(bytes).map_err(|e| violation("", format!("invalid JSON: {e}")))?;
    if !doc.is_object() {
        return Err(violation("", "expected an object"));
    }
    let version = field(&doc, "", "format_version")?;
    if version.as_u64() != Some(FORMAT_VERSION) {
        return Err(violation(
            "/format_version",
            format!("unsupported format_version {version}"),
        ));
    }
    let images = field(&doc, "", "images")?
        .as_array()
        .ok_or_else(|| violation("/images", "expected an array"))?;

    let mut out = Vec::with_capacity(images.len());
    let mut seen = HashSet::new();
    for (i, img) in images.iter().enumerate() {
        let ip = format!("/images/{i}");
        let image_id = field(img, &ip, "image_id")?
            .as_str()
            .filter(|s| !s.is_empty())
            .ok_or_else(|| violation(format!("{ip}/image_id"), "expected a non-empty string"))?
            .to_string();
        if !seen.insert(image_id.clone()) {
            return Err(violation(
                format!("{ip}/image_id"),
                format!("duplicate image_id {image_id}"),
            ));
        }
        let width = as_u32(field(img, &ip, "width")?, &format!("{ip}/width"))?;
        let height = as_u32(field(img, &ip, "height")?, &format!("{ip}/height"))?;
        if width == 0 || height == 0 {
            return Err(violation(&ip, "image dimensions must be positive"));
        }
        let instances = field(img, &ip, "instances")?
            .as_array()
            .ok_or_else(|| violation(format!("{ip}/instances"), "expected an array"))?;
        let mut parsed = Vec::with_capacity(instances.len());
        for (k, inst) in instances.iter().enumerate() {
            let kp = format!("{ip}/instances/{k}");
            match field(inst, &kp, "label")?.as_str() {
                Some(GRAFFITI_LABEL) => {}
                _ => return Err(violation(format!("{kp}/label"), "label must be \"graffiti\"")),
            }
            let confidence = match (with_confidence, inst.get("confidence")) {
                (true, Some(c)) => {
                    let c = c
                        .as_f64()
                        .filter(|c| (0.0..=1.0).contains(c))
                        .ok_or_else(|| violation(format!("{kp}/confidence"), "expected a number in [0, 1]"))?;
                    Some(c)
                }
                (true, None) => return Err(violation(format!("{kp}/confidence"), "missing field")),
                (false, Some(_)) => {
                    return Err(violation(format!("{kp}/confidence"), "annotations carry no confidence"))
                }
                (false, None) => None,
            };
            let rp = format!("{kp}/rle");
            let rle = field(inst, &kp, "rle")?;
            let size = field(rle, &rp, "size")?
                .as_array()
                .filter(|s| s.len() == 2)
                .ok_or_else(|| violation(format!("{rp}/size"), "expected [height, width]"))?;
            let mh = as_u32(&size[0], &format!("{rp}/size/0"))?;
            let mw = as_u32(&size[1], &format!("{rp}/size/1"))?;
            if mh != height || mw != width {
                return Err(violation(
                    format!("{rp}/size"),
                    format!("mask is {mh}x{mw} but image is {height}x{width}"),
                ));
            }
            let counts = field(rle, &rp, "counts")?
                .as_array()
                .ok_or_else(|| violation(format!("{rp}/counts"), "expected an array"))?
                .iter()
                .enumerate()
                .map(|(j, c)| as_u32(c, &format!("{rp}/counts/{j}")))
                .collect::<Result<Vec<_>, _>>()?;
            let mask = RleMask::new(mh, mw, counts).map_err(|e| violation(format!("{rp}/counts"), e.to_string()))?;
            parsed.push((mask, confidence));
        }
        out.push(RawImage {
            image_id,
            width,
            height,
            instances: parsed,
        });
    }
    Ok(out)
}

/// Parses a version-1 detection document.
pub fn parse_detection_file(bytes: &[u8]) -> Result<Vec<DetectionSet>, DetectionError> {
    parse_images(bytes, true)?
        .into_iter()
        .map(|img| {
            let instances = img
                .instances
                .into_iter()
                .map(|(m, c)| Instance::new(m, c.unwrap_or_default()))
                .collect::<Result<_, _>>()?;
            DetectionSet::new(img.image_id, img.width, img.height, instances)
        })
        .collect()
}

/// Parses a version-1 annotation document (instances without confidence).
pub fn parse_annotation_file(bytes: &[u8]) -> Result<Vec<AnnotationSet>, DetectionError> {
    parse_images(bytes, false)?
        .into_iter()
        .map(|img| {
            let masks = img.instances.into_iter().map(|(m, _)| m).collect();
            AnnotationSet::new(img.image_id, img.width, img.height, masks)
        })
        .collect()
}
