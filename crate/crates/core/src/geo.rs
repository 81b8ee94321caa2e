//! Coordinates, a local equirectangular projection, region polygons and the
//! two sampling schemes (systematic grid and seeded random) that produce
//! sample locations over a region.
//!
//! All metric computations happen in the region's local projection, centred
//! on the centre of the region's bounding box. At city scale (< 100 km) the
//! distortion of this projection stays well below 0.1%.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::par;

/// Length of one degree of latitude in the local projection.
pub const METERS_PER_DEG_LAT: f64 = 111_320.0;

/// Points closer than this to a polygon edge count as on the boundary.
const BOUNDARY_TOLERANCE_M: f64 = 1e-6;

/// Guards `floor(extent / spacing)` against round-off in projected extents.
const GRID_COUNT_SLACK: f64 = 1e-9;

const REJECTION_BUDGET: u64 = 1_000_000;
const MIN_ACCEPTANCE_RATIO: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum GeoError {
    #[error("coordinate out of range or not finite: lat={lat}, lon={lon}")]
    InvalidCoordinate { lat: f64, lon: f64 },
    #[error("projection origin latitude {0} is within one degree of a pole")]
    PoleProximity(f64),
    #[error("region {id}: {reason}")]
    InvalidPolygon { id: String, reason: String },
    #[error("spacing must be positive and finite, got {0}")]
    InvalidSpacing(f64),
    #[error("no sample point falls inside region {0}")]
    EmptySample(String),
    #[error("sample size must be at least 1")]
    ZeroSampleSize,
    #[error("rejection budget exceeded for region {id}: {accepted} accepted out of {draws} draws")]
    RejectionBudgetExceeded { id: String, accepted: usize, draws: u64 },
    #[error("GeoJSON: {0}")]
    GeoJson(String),
    #[error("sample CSV: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A WGS84 coordinate in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPoint", into = "RawPoint")]
pub struct GeoPoint {
    lat: f64,
    lon: f64,
}

#[derive(Serialize, Deserialize)]
struct RawPoint {
    lat: f64,
    lon: f64,
}

impl TryFrom<RawPoint> for GeoPoint {
    type Error = GeoError;
    fn try_from(raw: RawPoint) -> Result<Self, GeoError> {
        GeoPoint::new(raw.lat, raw.lon)
    }
}

impl From<GeoPoint> for RawPoint {
    fn from(p: GeoPoint) -> Self {
        RawPoint { lat: p.lat, lon: p.lon }
    }
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        let ok = lat.is_finite() && lon.is_finite() && (-90.0..=90.0).contains(&lat) && (-180.0..=180.0).contains(&lon);
        if ok {
            Ok(GeoPoint { lat, lon })
        } else {
            Err(GeoError::InvalidCoordinate { lat, lon })
        }
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }
}

/// Planar coordinates in meters relative to a projection origin
/// (x east, y north).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Xy {
    pub x: f64,
    pub y: f64,
}

impl Xy {
    pub fn new(x: f64, y: f64) -> Self {
        Xy { x, y }
    }

    pub fn dist(&self, other: &Xy) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Equirectangular projection around an origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalProjection {
    origin: GeoPoint,
    meters_per_deg_lat: f64,
    meters_per_deg_lon: f64,
}

/// Builds the local projection centred on `origin`.
pub fn make_projection(origin: GeoPoint) -> Result<LocalProjection, GeoError> {
    if origin.lat.abs() >= 89.0 {
        return Err(GeoError::PoleProximity(origin.lat));
    }
    Ok(LocalProjection {
        origin,
        meters_per_deg_lat: METERS_PER_DEG_LAT,
        meters_per_deg_lon: METERS_PER_DEG_LAT * origin.lat.to_radians().cos(),
    })
}

impl LocalProjection {
    pub fn origin(&self) -> GeoPoint {
        self.origin
    }

    pub fn meters_per_deg_lat(&self) -> f64 {
        self.meters_per_deg_lat
    }

    pub fn meters_per_deg_lon(&self) -> f64 {
        self.meters_per_deg_lon
    }

    pub fn to_xy(&self, p: GeoPoint) -> Xy {
        Xy {
            x: (p.lon - self.origin.lon) * self.meters_per_deg_lon,
            y: (p.lat - self.origin.lat) * self.meters_per_deg_lat,
        }
    }

    pub fn from_xy(&self, xy: Xy) -> Result<GeoPoint, GeoError> {
        GeoPoint::new(
            self.origin.lat + xy.y / self.meters_per_deg_lat,
            self.origin.lon + xy.x / self.meters_per_deg_lon,
        )
    }
}

/// A region boundary: one exterior ring and zero or more holes.
///
/// Rings are stored open (the closing vertex is implicit). The constructor
/// drops an explicit closing vertex and rejects degenerate or
/// self-intersecting rings, so every `RegionPolygon` is valid.
#[derive(Debug, Clone)]
pub struct RegionPolygon {
    id: String,
    exterior: Vec<GeoPoint>,
    holes: Vec<Vec<GeoPoint>>,
    projection: LocalProjection,
    exterior_xy: Vec<Xy>,
    holes_xy: Vec<Vec<Xy>>,
    min_xy: Xy,
    max_xy: Xy,
}

impl RegionPolygon {
    pub fn new(id: impl Into<String>, exterior: Vec<GeoPoint>, holes: Vec<Vec<GeoPoint>>) -> Result<Self, GeoError> {
        let id = id.into();
        let invalid = |reason: String| GeoError::InvalidPolygon { id: id.clone(), reason };
        let exterior = open_ring(exterior);
        if exterior.len() < 3 {
            return Err(invalid("exterior ring needs at least 3 vertices".into()));
        }
        let holes: Vec<Vec<GeoPoint>> = holes.into_iter().map(open_ring).collect();
        if holes.iter().any(|h| h.len() < 3) {
            return Err(invalid("hole ring needs at least 3 vertices".into()));
        }

        let (mut lat0, mut lat1) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut lon0, mut lon1) = (f64::INFINITY, f64::NEG_INFINITY);
        for p in &exterior {
            lat0 = lat0.min(p.lat);
            lat1 = lat1.max(p.lat);
            lon0 = lon0.min(p.lon);
            lon1 = lon1.max(p.lon);
        }
        let origin = GeoPoint::new(0.5 * (lat0 + lat1), 0.5 * (lon0 + lon1))?;
        let projection = make_projection(origin)?;

        let exterior_xy: Vec<Xy> = exterior.iter().map(|&p| projection.to_xy(p)).collect();
        let holes_xy: Vec<Vec<Xy>> = holes
            .iter()
            .map(|h| h.iter().map(|&p| projection.to_xy(p)).collect())
            .collect();

        if signed_area(&exterior_xy).abs() <= f64::EPSILON {
            return Err(invalid("exterior ring has zero area".into()));
        }
        if let Some((i, j)) = self_intersection(&exterior_xy) {
            return Err(invalid(format!("exterior ring self-intersects at edges {i} and {j}")));
        }
        for (k, h) in holes_xy.iter().enumerate() {
            if signed_area(h).abs() <= f64::EPSILON {
                return Err(invalid(format!("hole {k} has zero area")));
            }
        }

        let min_xy = projection.to_xy(GeoPoint { lat: lat0, lon: lon0 });
        let max_xy = projection.to_xy(GeoPoint { lat: lat1, lon: lon1 });
        Ok(RegionPolygon {
            id,
            exterior,
            holes,
            projection,
            exterior_xy,
            holes_xy,
            min_xy,
            max_xy,
        })
    }

    /// Axis-aligned rectangle of `width_m` × `height_m` centred on `center`.
    pub fn rectangle(id: impl Into<String>, center: GeoPoint, width_m: f64, height_m: f64) -> Result<Self, GeoError> {
        let proj = make_projection(center)?;
        let (hw, hh) = (0.5 * width_m, 0.5 * height_m);
        let corners = [(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)]
            .iter()
            .map(|&(x, y)| proj.from_xy(Xy::new(x, y)))
            .collect::<Result<Vec<_>, _>>()?;
        RegionPolygon::new(id, corners, Vec::new())
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn exterior(&self) -> &[GeoPoint] {
        &self.exterior
    }

    pub fn holes(&self) -> &[Vec<GeoPoint>] {
        &self.holes
    }

    /// The region's own projection (origin at the bounding-box centre).
    pub fn projection(&self) -> &LocalProjection {
        &self.projection
    }

    /// Bounding box corners in the region's projection.
    pub fn bbox_xy(&self) -> (Xy, Xy) {
        (self.min_xy, self.max_xy)
    }

    /// Area in square meters (exterior minus holes).
    pub fn area_m2(&self) -> f64 {
        signed_area(&self.exterior_xy).abs() - self.holes_xy.iter().map(|h| signed_area(h).abs()).sum::<f64>()
    }

    pub fn contains(&self, p: GeoPoint) -> bool {
        self.contains_xy(self.projection.to_xy(p))
    }

    /// Point-in-polygon in the region's own projected coordinates.
    pub fn contains_xy(&self, q: Xy) -> bool {
        if q.x < self.min_xy.x - BOUNDARY_TOLERANCE_M
            || q.x > self.max_xy.x + BOUNDARY_TOLERANCE_M
            || q.y < self.min_xy.y - BOUNDARY_TOLERANCE_M
            || q.y > self.max_xy.y + BOUNDARY_TOLERANCE_M
        {
            return false;
        }
        if on_ring_boundary(&self.exterior_xy, q) {
            return true;
        }
        if !ray_cast(&self.exterior_xy, q) {
            return false;
        }
        for hole in &self.holes_xy {
            if on_ring_boundary(hole, q) {
                return true;
            }
            if ray_cast(hole, q) {
                return false;
            }
        }
        true
    }

    /// GeoJSON `coordinates` of this polygon (rings closed, `[lon, lat]`).
    pub fn geojson_coordinates(&self) -> Value {
        let ring = |r: &[GeoPoint]| -> Value {
            let mut pts: Vec<Value> = r.iter().map(|p| json!([p.lon, p.lat])).collect();
            pts.push(json!([r[0].lon, r[0].lat]));
            Value::Array(pts)
        };
        let mut rings = vec![ring(&self.exterior)];
        rings.extend(self.holes.iter().map(|h| ring(h)));
        Value::Array(rings)
    }
}

/// True iff `p` is inside `poly` (boundary counts as inside).
pub fn point_in_polygon(p: GeoPoint, poly: &RegionPolygon) -> bool {
    poly.contains(p)
}

fn open_ring(mut ring: Vec<GeoPoint>) -> Vec<GeoPoint> {
    while ring.len() > 1 && ring.first() == ring.last() {
        ring.pop();
    }
    ring
}

fn signed_area(ring: &[Xy]) -> f64 {
    let n = ring.len();
    let mut acc = 0.0;
    for i in 0..n {
        let a = ring[i];
        let b = ring[(i + 1) % n];
        acc += a.x * b.y - b.x * a.y;
    }
    0.5 * acc
}

fn cross(o: Xy, a: Xy, b: Xy) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

fn on_segment(a: Xy, b: Xy, q: Xy) -> bool {
    let len = a.dist(&b);
    if len == 0.0 {
        return a.dist(&q) <= BOUNDARY_TOLERANCE_M;
    }
    if (cross(a, b, q) / len).abs() > BOUNDARY_TOLERANCE_M {
        return false;
    }
    let t = ((q.x - a.x) * (b.x - a.x) + (q.y - a.y) * (b.y - a.y)) / (len * len);
    let slack = BOUNDARY_TOLERANCE_M / len;
    (-slack..=1.0 + slack).contains(&t)
}

fn on_ring_boundary(ring: &[Xy], q: Xy) -> bool {
    let n = ring.len();
    (0..n).any(|i| on_segment(ring[i], ring[(i + 1) % n], q))
}

/// Even-odd crossing test with a ray towards +x.
fn ray_cast(ring: &[Xy], q: Xy) -> bool {
    let n = ring.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (ring[i], ring[j]);
        if (a.y > q.y) != (b.y > q.y) {
            let x_cross = a.x + (q.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if q.x < x_cross {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

fn segments_intersect(p1: Xy, p2: Xy, p3: Xy, p4: Xy) -> bool {
    let d1 = cross(p3, p4, p1);
    let d2 = cross(p3, p4, p2);
    let d3 = cross(p1, p2, p3);
    let d4 = cross(p1, p2, p4);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    let within =
        |a: Xy, b: Xy, c: Xy| c.x >= a.x.min(b.x) && c.x <= a.x.max(b.x) && c.y >= a.y.min(b.y) && c.y <= a.y.max(b.y);
    (d1 == 0.0 && within(p3, p4, p1))
        || (d2 == 0.0 && within(p3, p4, p2))
        || (d3 == 0.0 && within(p1, p2, p3))
        || (d4 == 0.0 && within(p1, p2, p4))
}

/// First pair of non-adjacent intersecting edges, if any.
fn self_intersection(ring: &[Xy]) -> Option<(usize, usize)> {
    let n = ring.len();
    for i in 0..n {
        let (a, b) = (ring[i], ring[(i + 1) % n]);
        for j in (i + 1)..n {
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            let (c, d) = (ring[j], ring[(j + 1) % n]);
            if adjacent {
                // Adjacent edges may only share their common vertex.
                let shared = if j == i + 1 { b } else { a };
                let (other_a, other_c) = if j == i + 1 { (a, d) } else { (b, c) };
                if cross(shared, other_a, other_c) == 0.0
                    && (other_a.x - shared.x) * (other_c.x - shared.x) + (other_a.y - shared.y) * (other_c.y - shared.y)
                        > 0.0
                {
                    return Some((i, j));
                }
                continue;
            }
            if segments_intersect(a, b, c, d) {
                return Some((i, j));
            }
        }
    }
    None
}

/// How a sample was drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum SamplingScheme {
    Systematic { spacing_m: f64 },
    Random { n: usize, seed: u64 },
}

/// Ordered sample locations over one region.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub scheme: SamplingScheme,
    pub region_id: String,
    pub points: Vec<GeoPoint>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn id_width(&self) -> usize {
        let digits = self.points.len().saturating_sub(1).to_string().len();
        digits.max(6)
    }

    /// Zero-padded row-major index of the `i`-th point.
    pub fn point_id(&self, i: usize) -> String {
        format!("{:0width$}", i, width = self.id_width())
    }

    /// `(point_id, point)` pairs in sample order.
    pub fn entries(&self) -> impl Iterator<Item = (String, GeoPoint)> + '_ {
        self.points.iter().enumerate().map(|(i, &p)| (self.point_id(i), p))
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), GeoError> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| GeoError::Csv(e.to_string());
        w.write_record(["point_id", "lat", "lon"]).map_err(csv_err)?;
        for (id, p) in self.entries() {
            w.write_record([id, p.lat.to_string(), p.lon.to_string()])
                .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a `point_id,lat,lon` CSV. Point ids must be the row-major
    /// indices that [`SampleSet::point_id`] would produce.
    pub fn read_csv<R: Read>(input: R, scheme: SamplingScheme, region_id: impl Into<String>) -> Result<Self, GeoError> {
        let mut r = csv::Reader::from_reader(input);
        let headers = r.headers().map_err(|e| GeoError::Csv(e.to_string()))?;
        if headers.iter().collect::<Vec<_>>() != ["point_id", "lat", "lon"] {
            return Err(GeoError::Csv("expected header point_id,lat,lon".into()));
        }
        let mut ids = Vec::new();
        let mut points = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| GeoError::Csv(e.to_string()))?;
            let num = |k: usize| -> Result<f64, GeoError> {
                rec[k]
                    .parse()
                    .map_err(|_| GeoError::Csv(format!("row {}: bad number {:?}", line + 1, &rec[k])))
            };
            points.push(GeoPoint::new(num(1)?, num(2)?)?);
            ids.push(rec[0].to_string());
        }
        let set = SampleSet {
            scheme,
            region_id: region_id.into(),
            points,
        };
        for (i, id) in ids.iter().enumerate() {
            if *id != set.point_id(i) {
                return Err(GeoError::Csv(format!(
                    "row {}: point_id {id:?} is not the row-major index {}",
                    i + 1,
                    set.point_id(i)
                )));
            }
        }
        Ok(set)
    }

    /// FeatureCollection of Points with a `point_id` property.
    pub fn to_geojson(&self) -> Value {
        let features: Vec<Value> = self
            .entries()
            .map(|(id, p)| {
                json!({
                    "type": "Feature",
                    "geometry": {"type": "Point", "coordinates": [p.lon, p.lat]},
                    "properties": {"point_id": id},
                })
            })
            .collect();
        json!({"type": "FeatureCollection", "features": features})
    }
}

/// Regular grid in the region's projection, anchored at the bounding-box
/// minimum corner with both boundary rows and columns included. Points are
/// ordered row-major, south to north then west to east.
pub fn systematic_grid(region: &RegionPolygon, spacing_m: f64) -> Result<SampleSet, GeoError> {
    if !(spacing_m.is_finite() && spacing_m > 0.0) {
        return Err(GeoError::InvalidSpacing(spacing_m));
    }
    let (lo, hi) = region.bbox_xy();
    let nx = ((hi.x - lo.x) / spacing_m + GRID_COUNT_SLACK).floor() as usize + 1;
    let ny = ((hi.y - lo.y) / spacing_m + GRID_COUNT_SLACK).floor() as usize + 1;
    let proj = region.projection();

    let rows = par::map_range(ny, |j| {
        let y = lo.y + j as f64 * spacing_m;
        let mut row = Vec::new();
        for i in 0..nx {
            let xy = Xy::new(lo.x + i as f64 * spacing_m, y);
            if let Ok(p) = proj.from_xy(xy) {
                if region.contains(p) {
                    row.push(p);
                }
            }
        }
        row
    });
    let points: Vec<GeoPoint> = rows.into_iter().flatten().collect();
    if points.is_empty() {
        return Err(GeoError::EmptySample(region.id.clone()));
    }
    Ok(SampleSet {
        scheme: SamplingScheme::Systematic { spacing_m },
        region_id: region.id.clone(),
        points,
    })
}

/// `n` points drawn uniformly over the region by rejection sampling on its
/// projected bounding box. The generator is ChaCha8 seeded with `seed`, so
/// equal seeds give bit-identical samples on every platform.
pub fn random_sample(region: &RegionPolygon, n: usize, seed: u64) -> Result<SampleSet, GeoError> {
    if n == 0 {
        return Err(GeoError::ZeroSampleSize);
    }
    let (lo, hi) = region.bbox_xy();
    let (w, h) = (hi.x - lo.x, hi.y - lo.y);
    let proj = region.projection();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    let mut draws: u64 = 0;
    let mut rejections: u64 = 0;
    while points.len() < n {
        draws += 1;
        let u: f64 = rng.random();
        let v: f64 = rng.random();
        let xy = Xy::new(lo.x + u * w, lo.y + v * h);
        match proj.from_xy(xy) {
            Ok(p) if region.contains(p) => points.push(p),
            _ => {
                rejections += 1;
                if rejections >= REJECTION_BUDGET && (points.len() as f64) < MIN_ACCEPTANCE_RATIO * draws as f64 {
                    return Err(GeoError::RejectionBudgetExceeded {
                        id: region.id.clone(),
                        accepted: points.len(),
                        draws,
                    });
                }
            }
        }
    }
    Ok(SampleSet {
        scheme: SamplingScheme::Random { n, seed },
        region_id: region.id.clone(),
        points,
    })
}

/// Monte Carlo estimate of the fill distance: the largest distance (meters)
/// from any of `probe_n` random interior probes to its nearest sample point.
/// Probes are `random_sample(region, probe_n, seed)`.
pub fn coverage_radius(sample: &SampleSet, region: &RegionPolygon, probe_n: usize, seed: u64) -> Result<f64, GeoError> {
    if sample.is_empty() {
        return Err(GeoError::EmptySample(region.id.clone()));
    }
    let proj = region.projection();
    let sites: Vec<Xy> = sample.points.iter().map(|&p| proj.to_xy(p)).collect();
    let probes = random_sample(region, probe_n, seed)?;
    let nearest = par::map(&probes.points, |&p| {
        let q = proj.to_xy(p);
        sites.iter().map(|s| s.dist(&q)).fold(f64::INFINITY, f64::min)
    });
    Ok(nearest.into_iter().fold(0.0, f64::max))
}

/// Parses regions from GeoJSON text: a FeatureCollection, a Feature, or a
/// bare Polygon/MultiPolygon geometry. Region ids come from the feature's
/// `id` property, falling back to the feature index. Every part of a
/// MultiPolygon becomes its own `RegionPolygon` sharing the feature's id.
pub fn load_regions(text: &str) -> Result<Vec<RegionPolygon>, GeoError> {
    let doc: Value = serde_json::from_str(text).map_err(|e| GeoError::GeoJson(e.to_string()))?;
    let mut out = Vec::new();
    match doc.get("type").and_then(Value::as_str) {
        Some("FeatureCollection") => {
            let features = doc
                .get("features")
                .and_then(Value::as_array)
                .ok_or_else(|| GeoError::GeoJson("FeatureCollection without features".into()))?;
            for (i, f) in features.iter().enumerate() {
                push_feature(f, i, &mut out)?;
            }
        }
        Some("Feature") => push_feature(&doc, 0, &mut out)?,
        Some("Polygon") | Some("MultiPolygon") => push_geometry(&doc, "0", &mut out)?,
        other => return Err(GeoError::GeoJson(format!("unsupported GeoJSON type {other:?}"))),
    }
    if out.is_empty() {
        return Err(GeoError::GeoJson("no polygons found".into()));
    }
    Ok(out)
}

fn push_feature(f: &Value, index: usize, out: &mut Vec<RegionPolygon>) -> Result<(), GeoError> {
    let id = match f.get("properties").and_then(|p| p.get("id")) {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        _ => index.to_string(),
    };
    match f.get("geometry") {
        Some(g) if !g.is_null() => push_geometry(g, &id, out),
        _ => Ok(()),
    }
}

fn push_geometry(g: &Value, id: &str, out: &mut Vec<RegionPolygon>) -> Result<(), GeoError> {
    let coords = g
        .get("coordinates")
        .ok_or_else(|| GeoError::GeoJson(format!("feature {id}: geometry without coordinates")))?;
    match g.get("type").and_then(Value::as_str) {
        Some("Polygon") => out.push(polygon_from_coords(coords, id)?),
        Some("MultiPolygon") => {
            let parts = coords
                .as_array()
                .ok_or_else(|| GeoError::GeoJson(format!("feature {id}: bad MultiPolygon")))?;
            for part in parts {
                out.push(polygon_from_coords(part, id)?);
            }
        }
        _ => {}
    }
    Ok(())
}

fn polygon_from_coords(coords: &Value, id: &str) -> Result<RegionPolygon, GeoError> {
    let bad = || GeoError::GeoJson(format!("feature {id}: malformed polygon coordinates"));
    let rings = coords.as_array().ok_or_else(bad)?;
    let mut parsed = Vec::with_capacity(rings.len());
    for ring in rings {
        let mut pts = Vec::new();
        for pos in ring.as_array().ok_or_else(bad)? {
            let pos = pos.as_array().ok_or_else(bad)?;
            let lon = pos.first().and_then(Value::as_f64).ok_or_else(bad)?;
            let lat = pos.get(1).and_then(Value::as_f64).ok_or_else(bad)?;
            pts.push(GeoPoint::new(lat, lon)?);
        }
        parsed.push(pts);
    }
    if parsed.is_empty() {
        return Err(bad());
    }
    let exterior = parsed.remove(0);
    RegionPolygon::new(id, exterior, parsed)
}
