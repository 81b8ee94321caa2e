//! Regenerates the toy pipeline fixture under `fixtures/toy/`.
//!
//! A 204 m square sampled at 102 m gives a 3 x 3 grid. Graffiti is heavy in
//! the west column and fades eastward; the development indicator runs the
//! other way. Run with `cargo run --example make_toy_fixture`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use image::codecs::jpeg::JpegEncoder;
use image::{Rgb, RgbImage};
use serde_json::{json, Value};

use graffmap::acquisition::{content_hash, Provider, StubEntry, ViewStatus, DEFAULT_HEADINGS};
use graffmap::detection::{
    emit_annotation_file, emit_detection_file, AnnotationSet, BitGrid, DetectionSet, Instance, RleMask,
};
use graffmap::geo::{make_projection, GeoPoint, RegionPolygon, Xy};

const W: u32 = 32;
const H: u32 = 24;
const CENTER: (f64, f64) = (-23.55, -46.63);

/// (id, [x0, x1, y0, y1] parts) in metres from the centre.
const DISTRICTS: [(&str, &[[f64; 4]]); 5] = [
    ("west", &[[-130.0, -51.0, -130.0, 130.0], [-300.0, -200.0, -60.0, 60.0]]),
    ("central-south", &[[-51.0, 51.0, -130.0, -51.0]]),
    ("central-north", &[[-51.0, 51.0, -51.0, 130.0]]),
    ("east", &[[51.0, 130.0, -130.0, 130.0]]),
    ("outskirts", &[[130.0, 300.0, -130.0, 130.0]]),
];

const INDICATOR: [(&str, f64); 5] = [
    ("central-north", 0.82),
    ("central-south", 0.78),
    ("east", 0.91),
    ("outskirts", 0.88),
    ("west", 0.71),
];

fn rect_mask(r0: u32, c0: u32, rows: u32, cols: u32) -> RleMask {
    let mut g = BitGrid::new(H, W);
    for r in r0..(r0 + rows).min(H) {
        for c in c0..(c0 + cols).min(W) {
            g.set(r, c, true);
        }
    }
    RleMask::encode(&g).expect("grid encodes")
}

fn ring(parts: [f64; 4], proj: &graffmap::geo::LocalProjection) -> Value {
    let [x0, x1, y0, y1] = parts;
    let pts: Vec<Value> = [(x0, y0), (x1, y0), (x1, y1), (x0, y1), (x0, y0)]
        .iter()
        .map(|&(x, y)| {
            let p = proj.from_xy(Xy::new(x, y)).expect("corner is valid");
            json!([p.lon(), p.lat()])
        })
        .collect();
    json!([pts])
}

fn image_bytes(seed: usize) -> Vec<u8> {
    let img = RgbImage::from_fn(W, H, |x, y| {
        let v = (seed * 37 + x as usize * 5 + y as usize * 3) % 256;
        Rgb([v as u8, (255 - v) as u8, ((seed * 91) % 256) as u8])
    });
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, 85)
        .encode_image(&img)
        .expect("jpeg encodes");
    buf
}

/// Detected instances for point `i` at heading index `h`; `None` marks a
/// view the detector never processed.
fn instances(i: usize, h: usize) -> Option<Vec<Instance>> {
    let col = i % 3;
    let inst = |m: RleMask, c: f64| Instance::new(m, c).expect("valid instance");
    match (i, col) {
        (6, _) if h == 0 => None,
        (2, _) if h == 3 => Some(vec![inst(rect_mask(0, 0, 20, 30), 0.95)]),
        (_, 0) => Some(vec![
            inst(rect_mask(2, 2, 8 + h as u32, 12), 0.9),
            inst(rect_mask(6, 8, 6, 10), 0.7),
            inst(rect_mask(12, 0, 12, 32), 0.3),
        ]),
        (1, _) => Some(vec![inst(rect_mask(10, 10, 4, 6 + h as u32), 0.8)]),
        (_, 1) => Some(vec![
            inst(rect_mask(3, 20, 3, 4), 0.65),
            inst(rect_mask(15, 2, 5, 5), 0.45),
        ]),
        _ if h.is_multiple_of(2) => Some(vec![inst(rect_mask(20, 28, 2, 2), 0.6)]),
        _ => Some(Vec::new()),
    }
}

fn entry(i: usize, h: usize) -> Option<StubEntry> {
    let year = Some(2016 + (i % 3) as i32 + i32::from(i == 0 && h == 3));
    let fetched = |provider| StubEntry {
        year,
        provider,
        status: ViewStatus::Fetched,
    };
    match (i, h) {
        (4, _) => None,
        (2, 2) => Some(StubEntry {
            year: None,
            provider: Provider::Unknown,
            status: ViewStatus::Failed,
        }),
        (2, 3) => Some(fetched(Provider::ThirdParty)),
        (7, 1) => Some(StubEntry {
            year: None,
            provider: Provider::Unknown,
            status: ViewStatus::NoImagery,
        }),
        _ => Some(fetched(Provider::FirstParty)),
    }
}

fn write(path: &Path, bytes: &[u8]) {
    fs::write(path, bytes).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
}

fn pretty(v: &impl serde::Serialize) -> Vec<u8> {
    let mut b = serde_json::to_vec_pretty(v).expect("serializes");
    b.push(b'\n');
    b
}

fn main() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/toy");
    let provider_dir = root.join("provider");
    fs::create_dir_all(&provider_dir).expect("fixture directory");

    let center = GeoPoint::new(CENTER.0, CENTER.1).expect("valid centre");
    let proj = make_projection(center).expect("non-polar centre");

    let region = RegionPolygon::rectangle("toy", center, 204.0, 204.0).expect("valid square");
    let region_doc = json!({
        "type": "Feature",
        "properties": {"id": "toy"},
        "geometry": {"type": "Polygon", "coordinates": region.geojson_coordinates()},
    });
    write(&root.join("region.geojson"), &pretty(&region_doc));

    let features: Vec<Value> = DISTRICTS
        .iter()
        .map(|(id, parts)| {
            let geometry = if parts.len() == 1 {
                json!({"type": "Polygon", "coordinates": ring(parts[0], &proj)})
            } else {
                let polys: Vec<Value> = parts.iter().map(|p| ring(*p, &proj)).collect();
                json!({"type": "MultiPolygon", "coordinates": polys})
            };
            json!({"type": "Feature", "properties": {"id": id}, "geometry": geometry})
        })
        .collect();
    write(
        &root.join("districts.geojson"),
        &pretty(&json!({"type": "FeatureCollection", "features": features})),
    );

    let mut manifest = BTreeMap::new();
    let mut detections = Vec::new();
    let mut annotations = Vec::new();
    for i in 0..9 {
        for (h, heading) in DEFAULT_HEADINGS.iter().enumerate() {
            let key = format!("{i:06}_{heading}");
            let Some(e) = entry(i, h) else { continue };
            if e.status == ViewStatus::Fetched {
                let bytes = image_bytes(i * 4 + h);
                let image_id = content_hash(&bytes);
                write(&provider_dir.join(format!("{key}.jpg")), &bytes);
                if let Some(inst) = instances(i, h) {
                    if i % 3 == 0 {
                        // Annotations: the confident masks, with the second
                        // one shifted on odd headings so it misses.
                        let masks: Vec<RleMask> = inst
                            .iter()
                            .filter(|x| x.confidence() >= 0.5)
                            .enumerate()
                            .map(|(k, x)| {
                                if k == 1 && h % 2 == 1 {
                                    rect_mask(16, 20, 6, 10)
                                } else {
                                    x.mask().clone()
                                }
                            })
                            .collect();
                        annotations.push(AnnotationSet::new(image_id.clone(), W, H, masks).expect("valid"));
                    }
                    detections.push(DetectionSet::new(image_id, W, H, inst).expect("valid set"));
                }
            }
            manifest.insert(key, e);
        }
    }
    write(&provider_dir.join("manifest.json"), &pretty(&manifest));
    write(&root.join("detections.json"), &emit_detection_file(&detections));
    let evaluated: Vec<DetectionSet> = detections
        .iter()
        .filter(|d| annotations.iter().any(|a| a.image_id() == d.image_id()))
        .cloned()
        .collect();
    write(&root.join("eval_detections.json"), &emit_detection_file(&evaluated));
    write(&root.join("annotations.json"), &emit_annotation_file(&annotations));

    let mut csv = String::from("region_id,value\n");
    for (id, v) in INDICATOR {
        csv.push_str(&format!("{id},{v}\n"));
    }
    write(&root.join("hdi.csv"), csv.as_bytes());

    write(
        &root.join("graffmap.toml"),
        br#"config_version = 1
region_geojson = "region.geojson"
districts_geojson = "districts.geojson"
headings = [0, 90, 180, 270]
confidence_threshold = 0.5
min_views = 1
n_classes = 5
max_in_flight = 4
detections_file = "detections.json"
indicator_csv = "hdi.csv"
output_dir = "out"

[sampling]
scheme = "systematic"
spacing_m = 102.0

[provider]
kind = "stub"
dir = "provider"
"#,
    );
    println!("wrote toy fixture to {}", root.display());
}
