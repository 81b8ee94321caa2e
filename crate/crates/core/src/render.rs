//! SVG choropleth of regional graffiti levels.

use std::fmt::Write as _;

use crate::geo::{self, GeoPoint, RegionPolygon, Xy};
use crate::metrics::RegionAggregate;

/// Sequential yellow-orange-red ramp; class `k` of `n` takes entry
/// `k * (len - 1) / (n - 1)`.
pub const PALETTE: [&str; 9] = [
    "#ffffcc", "#ffeda0", "#fed976", "#feb24c", "#fd8d3c", "#fc4e2a", "#e31a1c", "#bd0026", "#800026",
];

/// Fill of districts without an aggregate.
pub const NO_DATA_FILL: &str = "#d9d9d9";

const WIDTH_PX: f64 = 800.0;
const MARGIN_PX: f64 = 10.0;
const LEGEND_ROW_PX: f64 = 18.0;

/// Palette colour for `class_index` out of `n_classes`.
pub fn class_color(class_index: usize, n_classes: usize) -> &'static str {
    if n_classes <= 1 {
        return PALETTE[0];
    }
    let k = class_index.min(n_classes - 1);
    PALETTE[k * (PALETTE.len() - 1) / (n_classes - 1)]
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            _ => out.push(c),
        }
    }
    out
}

/// Renders one `<path>` per district id (multi-part districts become
/// subpaths of a single path) filled by class, followed by a legend.
/// Coordinates are printed with two decimals so output is stable.
pub fn render_svg(aggregates: &[RegionAggregate], districts: &[RegionPolygon], n_classes: usize) -> String {
    let mut ids: Vec<&str> = Vec::new();
    for d in districts {
        if !ids.contains(&d.id()) {
            ids.push(d.id());
        }
    }

    let (mut lat_lo, mut lat_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut lon_lo, mut lon_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in districts.iter().flat_map(|d| d.exterior()) {
        lat_lo = lat_lo.min(p.lat());
        lat_hi = lat_hi.max(p.lat());
        lon_lo = lon_lo.min(p.lon());
        lon_hi = lon_hi.max(p.lon());
    }
    // Districts are validated polygons, so their extent is a valid,
    // non-polar box whenever there is at least one.
    let frame = GeoPoint::new((lat_lo + lat_hi) / 2.0, (lon_lo + lon_hi) / 2.0)
        .ok()
        .and_then(|c| geo::make_projection(c).ok())
        .map(|proj| {
            let lo = proj.to_xy(GeoPoint::new(lat_lo, lon_lo).expect("extent corner"));
            let hi = proj.to_xy(GeoPoint::new(lat_hi, lon_hi).expect("extent corner"));
            let scale = (WIDTH_PX - 2.0 * MARGIN_PX) / (hi.x - lo.x).max(1e-9);
            (proj, lo, hi, scale)
        });
    let to_px = |p: GeoPoint| -> (f64, f64) {
        let (proj, lo, hi, scale) = frame.as_ref().expect("frame exists when districts do");
        let q: Xy = proj.to_xy(p);
        (MARGIN_PX + (q.x - lo.x) * scale, MARGIN_PX + (hi.y - q.y) * scale)
    };
    let map_h = match &frame {
        Some((_, lo, hi, scale)) => (hi.y - lo.y) * scale + 2.0 * MARGIN_PX,
        None => 2.0 * MARGIN_PX,
    };

    let mut svg = String::new();
    let legend_h = LEGEND_ROW_PX * (n_classes + 1) as f64 + MARGIN_PX;
    let height = map_h + legend_h;

    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.2}" viewBox="0 0 {w:.0} {h:.2}">"#,
        w = WIDTH_PX,
        h = height
    );
    let _ = writeln!(svg, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);
    let _ = writeln!(svg, r##"<g stroke="#333333" stroke-width="0.5" fill-rule="evenodd">"##);
    for id in &ids {
        let parts: Vec<&RegionPolygon> = districts.iter().filter(|d| d.id() == *id).collect();
        let mut d_attr = String::new();
        for part in parts {
            for ring in std::iter::once(part.exterior()).chain(part.holes().iter().map(|h| h.as_slice())) {
                for (i, p) in ring.iter().enumerate() {
                    let (x, y) = to_px(*p);
                    let _ = write!(d_attr, "{}{x:.2} {y:.2} ", if i == 0 { "M" } else { "L" });
                }
                d_attr.push_str("Z ");
            }
        }
        let d_attr = d_attr.trim_end();
        let agg = aggregates.iter().find(|a| a.region_id == *id);
        match agg {
            Some(a) => {
                let _ = writeln!(
                    svg,
                    r#"<path data-region="{}" data-class="{}" fill="{}" d="{}"><title>{}: {:.6} (n={})</title></path>"#,
                    escape(id),
                    a.class_index,
                    class_color(a.class_index, n_classes),
                    d_attr,
                    escape(id),
                    a.g_region,
                    a.n
                );
            }
            None => {
                let _ = writeln!(
                    svg,
                    r#"<path data-region="{}" data-class="none" fill="{}" d="{}"><title>{}: no data</title></path>"#,
                    escape(id),
                    NO_DATA_FILL,
                    d_attr,
                    escape(id)
                );
            }
        }
    }
    let _ = writeln!(svg, "</g>");

    let _ = writeln!(svg, r#"<g font-family="sans-serif" font-size="11">"#);
    for k in 0..=n_classes {
        let y = map_h + LEGEND_ROW_PX * k as f64;
        let (fill, label) = if k < n_classes {
            (class_color(k, n_classes), format!("class {}", k + 1))
        } else {
            (NO_DATA_FILL, "no data".to_string())
        };
        let _ = writeln!(
            svg,
            r##"<rect x="{MARGIN_PX:.2}" y="{y:.2}" width="14" height="12" fill="{fill}" stroke="#333333" stroke-width="0.5"/><text x="{:.2}" y="{:.2}">{label}</text>"##,
            MARGIN_PX + 20.0,
            y + 10.0
        );
    }
    let _ = writeln!(svg, "</g>");
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(id: &str, dx: f64) -> RegionPolygon {
        let c = GeoPoint::new(-23.55, -46.63 + dx).unwrap();
        RegionPolygon::rectangle(id, c, 500.0, 500.0).unwrap()
    }

    fn agg(id: &str, class_index: usize) -> RegionAggregate {
        RegionAggregate {
            region_id: id.into(),
            g_region: 0.1,
            n: 3,
            class_index,
        }
    }

    #[test]
    fn one_path_per_district_with_class_fill() {
        let districts = vec![square("a", 0.0), square("b", 0.01), square("c", 0.02)];
        let svg = render_svg(&[agg("a", 0), agg("b", 2)], &districts, 3);
        assert_eq!(svg.matches("<path ").count(), 3);
        assert!(svg.contains(r##"data-region="a" data-class="0" fill="#ffffcc""##));
        assert!(svg.contains(r##"data-region="b" data-class="2" fill="#800026""##));
        assert!(svg.contains(r##"data-region="c" data-class="none" fill="#d9d9d9""##));
    }

    #[test]
    fn multipart_district_is_one_path() {
        let districts = vec![square("a", 0.0), square("a", 0.02)];
        let svg = render_svg(&[agg("a", 1)], &districts, 2);
        assert_eq!(svg.matches("<path ").count(), 1);
        assert_eq!(svg.matches('M').count(), 2);
    }

    #[test]
    fn palette_spans_ends() {
        assert_eq!(class_color(0, 5), PALETTE[0]);
        assert_eq!(class_color(4, 5), PALETTE[8]);
        assert_eq!(class_color(2, 5), PALETTE[4]);
        assert_eq!(class_color(8, 9), PALETTE[8]);
    }

    #[test]
    fn ids_are_escaped() {
        let districts = vec![square("a&<b>", 0.0)];
        let svg = render_svg(&[], &districts, 2);
        assert!(svg.contains(r#"data-region="a&amp;&lt;b&gt;""#));
    }

    #[test]
    fn rendering_is_deterministic() {
        let districts = vec![square("a", 0.0), square("b", 0.01)];
        let aggs = [agg("a", 0), agg("b", 1)];
        assert_eq!(render_svg(&aggs, &districts, 2), render_svg(&aggs, &districts, 2));
    }
}
