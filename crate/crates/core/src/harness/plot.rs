use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::evalkit::iou::{bev_corners, Point2};
use crate::evalkit::Detection;
use crate::scenegen::{PointCloud, PointCloudRange};

/// Pixels per metre.
const SCALE: f64 = 10.0;
const COLORS: [&str; 6] = ["#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Top-down SVG of the cloud with one `<polygon class="det">` per detection. Corner
/// coordinates are in metres; the y axis is flipped by the root transform.
pub fn bev_svg(cloud: &PointCloud, dets: &[Detection], range: &PointCloudRange, class_names: &[String]) -> String {
    let e = range.extent();
    let (w, h) = (e[0] * SCALE, e[1] * SCALE);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);
    let _ = writeln!(
        s,
        r#"<g transform="scale({SCALE},{neg}) translate({tx},{ty})">"#,
        neg = -SCALE,
        tx = -range.min[0],
        ty = -range.max[1]
    );
    let _ = writeln!(s, r##"<g class="points" fill="#555555">"##);
    for p in &cloud.points {
        let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="0.08"/>"#, p[0], p[1]);
    }
    let _ = writeln!(s, "</g>");
    for d in dets {
        let b = &d.bbox;
        let pts: Vec<String> = bev_corners(b).iter().map(|[x, y]| format!("{x},{y}")).collect();
        let label = class_names.get(b.class_id).map_or("?", String::as_str);
        let _ = writeln!(
            s,
            r#"<polygon class="det" data-class="{label}" data-score="{}" points="{}" fill="none" stroke="{}" stroke-width="0.15"/>"#,
            d.score,
            pts.join(" "),
            COLORS[b.class_id % COLORS.len()]
        );
    }
    s.push_str("</g>\n</svg>\n");
    s
}

pub fn write_bev_svg(path: &Path, cloud: &PointCloud, dets: &[Detection], range: &PointCloudRange, class_names: &[String]) -> Result<()> {
    fs::write(path, bev_svg(cloud, dets, range, class_names)).map_err(|e| Error::io(path, e))
}

/// Corner lists of every detection polygon in an SVG produced by [`bev_svg`].
pub fn parse_svg_boxes(svg: &str) -> Vec<[Point2; 4]> {
    svg.lines()
        .filter(|l| l.starts_with(r#"<polygon class="det""#))
        .filter_map(|l| {
            let start = l.find(r#"points=""#)? + 8;
            let end = start + l[start..].find('"')?;
            let pts: Vec<Point2> = l[start..end]
                .split(' ')
                .filter_map(|pair| {
                    let (x, y) = pair.split_once(',')?;
                    Some([x.parse().ok()?, y.parse().ok()?])
                })
                .collect();
            pts.try_into().ok()
        })
        .collect()
}
