//! Rotated bird's-eye-view overlap via convex polygon clipping.

use crate::error::{Error, Result};
use crate::scenegen::Box3D;

pub type Point2 = [f64; 2];

/// Counter-clockwise BEV corners of a box footprint.
pub fn bev_corners(b: &Box3D) -> [Point2; 4] {
    let (s, c) = b.yaw.sin_cos();
    let (hl, hw) = (b.size[0] / 2.0, b.size[1] / 2.0);
    let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
    local.map(|[x, y]| [b.center[0] + c * x - s * y, b.center[1] + s * x + c * y])
}

/// Signed shoelace area (positive for counter-clockwise order).
pub fn polygon_area(poly: &[Point2]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut a = 0.0;
    for i in 0..n {
        let (p, q) = (poly[i], poly[(i + 1) % n]);
        a += p[0] * q[1] - q[0] * p[1];
    }
    a / 2.0
}

fn cross(o: Point2, a: Point2, b: Point2) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Sutherland–Hodgman: clip `subject` against the convex counter-clockwise polygon `clip`.
pub fn clip_convex(subject: &[Point2], clip: &[Point2]) -> Vec<Point2> {
    let mut output = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if output.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % n]);
        let input = std::mem::take(&mut output);
        let m = input.len();
        for j in 0..m {
            let cur = input[j];
            let prev = input[(j + m - 1) % m];
            let cur_in = cross(a, b, cur) >= 0.0;
            let prev_in = cross(a, b, prev) >= 0.0;
            if cur_in {
                if !prev_in {
                    output.push(intersect(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(intersect(prev, cur, a, b));
            }
        }
    }
    output
}

fn intersect(p: Point2, q: Point2, a: Point2, b: Point2) -> Point2 {
    let dp = cross(a, b, p);
    let dq = cross(a, b, q);
    let t = dp / (dp - dq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

fn check_area(b: &Box3D) -> Result<f64> {
    let area = b.size[0] * b.size[1];
    if !(area > 0.0) || !area.is_finite() {
        return Err(Error::Contract(format!("degenerate box footprint {:?}", b.size)));
    }
    Ok(area)
}

/// Area of the BEV footprint intersection.
pub fn bev_intersection_area(a: &Box3D, b: &Box3D) -> Result<f64> {
    check_area(a)?;
    check_area(b)?;
    let poly = clip_convex(&bev_corners(a), &bev_corners(b));
    Ok(polygon_area(&poly).max(0.0))
}

/// Intersection over union of two rotated BEV footprints.
pub fn rotated_bev_iou(a: &Box3D, b: &Box3D) -> Result<f64> {
    let (aa, ab) = (check_area(a)?, check_area(b)?);
    let inter = bev_intersection_area(a, b)?;
    let union = aa + ab - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}
