use super::Box3D;

/// Shoelace area of a simple polygon (positive for counter-clockwise).
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let twice: f64 = (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a[0] * b[1] - a[1] * b[0]
        })
        .sum();
    twice / 2.0
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Sutherland-Hodgman clipping of a convex polygon by a convex,
/// counter-clockwise clip polygon.
fn clip(subject: &[[f64; 2]], clip_poly: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out = subject.to_vec();
    for i in 0..clip_poly.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip_poly[i], clip_poly[(i + 1) % clip_poly.len()]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let cur_in = cross(a, b, cur) >= 0.0;
            let prev_in = cross(a, b, prev) >= 0.0;
            if cur_in != prev_in {
                let dp = cross(a, b, prev);
                let dc = cross(a, b, cur);
                let t = dp / (dp - dc);
                out.push([prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])]);
            }
            if cur_in {
                out.push(cur);
            }
        }
    }
    out
}

/// Area of the intersection of two box footprints.
pub fn rotated_rect_intersection(a: &Box3D, b: &Box3D) -> f64 {
    polygon_area(&clip(&a.corners_xy(), &b.corners_xy())).max(0.0)
}

/// Rotated 3-D intersection over union: exact footprint intersection times
/// vertical overlap, over the union volume.
pub fn iou3d(a: &Box3D, b: &Box3D) -> f64 {
    let z_lo = (a.center[2] - a.h / 2.0).max(b.center[2] - b.h / 2.0);
    let z_hi = (a.center[2] + a.h / 2.0).min(b.center[2] + b.h / 2.0);
    let dz = z_hi - z_lo;
    if dz <= 0.0 {
        return 0.0;
    }
    let inter = rotated_rect_intersection(a, b) * dz;
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}
