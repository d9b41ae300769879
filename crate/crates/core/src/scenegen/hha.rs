//! Simplified HHA geometry encoding of a depth map.

use super::SceneCamera;
use crate::error::{contract, Result};
use crate::tensor::Tensor;

pub const MIN_DEPTH: f32 = 0.5;
pub const MAX_DEPTH: f32 = 10.0;
/// Heights above the floor are normalized by this span (m).
const HEIGHT_SPAN: f64 = 3.0;

/// Unnormalized inverse depth.
pub fn disparity(depth: f32) -> f64 {
    1.0 / depth as f64
}

fn normalized_disparity(depth: f32) -> f64 {
    let lo = disparity(MAX_DEPTH);
    let hi = disparity(MIN_DEPTH);
    ((disparity(depth) - lo) / (hi - lo)).clamp(0.0, 1.0)
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Encodes depth (meters, row-major `h×w`) as disparity, height above the
/// floor and the normal/gravity angle, each in `[0, 1]`.
///
/// With `max_range`, pixels at or beyond it have no return: their disparity
/// channel is 0.
pub fn encode_hha(
    depth: &[f32],
    h: usize,
    w: usize,
    camera: &SceneCamera,
    max_range: Option<f32>,
) -> Result<Tensor> {
    contract!(
        depth.len() == h * w,
        "depth map {}x{} needs {} values, got {}",
        h,
        w,
        h * w,
        depth.len()
    );
    contract!(
        depth.iter().all(|&d| d > 0.0 && d.is_finite()),
        "depth must be positive and finite everywhere"
    );
    let up = camera.gravity_up;
    let up_norm = dot(up, up).sqrt();
    contract!(
        (up_norm - 1.0).abs() < 1e-6,
        "gravity_up must be a unit vector, has norm {}",
        up_norm
    );
    let f = camera.focal_px;
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let point = |r: usize, c: usize| -> [f64; 3] {
        let z = depth[r * w + c] as f64;
        [(c as f64 + 0.5 - cx) * z / f, (r as f64 + 0.5 - cy) * z / f, z]
    };

    let plane = h * w;
    let mut out = vec![0.0f32; 3 * plane];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let d = depth[i];
            let p = point(r, c);

            let no_return = max_range.is_some_and(|m| d >= m);
            out[i] = if no_return { 0.0 } else { normalized_disparity(d) as f32 };

            // Camera y points down, so height grows as the ray tilts upward.
            let height = camera.height_above_floor - dot(p, [0.0, 1.0, 0.0]);
            out[plane + i] = (height / HEIGHT_SPAN).clamp(0.0, 1.0) as f32;

            let du = sub(point(r, (c + 1).min(w - 1)), point(r, c.saturating_sub(1)));
            let dv = sub(point((r + 1).min(h - 1), c), point(r.saturating_sub(1), c));
            let mut n = cross(du, dv);
            if dot(n, p) > 0.0 {
                n = [-n[0], -n[1], -n[2]];
            }
            let len = dot(n, n).sqrt();
            let cos = if len > 0.0 { dot(n, up) / len } else { 0.0 };
            out[2 * plane + i] = ((1.0 + cos) / 2.0).clamp(0.0, 1.0) as f32;
        }
    }
    Tensor::new([3, h, w], out)
}
