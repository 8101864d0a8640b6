//! Squared point-to-triangle distance in the image plane.

use super::bary::{cross2, MIN_AREA};
use super::RasterError;
use crate::geometry::Vec2;

/// Nearest feature of the triangle boundary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Witness {
    Inside,
    /// Local vertex index 0..3.
    Vertex(u8),
    /// Edge `k` runs from local vertex `k` to `k + 1 (mod 3)`; `t` is in (0, 1).
    Edge { edge: u8, t: f64 },
}

/// Returns the squared distance from `p` to the closed triangle and the
/// boundary feature that realizes it.
pub fn point_triangle_dist2(p: &Vec2, v0: &Vec2, v1: &Vec2, v2: &Vec2) -> Result<(f64, Witness), RasterError> {
    let d = cross2(v0, v1, v2);
    if !(0.5 * d.abs() >= MIN_AREA) {
        return Err(RasterError::DegenerateTriangle);
    }
    Ok(dist2_unchecked(p, &[*v0, *v1, *v2], d))
}

pub(crate) fn dist2_unchecked(p: &Vec2, v: &[Vec2; 3], d: f64) -> (f64, Witness) {
    let s = d.signum();
    let e0 = cross2(p, &v[1], &v[2]) * s;
    let e1 = cross2(p, &v[2], &v[0]) * s;
    let e2 = cross2(p, &v[0], &v[1]) * s;
    if e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0 {
        return (0.0, Witness::Inside);
    }
    let mut best = (f64::INFINITY, Witness::Inside);
    for k in 0..3 {
        let a = v[k];
        let ab = v[(k + 1) % 3] - a;
        let t = ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
        let q = a + ab * t;
        let d2 = (p - q).norm_squared();
        if d2 < best.0 {
            let w = if t <= 0.0 {
                Witness::Vertex(k as u8)
            } else if t >= 1.0 {
                Witness::Vertex(((k + 1) % 3) as u8)
            } else {
                Witness::Edge { edge: k as u8, t }
            };
            best = (d2, w);
        }
    }
    best
}

/// Gradient of `d2` w.r.t. the three vertices, scaled by `g`. The witness's
/// parameter is stationary, so only the explicit dependence contributes.
pub fn dist2_backward(p: &Vec2, v: &[Vec2; 3], witness: &Witness, g: f64) -> [Vec2; 3] {
    let mut out = [Vec2::zeros(); 3];
    match *witness {
        Witness::Inside => {}
        Witness::Vertex(k) => {
            let k = k as usize;
            out[k] = (p - v[k]) * (-2.0 * g);
        }
        Witness::Edge { edge, t } => {
            let (ka, kb) = (edge as usize, (edge as usize + 1) % 3);
            let q = v[ka] + (v[kb] - v[ka]) * t;
            let r = (p - q) * (-2.0 * g);
            out[ka] = r * (1.0 - t);
            out[kb] = r * t;
        }
    }
    out
}
