//! Signed-area barycentric weights and their reverse pass.

use super::RasterError;
use crate::geometry::Vec2;

/// Faces whose signed area falls below this are not rasterized.
pub const MIN_AREA: f64 = 1e-12;

/// Twice the signed area of `(a, b, c)`, positive for counter-clockwise order.
#[inline]
pub fn cross2(a: &Vec2, b: &Vec2, c: &Vec2) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

#[inline]
pub fn signed_area(a: &Vec2, b: &Vec2, c: &Vec2) -> f64 {
    0.5 * cross2(a, b, c)
}

/// Accumulates `g * d cross2(a, b, c)` into the three point gradients.
#[inline]
fn cross2_backward(a: &Vec2, b: &Vec2, c: &Vec2, g: f64, ga: &mut Vec2, gb: &mut Vec2, gc: &mut Vec2) {
    let db = Vec2::new(c.y - a.y, -(c.x - a.x)) * g;
    let dc = Vec2::new(-(b.y - a.y), b.x - a.x) * g;
    *gb += db;
    *gc += dc;
    *ga -= db + dc;
}

/// `w_k = area(p, v_{k+1}, v_{k+2}) / area(v0, v1, v2)` with `w0 = 1 - w1 - w2`.
pub fn barycentric_weights(v0: &Vec2, v1: &Vec2, v2: &Vec2, p: &Vec2) -> Result<[f64; 3], RasterError> {
    let d = cross2(v0, v1, v2);
    if !(0.5 * d.abs() >= MIN_AREA) {
        return Err(RasterError::DegenerateTriangle);
    }
    Ok(weights_unchecked(v0, v1, v2, p, d))
}

#[inline]
pub(crate) fn weights_unchecked(v0: &Vec2, v1: &Vec2, v2: &Vec2, p: &Vec2, d: f64) -> [f64; 3] {
    let w1 = cross2(p, v2, v0) / d;
    let w2 = cross2(p, v0, v1) / d;
    [1.0 - w1 - w2, w1, w2]
}

/// Gradients w.r.t. the three vertices given `grad_w = dL/dw`.
pub fn barycentric_backward(
    v0: &Vec2,
    v1: &Vec2,
    v2: &Vec2,
    p: &Vec2,
    grad_w: &[f64; 3],
) -> Result<[Vec2; 3], RasterError> {
    let d = cross2(v0, v1, v2);
    if !(0.5 * d.abs() >= MIN_AREA) {
        return Err(RasterError::DegenerateTriangle);
    }
    Ok(backward_unchecked(v0, v1, v2, p, d, grad_w))
}

#[inline]
pub(crate) fn backward_unchecked(
    v0: &Vec2,
    v1: &Vec2,
    v2: &Vec2,
    p: &Vec2,
    d: f64,
    grad_w: &[f64; 3],
) -> [Vec2; 3] {
    backward_with_point(v0, v1, v2, p, d, grad_w).0
}

/// Vertex gradients plus the gradient w.r.t. the sample point `p`.
pub(crate) fn backward_with_point(
    v0: &Vec2,
    v1: &Vec2,
    v2: &Vec2,
    p: &Vec2,
    d: f64,
    grad_w: &[f64; 3],
) -> ([Vec2; 3], Vec2) {
    let e1 = cross2(p, v2, v0);
    let e2 = cross2(p, v0, v1);
    // w0 is eliminated, so its gradient folds into w1 and w2.
    let g1 = grad_w[1] - grad_w[0];
    let g2 = grad_w[2] - grad_w[0];
    let ge1 = g1 / d;
    let ge2 = g2 / d;
    let gd = -(g1 * e1 + g2 * e2) / (d * d);

    let mut g = [Vec2::zeros(); 3];
    let mut gp = Vec2::zeros();
    let [g0, g1v, g2v] = &mut g;
    cross2_backward(p, v2, v0, ge1, &mut gp, g2v, g0);
    cross2_backward(p, v0, v1, ge2, &mut gp, g0, g1v);
    cross2_backward(v0, v1, v2, gd, g0, g1v, g2v);
    (g, gp)
}
