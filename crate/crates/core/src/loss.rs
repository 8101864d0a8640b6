//! Silhouette and colour losses, mesh regularizers, and their weighted sum.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{cross_face_backward, face_cross, normalize_backward, Adjacency, Mesh, Vec3};
use crate::image::Image;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("both silhouettes are empty")]
    EmptyUnion,
    #[error("image shape {got:?} does not match {expected:?}")]
    ShapeMismatch {
        got: (usize, usize, usize),
        expected: (usize, usize, usize),
    },
    #[error("vertex {0} has no neighbours")]
    IsolatedVertex(usize),
    #[error("loss component {0} is not finite")]
    NonFiniteComponent(&'static str),
    #[error("loss weight {0} must be finite and >= 0")]
    InvalidWeight(&'static str),
}

fn same_shape(a: &Image, b: &Image) -> Result<(), LossError> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(LossError::ShapeMismatch {
            got: b.shape(),
            expected: a.shape(),
        })
    }
}

/// `1 - sum(S * P) / sum(S + P - S * P)`
pub fn iou_loss(target: &Image, pred: &Image) -> Result<(f64, Image), LossError> {
    same_shape(target, pred)?;
    let (mut inter, mut union) = (0.0, 0.0);
    for (&s, &p) in target.data().iter().zip(pred.data()) {
        inter += s * p;
        union += s + p - s * p;
    }
    if !(union > 0.0) {
        return Err(LossError::EmptyUnion);
    }
    let u2 = union * union;
    let grad = target
        .data()
        .iter()
        .map(|&s| -(s * union - inter * (1.0 - s)) / u2)
        .collect();
    let (w, h, c) = pred.shape();
    Ok((1.0 - inter / union, Image::from_vec(w, h, c, grad).unwrap()))
}

/// Mean absolute difference over every element.
pub fn l1_loss(target: &Image, pred: &Image) -> Result<(f64, Image), LossError> {
    same_shape(target, pred)?;
    let n = pred.data().len().max(1) as f64;
    let mut sum = 0.0;
    let grad = target
        .data()
        .iter()
        .zip(pred.data())
        .map(|(&t, &p)| {
            sum += (p - t).abs();
            if p > t {
                1.0 / n
            } else if p < t {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    let (w, h, c) = pred.shape();
    Ok((sum / n, Image::from_vec(w, h, c, grad).unwrap()))
}

/// `sum over interior edges of (1 - n_a . n_b)` with unit face normals.
/// Edges touching a zero-area face are skipped.
pub fn smoothness_loss(mesh: &Mesh, adjacency: &Adjacency) -> (f64, Vec<Vec3>) {
    let verts = mesh.vertices();
    let faces = mesh.faces();
    let crosses: Vec<Vec3> = faces.iter().map(|f| face_cross(verts, f)).collect();
    let unit: Vec<Option<Vec3>> = crosses
        .iter()
        .map(|c| {
            let n = c.norm();
            (n > 0.0 && n.is_finite()).then(|| c / n)
        })
        .collect();
    let mut loss = 0.0;
    let mut grad_unit = vec![Vec3::zeros(); faces.len()];
    for (_, fa, fb) in adjacency.interior_edges() {
        let (Some(na), Some(nb)) = (unit[fa], unit[fb]) else {
            continue;
        };
        loss += 1.0 - na.dot(&nb);
        grad_unit[fa] -= nb;
        grad_unit[fb] -= na;
    }
    let mut grad = vec![Vec3::zeros(); verts.len()];
    for (fi, f) in faces.iter().enumerate() {
        if unit[fi].is_none() || grad_unit[fi] == Vec3::zeros() {
            continue;
        }
        let gc = normalize_backward(&crosses[fi], &grad_unit[fi]);
        cross_face_backward(verts, f, &gc, &mut grad);
    }
    (loss, grad)
}

/// `(1/V) sum_v |v - mean(N(v))|^2`
pub fn laplacian_loss(mesh: &Mesh, adjacency: &Adjacency) -> Result<(f64, Vec<Vec3>), LossError> {
    let verts = mesh.vertices();
    let count = verts.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![Vec3::zeros(); verts.len()];
    for (v, nbrs) in adjacency.vertex_neighbors.iter().enumerate() {
        if nbrs.is_empty() {
            return Err(LossError::IsolatedVertex(v));
        }
        let k = nbrs.len() as f64;
        let mean = nbrs.iter().fold(Vec3::zeros(), |acc, &u| acc + verts[u]) / k;
        let d = verts[v] - mean;
        loss += d.norm_squared();
        let g = d * (2.0 / count);
        grad[v] += g;
        for &u in nbrs {
            grad[u] -= g / k;
        }
    }
    Ok((loss / count, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default = "LossWeights::default_iou")]
    pub lambda_iou: f64,
    #[serde(default = "LossWeights::default_col")]
    pub lambda_col: f64,
    #[serde(default = "LossWeights::default_sm")]
    pub lambda_sm: f64,
    #[serde(default = "LossWeights::default_lap")]
    pub lambda_lap: f64,
}

impl LossWeights {
    fn default_iou() -> f64 {
        1.0
    }
    fn default_col() -> f64 {
        1.0
    }
    fn default_sm() -> f64 {
        0.001
    }
    fn default_lap() -> f64 {
        0.01
    }

    pub fn validate(&self) -> Result<(), LossError> {
        for (name, v) in [
            ("lambda_iou", self.lambda_iou),
            ("lambda_col", self.lambda_col),
            ("lambda_sm", self.lambda_sm),
            ("lambda_lap", self.lambda_lap),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(LossError::InvalidWeight(name));
            }
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_iou: Self::default_iou(),
            lambda_col: Self::default_col(),
            lambda_sm: Self::default_sm(),
            lambda_lap: Self::default_lap(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossComponents {
    pub iou: f64,
    pub col: f64,
    pub sm: f64,
    pub lap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossReport {
    pub total: f64,
    pub components: LossComponents,
}

pub fn combined_loss(components: LossComponents, weights: &LossWeights) -> Result<LossReport, LossError> {
    for (name, v) in [
        ("iou", components.iou),
        ("col", components.col),
        ("sm", components.sm),
        ("lap", components.lap),
    ] {
        if !v.is_finite() {
            return Err(LossError::NonFiniteComponent(name));
        }
    }
    let total = weights.lambda_iou * components.iou
        + weights.lambda_col * components.col
        + weights.lambda_sm * components.sm
        + weights.lambda_lap * components.lap;
    Ok(LossReport { total, components })
}
