//! Total loss over one or more views and its gradient for the enabled groups.

use thiserror::Error;

use crate::camera::Camera;
use crate::geometry::adjacency;
use crate::image::Image;
use crate::io::config::Precision;
use crate::loss::{combined_loss, iou_loss, l1_loss, laplacian_loss, smoothness_loss, LossComponents, LossError, LossReport, LossWeights};
use crate::optim::{FlatParams, OptimError, ParamSet};
use crate::render::{backward_render, forward_render, GradientSet, ParamGroup, RenderError, RenderOutput, RenderTape, Scene};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("{targets} targets for {views} views")]
    ViewCount { views: usize, targets: usize },
}

/// Supervision for one view.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewTarget {
    pub color: Image,
    pub alpha: Image,
    /// Hard silhouette used for reporting.
    pub coverage: Vec<bool>,
}

impl ViewTarget {
    pub fn from_render(out: &RenderOutput, precision: Precision) -> Self {
        Self {
            color: round_image(&out.color, precision),
            alpha: round_image(&out.alpha, precision),
            coverage: out.frame.coverage_mask(),
        }
    }

    /// Splits an RGBA image; coverage is `alpha >= 0.5`.
    pub fn from_rgba(rgba: &Image) -> Option<Self> {
        if rgba.channels() != 4 {
            return None;
        }
        let (w, h) = (rgba.width(), rgba.height());
        let color = rgba.channel_slice(0, 3);
        let alpha = rgba.channel_slice(3, 1);
        let coverage = alpha.data().iter().map(|&a| a >= 0.5).collect();
        debug_assert_eq!(color.shape(), (w, h, 3));
        Some(Self { color, alpha, coverage })
    }
}

pub(crate) fn round_f32(x: f64, precision: Precision) -> f64 {
    match precision {
        Precision::Double => x,
        Precision::Single => x as f32 as f64,
    }
}

fn round_image(img: &Image, precision: Precision) -> Image {
    match precision {
        Precision::Double => img.clone(),
        Precision::Single => img.map(|x| x as f32 as f64),
    }
}

/// One forward and backward evaluation.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: LossReport,
    pub grads: FlatParams,
    pub outputs: Vec<RenderOutput>,
    pub tapes: Vec<RenderTape>,
}

/// Renders every view without gradients.
pub fn render_views(
    scene: &Scene,
    cameras: &[Camera],
    precision: Precision,
) -> Result<Vec<(RenderOutput, RenderTape)>, RenderError> {
    cameras
        .iter()
        .map(|cam| {
            let (mut out, tape) = forward_render(scene, cam)?;
            out.color = round_image(&out.color, precision);
            out.alpha = round_image(&out.alpha, precision);
            Ok((out, tape))
        })
        .collect()
}

/// Loss terms only.
pub fn loss_only(
    scene: &Scene,
    cameras: &[Camera],
    targets: &[ViewTarget],
    weights: &LossWeights,
    precision: Precision,
) -> Result<LossReport, ObjectiveError> {
    let rendered = render_views(scene, cameras, precision)?;
    let (report, _, _) = image_terms(scene, &rendered, targets, weights, precision)?;
    Ok(report)
}

type ImageGrads = Vec<(Image, Image)>;

fn image_terms(
    scene: &Scene,
    rendered: &[(RenderOutput, RenderTape)],
    targets: &[ViewTarget],
    weights: &LossWeights,
    precision: Precision,
) -> Result<(LossReport, ImageGrads, Option<crate::geometry::Adjacency>), ObjectiveError> {
    if targets.len() != rendered.len() {
        return Err(ObjectiveError::ViewCount {
            views: rendered.len(),
            targets: targets.len(),
        });
    }
    let views = rendered.len() as f64;
    let mut c = LossComponents::default();
    let mut image_grads = Vec::with_capacity(rendered.len());
    for ((out, _), t) in rendered.iter().zip(targets) {
        let (iou, mut g_alpha) = iou_loss(&t.alpha, &out.alpha)?;
        let (col, g_col) = l1_loss(&t.color, &out.color)?;
        c.iou += iou / views;
        c.col += col / views;
        g_alpha.data_mut().iter_mut().for_each(|g| *g *= weights.lambda_iou / views);
        let s = weights.lambda_col / views;
        image_grads.push((g_col.map(|g| g * s), g_alpha));
    }
    let adj = (weights.lambda_sm > 0.0 || weights.lambda_lap > 0.0).then(|| adjacency(&scene.mesh));
    if let Some(adj) = &adj {
        if weights.lambda_sm > 0.0 {
            c.sm = smoothness_loss(&scene.mesh, adj).0;
        }
        if weights.lambda_lap > 0.0 {
            c.lap = laplacian_loss(&scene.mesh, adj)?.0;
        }
    }
    c.iou = round_f32(c.iou, precision);
    c.col = round_f32(c.col, precision);
    c.sm = round_f32(c.sm, precision);
    c.lap = round_f32(c.lap, precision);
    let report = combined_loss(c, weights)?;
    Ok((report, image_grads, adj))
}

/// Evaluates the total loss and its gradient for `params`. The camera-eye
/// group follows the first camera only.
pub fn evaluate(
    scene: &Scene,
    cameras: &[Camera],
    targets: &[ViewTarget],
    weights: &LossWeights,
    params: &ParamSet,
    precision: Precision,
) -> Result<Evaluation, ObjectiveError> {
    let rendered = render_views(scene, cameras, precision)?;
    let (report, image_grads, adj) = image_terms(scene, &rendered, targets, weights, precision)?;

    let mut total = GradientSet::default();
    let mut other_views = params.groups().clone();
    other_views.remove(&ParamGroup::CameraEye);
    for (k, ((_, tape), (g_col, g_alpha))) in rendered.iter().zip(&image_grads).enumerate() {
        let groups = if k == 0 { params.groups() } else { &other_views };
        total.accumulate(backward_render(g_col, g_alpha, tape, groups)?);
    }
    if params.contains(ParamGroup::VertexPositions) {
        if let Some(adj) = &adj {
            let gv = total
                .vertex_positions
                .get_or_insert_with(|| vec![Default::default(); scene.mesh.vertex_count()]);
            if weights.lambda_sm > 0.0 {
                for (a, b) in gv.iter_mut().zip(smoothness_loss(&scene.mesh, adj).1) {
                    *a += b * weights.lambda_sm;
                }
            }
            if weights.lambda_lap > 0.0 {
                for (a, b) in gv.iter_mut().zip(laplacian_loss(&scene.mesh, adj)?.1) {
                    *a += b * weights.lambda_lap;
                }
            }
        }
    }
    let mut grads = params.flatten_grads(&total, scene);
    if precision == Precision::Single {
        grads
            .values_mut()
            .for_each(|g| g.iter_mut().for_each(|x| *x = *x as f32 as f64));
    }
    let (outputs, tapes) = rendered.into_iter().unzip();
    Ok(Evaluation {
        report,
        grads,
        outputs,
        tapes,
    })
}
