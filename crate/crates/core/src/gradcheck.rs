//! Central finite-difference check of the analytic gradient of the total loss.
//!
//! A sample is skipped when either perturbed render differs structurally from
//! the unperturbed one: a pixel changes winning face or coverage, a background
//! pixel's retained soft-face set or nearest face feature changes, a shading clamp switches, a texture
//! lookup moves to another texel cell, or a colour residual changes sign. The
//! loss is not differentiable across those events.

use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::camera::Camera;
use crate::io::config::Precision;
use crate::loss::LossWeights;
use crate::objective::{evaluate, render_views, ViewTarget};
use crate::optim::ParamSet;
use crate::raster::Witness;
use crate::render::{ParamGroup, RenderOutput, RenderTape, Scene};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    /// Coordinates to check; all of them when the group is smaller.
    pub samples: usize,
    /// Finite-difference step.
    pub h: f64,
    /// Maximum relative error.
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
    /// Fraction of checked samples that must pass.
    pub min_pass_rate: f64,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            samples: 64,
            h: 1e-4,
            tolerance: 1e-3,
            floor: 1e-6,
            min_pass_rate: 0.99,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Pass,
    Fail,
    /// The perturbation crossed a discontinuity.
    Skipped,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Sample {
    /// Check point the sample was taken at.
    pub point: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub group: ParamGroup,
    pub options_h: f64,
    pub tolerance: f64,
    pub min_pass_rate: f64,
    pub samples: Vec<Sample>,
    /// Set when the check could not run at all.
    pub rejected: Option<String>,
}

impl GradcheckReport {
    fn rejected(group: ParamGroup, opts: &GradcheckOptions, reason: String) -> Self {
        Self {
            group,
            options_h: opts.h,
            tolerance: opts.tolerance,
            min_pass_rate: opts.min_pass_rate,
            samples: Vec::new(),
            rejected: Some(reason),
        }
    }

    fn count(&self, o: Outcome) -> usize {
        self.samples.iter().filter(|s| s.outcome == o).count()
    }

    pub fn passed(&self) -> usize {
        self.count(Outcome::Pass)
    }

    pub fn failed(&self) -> usize {
        self.count(Outcome::Fail)
    }

    pub fn skipped(&self) -> usize {
        self.count(Outcome::Skipped)
    }

    /// Pass fraction among non-skipped samples; `None` if every sample was skipped.
    pub fn pass_rate(&self) -> Option<f64> {
        let checked = self.passed() + self.failed();
        (checked > 0).then(|| self.passed() as f64 / checked as f64)
    }

    /// Appends the samples of `other`, renumbering its check point as `point`.
    pub fn merge(&mut self, other: GradcheckReport, point: usize) {
        if self.rejected.is_none() {
            self.rejected = other.rejected;
        }
        self.samples
            .extend(other.samples.into_iter().map(|s| Sample { point, ..s }));
    }

    pub fn ok(&self) -> bool {
        self.rejected.is_none() && self.pass_rate().is_some_and(|r| r >= self.min_pass_rate)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(r) = &self.rejected {
            return write!(f, "{:<18} REJECTED  {r}", self.group.name());
        }
        let worst = self
            .samples
            .iter()
            .filter(|s| s.outcome != Outcome::Skipped)
            .map(|s| s.rel_error)
            .fold(0.0, f64::max);
        write!(
            f,
            "{:<18} {}  passed {:>4}  failed {:>3}  skipped {:>4}  worst rel err {:.2e}",
            self.group.name(),
            if self.ok() { "PASS" } else { "FAIL" },
            self.passed(),
            self.failed(),
            self.skipped(),
            worst
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Signature {
    face_id: Vec<u32>,
    soft_faces: Vec<u32>,
    soft_offsets: Vec<usize>,
    clamp: Vec<u8>,
    cells: Vec<Option<[usize; 6]>>,
    l1_sign: Vec<i8>,
}

fn signature(out: &RenderOutput, tape: &RenderTape, target: &ViewTarget) -> Signature {
    let n = out.frame.face_id.len();
    let mut soft_faces = Vec::new();
    let mut soft_offsets = Vec::with_capacity(n + 1);
    soft_offsets.push(0);
    for p in 0..n {
        soft_faces.extend(tape.raster().soft_entries(p).iter().map(|e| {
            let feature = match e.witness {
                Witness::Inside => 0,
                Witness::Vertex(k) => 1 + k as u32,
                Witness::Edge { edge, .. } => 4 + edge as u32,
            };
            e.face * 8 + feature
        }));
        soft_offsets.push(soft_faces.len());
    }
    let l1_sign = out
        .color
        .data()
        .iter()
        .zip(target.color.data())
        .map(|(p, t)| (p - t).partial_cmp(&0.0).map_or(0, |o| o as i8))
        .collect();
    Signature {
        face_id: out.frame.face_id.clone(),
        soft_faces,
        soft_offsets,
        clamp: tape.shade().clamp_state().to_vec(),
        cells: tape.texture().map(|t| t.cells()).unwrap_or_default(),
        l1_sign,
    }
}

fn signatures(
    scene: &Scene,
    cameras: &[Camera],
    targets: &[ViewTarget],
) -> Result<Vec<Signature>, String> {
    let rendered = render_views(scene, cameras, Precision::Double).map_err(|e| e.to_string())?;
    Ok(rendered
        .iter()
        .zip(targets)
        .map(|((o, t), tg)| signature(o, t, tg))
        .collect())
}

/// Compares the analytic gradient of the total loss w.r.t. `group` with
/// central differences on randomly chosen coordinates. Always double precision.
pub fn gradcheck(
    scene: &Scene,
    cameras: &[Camera],
    targets: &[ViewTarget],
    weights: &LossWeights,
    group: ParamGroup,
    opts: &GradcheckOptions,
) -> GradcheckReport {
    if !(opts.h > 0.0 && opts.h.is_finite()) {
        return GradcheckReport::rejected(group, opts, format!("step h must be positive and finite, got {}", opts.h));
    }
    if !(opts.tolerance > 0.0) || opts.samples == 0 {
        return GradcheckReport::rejected(group, opts, "tolerance and sample count must be positive".into());
    }
    let params = match ParamSet::new([group]) {
        Ok(p) => p,
        Err(e) => return GradcheckReport::rejected(group, opts, e.to_string()),
    };
    if let Err(e) = params.check_scene(scene) {
        return GradcheckReport::rejected(group, opts, e.to_string());
    }
    let base = match evaluate(scene, cameras, targets, weights, &params, Precision::Double) {
        Ok(e) => e,
        Err(e) => return GradcheckReport::rejected(group, opts, e.to_string()),
    };
    let base_sig: Vec<Signature> = base
        .outputs
        .iter()
        .zip(&base.tapes)
        .zip(targets)
        .map(|((o, t), tg)| signature(o, t, tg))
        .collect();
    let analytic = &base.grads[&group];
    let values = params.gather(scene, &cameras[0]);
    let len = values[&group].len();
    if len == 0 {
        return GradcheckReport::rejected(group, opts, "group has no coordinates".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut indices = sample(&mut rng, len, opts.samples.min(len)).into_vec();
    indices.sort_unstable();

    let perturbed = |index: usize, delta: f64| -> Option<(f64, Vec<Signature>)> {
        let mut v = values.clone();
        v.get_mut(&group).unwrap()[index] += delta;
        let mut s = scene.clone();
        let mut cams = cameras.to_vec();
        params.scatter(&v, &mut s, &mut cams[0]).ok()?;
        let r = crate::objective::loss_only(&s, &cams, targets, weights, Precision::Double).ok()?;
        let sig = signatures(&s, &cams, targets).ok()?;
        Some((r.total, sig))
    };

    let samples = indices
        .into_iter()
        .map(|index| {
            let a = analytic[index];
            let plus = perturbed(index, opts.h);
            let minus = perturbed(index, -opts.h);
            match (plus, minus) {
                (Some((fp, sp)), Some((fm, sm))) if sp == base_sig && sm == base_sig => {
                    let numeric = (fp - fm) / (2.0 * opts.h);
                    let rel_error = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
                    Sample {
                        point: 0,
                        index,
                        analytic: a,
                        numeric,
                        rel_error,
                        outcome: if rel_error <= opts.tolerance {
                            Outcome::Pass
                        } else {
                            Outcome::Fail
                        },
                    }
                }
                _ => Sample {
                    point: 0,
                    index,
                    analytic: a,
                    numeric: f64::NAN,
                    rel_error: f64::NAN,
                    outcome: Outcome::Skipped,
                },
            }
        })
        .collect();
    GradcheckReport {
        group,
        options_h: opts.h,
        tolerance: opts.tolerance,
        min_pass_rate: opts.min_pass_rate,
        samples,
        rejected: None,
    }
}

/// Error from [`perturbed_problem`].
#[derive(Debug, thiserror::Error)]
pub enum ProblemError {
    #[error(transparent)]
    Config(#[from] crate::io::config::ConfigError),
    #[error(transparent)]
    Render(#[from] crate::render::RenderError),
}

/// A check point away from the optimum: targets are rendered from the
/// configured scene, and every parameter of the returned scene and first
/// camera is jittered with a seeded generator.
pub fn perturbed_problem(
    cfg: &crate::io::config::SceneConfig,
    base_dir: &std::path::Path,
    seed: u64,
) -> Result<(Scene, Vec<Camera>, Vec<ViewTarget>), ProblemError> {
    use crate::geometry::{Vec2, Vec3, VertexAttributes};
    use crate::shading::{LightingSpec, Texture};
    use rand::Rng;

    let gt = cfg.build_scene(base_dir)?;
    let gt_cams = cfg.cameras();
    let targets = render_views(&gt, &gt_cams, Precision::Double)?
        .iter()
        .map(|(o, _)| ViewTarget::from_render(o, Precision::Double))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut j = |a: f64| rng.gen_range(-a..=a);
    let mut v3 = |a: f64| Vec3::new(j(a), j(a), j(a));
    let mesh = &gt.mesh;
    let vertices = mesh.vertices().iter().map(|v| v + v3(0.02)).collect();
    let attrs = VertexAttributes {
        colors: mesh.colors().map(|c| c.iter().map(|x| x + v3(0.1)).collect()),
        uvs: mesh.uvs().map(|u| {
            u.iter()
                .map(|t| {
                    let d = v3(0.02);
                    t + Vec2::new(d.x, d.y)
                })
                .collect()
        }),
        normals: mesh.normals().map(<[Vec3]>::to_vec),
    };
    let mut scene = gt.clone();
    scene.mesh = mesh
        .with_attributes(attrs)
        .and_then(|m| m.with_vertices(vertices))
        .map_err(|e| crate::io::config::ConfigError::Invalid {
            field: "mesh",
            message: e.to_string(),
        })?;
    if let Some(t) = &gt.texture {
        let texels = t.texels().iter().map(|x| x + v3(0.1)).collect();
        scene.texture = Some(Texture::new(t.width(), t.height(), texels).expect("finite texels"));
    }
    match &mut scene.lighting {
        LightingSpec::None => {}
        LightingSpec::Lambertian { kd, light_dir } => {
            *kd *= 1.0 + v3(0.2).x;
            *light_dir = (*light_dir + v3(0.1)).normalize();
        }
        LightingSpec::Phong {
            kd,
            ks,
            shininess,
            light_dir,
        } => {
            let f = v3(0.2);
            *kd *= 1.0 + f.x;
            *ks *= 1.0 + f.y;
            *shininess = (*shininess * (1.0 + f.z)).max(1.0);
            *light_dir = (*light_dir + v3(0.1)).normalize();
        }
        LightingSpec::SphericalHarmonics { coeffs } => {
            for c in coeffs.iter_mut() {
                *c += v3(0.1).x;
            }
        }
    }
    let mut cams = gt_cams;
    let dist = (cams[0].eye - cams[0].center).norm();
    cams[0].eye += v3(0.02 * dist);
    Ok((scene, cams, targets))
}

/// Runs [`gradcheck`] at `points` check points built by [`perturbed_problem`]
/// with seeds `opts.seed`, `opts.seed + 1`, ... and merges the reports. Small
/// groups such as the camera eye need several points to collect enough
/// samples away from discontinuities.
pub fn gradcheck_config(
    cfg: &crate::io::config::SceneConfig,
    base_dir: &std::path::Path,
    group: ParamGroup,
    opts: &GradcheckOptions,
    points: usize,
) -> Result<GradcheckReport, ProblemError> {
    let mut merged: Option<GradcheckReport> = None;
    for p in 0..points.max(1) {
        let seed = opts.seed.wrapping_add(p as u64);
        let (scene, cams, targets) = perturbed_problem(cfg, base_dir, seed)?;
        let r = gradcheck(&scene, &cams, &targets, &cfg.loss, group, &GradcheckOptions { seed, ..*opts });
        match &mut merged {
            None => merged = Some(r),
            Some(m) => m.merge(r, p),
        }
    }
    Ok(merged.expect("at least one point"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{unit_sphere, Vec3};
    use crate::image::Image;
    use crate::io::config::{position_colors, with_colors};
    use crate::raster::SoftConfig;
    use crate::shading::LightingSpec;

    fn setup() -> (Scene, Vec<Camera>, Vec<ViewTarget>) {
        let mesh = unit_sphere(1).unwrap();
        let colors = position_colors(&mesh);
        let scene = Scene {
            mesh: with_colors(&mesh, colors).unwrap(),
            texture: None,
            lighting: LightingSpec::None,
            soft: SoftConfig::default(),
            width: 16,
            height: 16,
        };
        let cams = vec![Camera::look_at(Vec3::new(0.2, 0.3, 3.0), Vec3::zeros(), Vec3::y(), 0.8, 1.0)];
        let targets = vec![ViewTarget {
            color: Image::filled(16, 16, 3, 0.4),
            alpha: Image::filled(16, 16, 1, 0.3),
            coverage: vec![false; 256],
        }];
        (scene, cams, targets)
    }

    #[test]
    fn zero_step_is_rejected() {
        let (s, c, t) = setup();
        let opts = GradcheckOptions {
            h: 0.0,
            ..Default::default()
        };
        let r = gradcheck(&s, &c, &t, &LossWeights::default(), ParamGroup::VertexColors, &opts);
        assert!(r.rejected.is_some());
        assert!(!r.ok());
        assert!(r.to_string().contains("REJECTED"));
    }

    #[test]
    fn vertex_colors_pass_tightly() {
        let (s, c, t) = setup();
        let opts = GradcheckOptions {
            samples: 40,
            tolerance: 1e-6,
            ..Default::default()
        };
        let r = gradcheck(&s, &c, &t, &LossWeights::default(), ParamGroup::VertexColors, &opts);
        assert_eq!(r.failed(), 0, "{r}");
        assert!(r.passed() > 0);
        assert!(r.ok());
    }

    #[test]
    fn group_must_fit_scene() {
        let (s, c, t) = setup();
        let r = gradcheck(&s, &c, &t, &LossWeights::default(), ParamGroup::ShCoeffs, &Default::default());
        assert!(r.rejected.unwrap().contains("spherical"));
    }

    #[test]
    fn vertex_positions_pass_away_from_discontinuities() {
        let (s, c, t) = setup();
        // The soft silhouette is sharp, so a smaller step keeps truncation
        // error well below the tolerance on this coarse scene.
        let opts = GradcheckOptions {
            samples: 60,
            h: 1e-5,
            ..Default::default()
        };
        let r = gradcheck(&s, &c, &t, &LossWeights::default(), ParamGroup::VertexPositions, &opts);
        assert!(r.passed() >= 10, "{r}");
        assert!(r.ok(), "{r}");
    }
}
