//! Round-trip optimization tasks: render targets from known parameters,
//! perturb the parameters, and recover them with Adam.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::camera::Camera;
use crate::geometry::{Vec2, Vec3, VertexAttributes};
use crate::io::config::{ConfigError, SceneConfig, TaskConfig, TaskKind};
use crate::io::obj::{save_obj, ObjError};
use crate::io::png::{load_png, save_png, with_alpha, BitDepth, PngError};
use crate::loss::LossReport;
use crate::objective::{evaluate, loss_only, render_views, ObjectiveError, ViewTarget};
use crate::optim::{adam_step, AdamState, OptimError, ParamSet};
use crate::render::{ParamGroup, RenderOutput, Scene};
use crate::shading::{LightingSpec, Texture};

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("config has no task section")]
    NoTask,
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Png(#[from] PngError),
    #[error(transparent)]
    Obj(#[from] ObjError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("loss.csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("task {task}: {message}")]
    Setup { task: char, message: String },
    #[error("loss became non-finite at iteration {iteration}{}", diagnostic.as_ref().map(|p| format!("; state written to {}", p.display())).unwrap_or_default())]
    NonFiniteLoss {
        iteration: usize,
        diagnostic: Option<PathBuf>,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TaskError + '_ {
    move |source| TaskError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Everything needed to start optimizing.
#[derive(Debug, Clone)]
pub struct TaskSetup {
    pub kind: TaskKind,
    pub params: ParamSet,
    /// Initial scene and cameras; only the first camera is optimized.
    pub scene: Scene,
    pub cameras: Vec<Camera>,
    pub targets: Vec<ViewTarget>,
    /// Ground truth when targets were rendered rather than loaded.
    pub ground_truth: Option<(Scene, Vec<Camera>)>,
}

fn setup_err(kind: TaskKind, message: impl Into<String>) -> TaskError {
    TaskError::Setup {
        task: kind.letter(),
        message: message.into(),
    }
}

fn jitter(rng: &mut ChaCha8Rng, amount: f64) -> f64 {
    if amount > 0.0 {
        rng.gen_range(-amount..=amount)
    } else {
        0.0
    }
}

/// Builds ground truth, initial state and targets for the configured task.
pub fn prepare_task(cfg: &SceneConfig, base_dir: &Path) -> Result<TaskSetup, TaskError> {
    let task = cfg.task.as_ref().ok_or(TaskError::NoTask)?;
    let kind = task.kind;
    let gt_scene = cfg.build_scene(base_dir)?;
    let gt_cameras = cfg.cameras();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = task.init_noise();

    let mut scene = gt_scene.clone();
    let mut cameras = gt_cameras.clone();
    let mut gt = gt_scene.clone();
    match kind {
        TaskKind::Silhouette => {
            let s = Vec3::from(task.target_scale);
            let scaled = gt.mesh.vertices().iter().map(|v| v.component_mul(&s)).collect();
            let attrs = VertexAttributes {
                normals: None,
                ..gt.mesh.attributes()
            };
            gt.mesh = gt
                .mesh
                .with_attributes(attrs)
                .and_then(|m| m.with_vertices(scaled))
                .map_err(|e| setup_err(kind, e.to_string()))?;
            let start = scene
                .mesh
                .vertices()
                .iter()
                .map(|v| v + Vec3::new(jitter(&mut rng, noise), jitter(&mut rng, noise), jitter(&mut rng, noise)))
                .collect();
            scene.mesh = gt
                .mesh
                .with_vertices(start)
                .map_err(|e| setup_err(kind, e.to_string()))?;
        }
        TaskKind::Positions => {
            if !matches!(gt.lighting, LightingSpec::Lambertian { .. }) {
                return Err(setup_err(kind, "needs Lambertian shading"));
            }
            let start = gt
                .mesh
                .vertices()
                .iter()
                .map(|v| v + Vec3::new(jitter(&mut rng, noise), jitter(&mut rng, noise), jitter(&mut rng, noise)))
                .collect();
            scene.mesh = gt.mesh.with_vertices(start).map_err(|e| setup_err(kind, e.to_string()))?;
        }
        TaskKind::VertexColors => {
            if gt.texture.is_some() {
                return Err(setup_err(kind, "needs an untextured scene"));
            }
            let n = gt.mesh.vertex_count();
            let start = (0..n)
                .map(|_| Vec3::repeat(0.5) + Vec3::new(jitter(&mut rng, noise), jitter(&mut rng, noise), jitter(&mut rng, noise)))
                .collect();
            scene.mesh = crate::io::config::with_colors(&gt.mesh, start).map_err(|e| setup_err(kind, e.to_string()))?;
        }
        TaskKind::Texels => {
            let t = gt.texture.as_ref().ok_or_else(|| setup_err(kind, "needs a texture"))?;
            let texels = (0..t.texels().len())
                .map(|_| Vec3::repeat(0.5) + Vec3::new(jitter(&mut rng, noise), jitter(&mut rng, noise), jitter(&mut rng, noise)))
                .collect();
            scene.texture = Some(Texture::new(t.width(), t.height(), texels).map_err(|e| setup_err(kind, e.to_string()))?);
        }
        TaskKind::Uvs => {
            let uvs = gt.mesh.uvs().ok_or_else(|| setup_err(kind, "needs a texture and uvs"))?;
            let start = uvs
                .iter()
                .map(|t| t + Vec2::new(jitter(&mut rng, noise), jitter(&mut rng, noise)))
                .collect();
            let attrs = VertexAttributes {
                uvs: Some(start),
                ..gt.mesh.attributes()
            };
            scene.mesh = gt.mesh.with_attributes(attrs).map_err(|e| setup_err(kind, e.to_string()))?;
        }
        TaskKind::CameraEye => {
            let c = &mut cameras[0];
            let dir = loop {
                let d = Vec3::new(jitter(&mut rng, 1.0), jitter(&mut rng, 1.0), jitter(&mut rng, 1.0));
                let n = d.norm();
                if n > 1e-3 && n <= 1.0 {
                    break d / n;
                }
            };
            c.eye += dir * noise * (c.eye - c.center).norm();
        }
        TaskKind::ShLighting => match &mut scene.lighting {
            LightingSpec::SphericalHarmonics { coeffs } => {
                for c in coeffs.iter_mut() {
                    *c += jitter(&mut rng, noise);
                }
            }
            _ => return Err(setup_err(kind, "needs spherical-harmonic lighting")),
        },
        TaskKind::PhongMaterial => match &mut scene.lighting {
            LightingSpec::Phong { kd, ks, shininess, .. } => {
                *kd = (*kd * (1.0 + jitter(&mut rng, noise))).max(0.0);
                *ks = (*ks * (1.0 + jitter(&mut rng, noise))).max(0.0);
                *shininess = (*shininess * (1.0 + jitter(&mut rng, noise))).max(1.0);
            }
            _ => return Err(setup_err(kind, "needs Phong lighting")),
        },
    }

    let groups = task.groups.clone().unwrap_or_else(|| vec![kind.default_group()]);
    let params = ParamSet::new(groups)?;
    params.check_scene(&scene)?;

    let (targets, ground_truth) = match &task.targets {
        Some(paths) => {
            if paths.len() != cameras.len() {
                return Err(setup_err(
                    kind,
                    format!("{} target images for {} views", paths.len(), cameras.len()),
                ));
            }
            let mut targets = Vec::with_capacity(paths.len());
            for p in paths {
                let img = load_png(&base_dir.join(p))?;
                if (img.width(), img.height()) != (scene.width, scene.height) {
                    return Err(setup_err(
                        kind,
                        format!("{} is {}x{}, expected {}x{}", p.display(), img.width(), img.height(), scene.width, scene.height),
                    ));
                }
                targets.push(ViewTarget::from_rgba(&img).ok_or_else(|| setup_err(kind, format!("{} has no alpha channel", p.display())))?);
            }
            (targets, None)
        }
        None => {
            let rendered = render_views(&gt, &gt_cameras, cfg.precision).map_err(ObjectiveError::from)?;
            let targets = rendered.iter().map(|(o, _)| ViewTarget::from_render(o, cfg.precision)).collect();
            (targets, Some((gt, gt_cameras)))
        }
    };
    Ok(TaskSetup {
        kind,
        params,
        scene,
        cameras,
        targets,
        ground_truth,
    })
}

/// Recovery measures; entries that do not apply to the task are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TaskMetrics {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Loss of the ground-truth parameters, the floor the optimizer can reach.
    pub ground_truth_loss: Option<f64>,
    /// `1 - (final - floor) / (initial - floor)`.
    pub loss_reduction: f64,
    /// Relative drop of the colour L1 term from the first iteration.
    pub color_l1_drop: f64,
    /// Mean hard-silhouette IOU against the targets.
    pub silhouette_iou: f64,
    pub sh_rel_l2: Option<f64>,
    /// Eye distance to ground truth over the mesh bounding radius.
    pub eye_error_ratio: Option<f64>,
    /// Recovered and true (kd, ks, shininess) for Phong material.
    pub material: Option<([f64; 3], [f64; 3])>,
}

#[derive(Debug, Clone)]
pub struct OptimizationReport {
    pub kind: TaskKind,
    pub groups: Vec<ParamGroup>,
    /// Loss before each update, one entry per iteration.
    pub losses: Vec<LossReport>,
    /// Loss after the last update.
    pub final_loss: LossReport,
    pub metrics: TaskMetrics,
    pub wall_time: Duration,
    pub snapshots: Vec<PathBuf>,
    pub scene: Scene,
    pub cameras: Vec<Camera>,
}

impl OptimizationReport {
    /// Loss curve as CSV with columns iteration, total, iou, col, sm, lap.
    pub fn loss_csv(&self) -> Result<String, csv::Error> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["iteration", "total", "iou", "col", "sm", "lap"])?;
        for (i, r) in self.losses.iter().enumerate() {
            let c = r.components;
            w.serialize((i, r.total, c.iou, c.col, c.sm, c.lap))?;
        }
        let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    /// Human-readable summary, one `key: value` per line.
    pub fn summary(&self) -> String {
        let m = &self.metrics;
        let mut s = String::new();
        let groups: Vec<_> = self.groups.iter().map(|g| g.name()).collect();
        let _ = writeln!(s, "task: {}", self.kind.letter());
        let _ = writeln!(s, "groups: {}", groups.join(","));
        let _ = writeln!(s, "iterations: {}", self.losses.len());
        let _ = writeln!(s, "initial_loss: {:.6e}", m.initial_loss);
        let _ = writeln!(s, "final_loss: {:.6e}", m.final_loss);
        if let Some(g) = m.ground_truth_loss {
            let _ = writeln!(s, "ground_truth_loss: {g:.6e}");
        }
        let _ = writeln!(s, "loss_reduction: {:.4}", m.loss_reduction);
        let _ = writeln!(s, "color_l1_drop: {:.4}", m.color_l1_drop);
        let _ = writeln!(s, "silhouette_iou: {:.4}", m.silhouette_iou);
        if let Some(v) = m.sh_rel_l2 {
            let _ = writeln!(s, "sh_rel_l2: {v:.4e}");
        }
        if let Some(v) = m.eye_error_ratio {
            let _ = writeln!(s, "eye_error_ratio: {v:.4e}");
        }
        if let Some((got, want)) = m.material {
            let _ = writeln!(
                s,
                "material: kd {:.4} ks {:.4} shininess {:.3} (true {:.4} {:.4} {:.3})",
                got[0], got[1], got[2], want[0], want[1], want[2]
            );
        }
        let c = self.final_loss.components;
        let _ = writeln!(
            s,
            "final_components: iou {:.6e} col {:.6e} sm {:.6e} lap {:.6e}",
            c.iou, c.col, c.sm, c.lap
        );
        let _ = writeln!(s, "wall_time_s: {:.3}", self.wall_time.as_secs_f64());
        s
    }
}

fn hard_iou(outputs: &[RenderOutput], targets: &[ViewTarget]) -> f64 {
    let per_view = outputs.iter().zip(targets).map(|(o, t)| {
        let pred = o.frame.coverage_mask();
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in pred.iter().zip(&t.coverage) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    });
    per_view.sum::<f64>() / outputs.len() as f64
}

fn write_snapshot(dir: &Path, name: &str, out: &RenderOutput) -> Result<PathBuf, TaskError> {
    let path = dir.join(name);
    let rgba = with_alpha(&out.color, &out.alpha).expect("render output shapes agree");
    save_png(&rgba, &path, BitDepth::Eight)?;
    Ok(path)
}

/// Runs the configured task. When `out_dir` is set, writes `loss.csv`,
/// snapshots, `final.png`, `mesh.obj`, `texture.png` (textured scenes) and
/// `report.txt` there.
pub fn run_task(cfg: &SceneConfig, base_dir: &Path, out_dir: Option<&Path>) -> Result<OptimizationReport, TaskError> {
    let task: &TaskConfig = cfg.task.as_ref().ok_or(TaskError::NoTask)?;
    let setup = prepare_task(cfg, base_dir)?;
    run_prepared(cfg, task, setup, out_dir)
}

/// Runs an already prepared task for `task.iterations` steps.
pub fn run_prepared(
    cfg: &SceneConfig,
    task: &TaskConfig,
    setup: TaskSetup,
    out_dir: Option<&Path>,
) -> Result<OptimizationReport, TaskError> {
    let start = Instant::now();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let TaskSetup {
        kind,
        params,
        mut scene,
        mut cameras,
        targets,
        ground_truth,
    } = setup;
    let precision = cfg.precision;
    let mut state = AdamState::new(cfg.optimizer);
    let mut values = params.gather(&scene, &cameras[0]);
    let mut losses = Vec::with_capacity(task.iterations);
    let mut snapshots = Vec::new();

    for it in 0..task.iterations {
        let eval = evaluate(&scene, &cameras, &targets, &cfg.loss, &params, precision)?;
        if !eval.report.total.is_finite() {
            let diagnostic = match out_dir {
                Some(dir) => {
                    let p = write_snapshot(dir, "nonfinite.png", &eval.outputs[0]).ok();
                    let _ = save_obj(&scene.mesh, &dir.join("nonfinite.obj"));
                    p
                }
                None => None,
            };
            return Err(TaskError::NonFiniteLoss { iteration: it, diagnostic });
        }
        if let (Some(dir), true) = (out_dir, task.snapshot_every > 0 && it % task.snapshot_every.max(1) == 0) {
            snapshots.push(write_snapshot(dir, &format!("snapshot_{it:05}.png"), &eval.outputs[0])?);
        }
        losses.push(eval.report);
        adam_step(&mut values, &eval.grads, &mut state)?;
        params.project(&mut values, &scene);
        let (s, c) = (&mut scene, &mut cameras[0]);
        params.scatter(&values, s, c)?;
    }

    let final_eval = evaluate(&scene, &cameras, &targets, &cfg.loss, &params, precision)?;
    let final_loss = final_eval.report;
    let initial = losses.first().copied().unwrap_or(final_loss);
    let gt_loss = match &ground_truth {
        Some((gs, gc)) => Some(loss_only(gs, gc, &targets, &cfg.loss, precision)?.total),
        None => None,
    };
    let floor = gt_loss.unwrap_or(0.0);
    let span = initial.total - floor;
    let loss_reduction = if span > 0.0 {
        1.0 - (final_loss.total - floor) / span
    } else {
        1.0
    };
    let color_l1_drop = if initial.components.col > 0.0 {
        1.0 - final_loss.components.col / initial.components.col
    } else {
        1.0
    };
    let (mut sh_rel_l2, mut eye_error_ratio, mut material) = (None, None, None);
    if let Some((gs, gc)) = &ground_truth {
        if let (LightingSpec::SphericalHarmonics { coeffs: got }, LightingSpec::SphericalHarmonics { coeffs: want }) =
            (&scene.lighting, &gs.lighting)
        {
            let num: f64 = got.iter().zip(want).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let den: f64 = want.iter().map(|b| b * b).sum::<f64>().sqrt();
            sh_rel_l2 = Some(num / den);
        }
        if params.contains(ParamGroup::CameraEye) {
            eye_error_ratio = Some((cameras[0].eye - gc[0].eye).norm() / gs.mesh.bounding_radius());
        }
        if let (
            LightingSpec::Phong { kd, ks, shininess, .. },
            LightingSpec::Phong {
                kd: k0,
                ks: s0,
                shininess: n0,
                ..
            },
        ) = (&scene.lighting, &gs.lighting)
        {
            material = Some(([*kd, *ks, *shininess], [*k0, *s0, *n0]));
        }
    }
    let metrics = TaskMetrics {
        initial_loss: initial.total,
        final_loss: final_loss.total,
        ground_truth_loss: gt_loss,
        loss_reduction,
        color_l1_drop,
        silhouette_iou: hard_iou(&final_eval.outputs, &targets),
        sh_rel_l2,
        eye_error_ratio,
        material,
    };
    let mut report = OptimizationReport {
        kind,
        groups: params.groups().iter().copied().collect(),
        losses,
        final_loss,
        metrics,
        wall_time: Duration::ZERO,
        snapshots,
        scene,
        cameras,
    };
    if let Some(dir) = out_dir {
        let csv_path = dir.join("loss.csv");
        std::fs::write(&csv_path, report.loss_csv()?).map_err(io_err(&csv_path))?;
        write_snapshot(dir, "final.png", &final_eval.outputs[0])?;
        save_obj(&report.scene.mesh, &dir.join("mesh.obj"))?;
        if let Some(t) = &report.scene.texture {
            save_png(&t.to_image(), &dir.join("texture.png"), BitDepth::Eight)?;
        }
    }
    report.wall_time = start.elapsed();
    if let Some(dir) = out_dir {
        let path = dir.join("report.txt");
        std::fs::write(&path, report.summary()).map_err(io_err(&path))?;
    }
    Ok(report)
}
