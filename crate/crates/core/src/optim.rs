//! Parameter groups as flat vectors and the Adam update.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::Camera;
use crate::geometry::{GeometryError, Vec2, Vec3, VertexAttributes};
use crate::render::{GradientSet, ParamGroup, Scene};
use crate::shading::{LightingSpec, Texture};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("no parameter group is enabled")]
    NoGroups,
    #[error("group {group} does not apply to this scene: {reason}")]
    GroupMismatch { group: ParamGroup, reason: &'static str },
    #[error("group {group}: {got} values, expected {expected}")]
    ShapeMismatch {
        group: ParamGroup,
        got: usize,
        expected: usize,
    },
    #[error("gradient for group {0} is not finite")]
    NonFiniteGradient(ParamGroup),
    #[error("invalid optimizer setting: {0}")]
    InvalidHyperparameter(&'static str),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type FlatParams = BTreeMap<ParamGroup, Vec<f64>>;

/// The enabled parameter groups of an optimization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSet {
    groups: BTreeSet<ParamGroup>,
}

fn flat3(v: &[Vec3]) -> Vec<f64> {
    v.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
}

fn unflat3(v: &[f64]) -> Vec<Vec3> {
    v.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect()
}

impl ParamSet {
    pub fn new(groups: impl IntoIterator<Item = ParamGroup>) -> Result<Self, OptimError> {
        let groups: BTreeSet<_> = groups.into_iter().collect();
        if groups.is_empty() {
            return Err(OptimError::NoGroups);
        }
        Ok(Self { groups })
    }

    pub fn groups(&self) -> &BTreeSet<ParamGroup> {
        &self.groups
    }

    pub fn contains(&self, g: ParamGroup) -> bool {
        self.groups.contains(&g)
    }

    /// Rejects groups the scene has no storage for.
    pub fn check_scene(&self, scene: &Scene) -> Result<(), OptimError> {
        for &group in &self.groups {
            let reason = match group {
                ParamGroup::VertexPositions | ParamGroup::CameraEye => None,
                ParamGroup::VertexColors => scene.texture.is_some().then_some("scene is textured"),
                ParamGroup::Uvs | ParamGroup::Texture => scene.texture.is_none().then_some("scene has no texture"),
                ParamGroup::LightDir | ParamGroup::Material => {
                    (!matches!(scene.lighting, LightingSpec::Lambertian { .. } | LightingSpec::Phong { .. }))
                        .then_some("lighting model has no light direction or material")
                }
                ParamGroup::ShCoeffs => (!matches!(scene.lighting, LightingSpec::SphericalHarmonics { .. }))
                    .then_some("lighting model is not spherical harmonics"),
            };
            if let Some(reason) = reason {
                return Err(OptimError::GroupMismatch { group, reason });
            }
        }
        Ok(())
    }

    /// Current values of every enabled group.
    pub fn gather(&self, scene: &Scene, camera: &Camera) -> FlatParams {
        self.groups
            .iter()
            .map(|&g| (g, gather_group(g, scene, camera)))
            .collect()
    }

    /// Writes `values` back into the scene and camera.
    pub fn scatter(&self, values: &FlatParams, scene: &mut Scene, camera: &mut Camera) -> Result<(), OptimError> {
        for &group in &self.groups {
            let v = values.get(&group).ok_or(OptimError::ShapeMismatch {
                group,
                got: 0,
                expected: gather_group(group, scene, camera).len(),
            })?;
            let expected = gather_group(group, scene, camera).len();
            if v.len() != expected {
                return Err(OptimError::ShapeMismatch {
                    group,
                    got: v.len(),
                    expected,
                });
            }
            match group {
                ParamGroup::VertexPositions => scene.mesh = scene.mesh.with_vertices(unflat3(v))?,
                ParamGroup::VertexColors => {
                    let attrs = VertexAttributes {
                        colors: Some(unflat3(v)),
                        ..scene.mesh.attributes()
                    };
                    scene.mesh = scene.mesh.with_attributes(attrs)?;
                }
                ParamGroup::Uvs => {
                    let uvs = v.chunks_exact(2).map(|c| Vec2::new(c[0], c[1])).collect();
                    let attrs = VertexAttributes {
                        uvs: Some(uvs),
                        ..scene.mesh.attributes()
                    };
                    scene.mesh = scene.mesh.with_attributes(attrs)?;
                }
                ParamGroup::Texture => {
                    let t = scene.texture.as_ref().unwrap();
                    scene.texture = Some(Texture::new(t.width(), t.height(), unflat3(v)).map_err(|_| {
                        OptimError::GroupMismatch {
                            group,
                            reason: "texels are not finite",
                        }
                    })?);
                }
                ParamGroup::LightDir => match &mut scene.lighting {
                    LightingSpec::Lambertian { light_dir, .. } | LightingSpec::Phong { light_dir, .. } => {
                        *light_dir = Vec3::new(v[0], v[1], v[2]);
                    }
                    _ => unreachable!("checked by check_scene"),
                },
                ParamGroup::ShCoeffs => {
                    if let LightingSpec::SphericalHarmonics { coeffs } = &mut scene.lighting {
                        coeffs.copy_from_slice(v);
                    }
                }
                ParamGroup::Material => match &mut scene.lighting {
                    LightingSpec::Lambertian { kd, .. } => *kd = v[0],
                    LightingSpec::Phong { kd, ks, shininess, .. } => {
                        *kd = v[0];
                        *ks = v[1];
                        *shininess = v[2];
                    }
                    _ => unreachable!("checked by check_scene"),
                },
                ParamGroup::CameraEye => camera.eye = Vec3::new(v[0], v[1], v[2]),
            }
        }
        Ok(())
    }

    /// Flattens gradients in the same layout as [`ParamSet::gather`].
    pub fn flatten_grads(&self, grads: &GradientSet, scene: &Scene) -> FlatParams {
        self.groups
            .iter()
            .map(|&g| {
                let flat = match g {
                    ParamGroup::VertexPositions => grads.vertex_positions.as_deref().map(flat3),
                    ParamGroup::VertexColors => grads.vertex_colors.as_deref().map(flat3),
                    ParamGroup::Uvs => grads
                        .uvs
                        .as_ref()
                        .map(|u| u.iter().flat_map(|p| [p.x, p.y]).collect()),
                    ParamGroup::Texture => grads.texture.as_deref().map(flat3),
                    ParamGroup::LightDir => grads.light.map(|l| l.light_dir.as_slice().to_vec()),
                    ParamGroup::ShCoeffs => grads.light.map(|l| l.sh.to_vec()),
                    ParamGroup::Material => grads.light.map(|l| match scene.lighting {
                        LightingSpec::Phong { .. } => vec![l.kd, l.ks, l.shininess],
                        _ => vec![l.kd],
                    }),
                    ParamGroup::CameraEye => grads.camera_eye.map(|e| e.as_slice().to_vec()),
                };
                (g, flat.unwrap_or_default())
            })
            .collect()
    }

    /// Projects values back onto their feasible sets: unit light direction,
    /// non-negative reflectances, shininess of at least one.
    pub fn project(&self, values: &mut FlatParams, scene: &Scene) {
        if let Some(d) = values.get_mut(&ParamGroup::LightDir) {
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            if n > 0.0 {
                d.iter_mut().for_each(|x| *x /= n);
            }
        }
        if let Some(m) = values.get_mut(&ParamGroup::Material) {
            m[0] = m[0].max(0.0);
            if matches!(scene.lighting, LightingSpec::Phong { .. }) {
                m[1] = m[1].max(0.0);
                m[2] = m[2].max(1.0);
            }
        }
    }
}

fn gather_group(g: ParamGroup, scene: &Scene, camera: &Camera) -> Vec<f64> {
    match g {
        ParamGroup::VertexPositions => flat3(scene.mesh.vertices()),
        ParamGroup::VertexColors => scene.mesh.colors().map(flat3).unwrap_or_default(),
        ParamGroup::Uvs => scene
            .mesh
            .uvs()
            .map(|u| u.iter().flat_map(|p| [p.x, p.y]).collect())
            .unwrap_or_default(),
        ParamGroup::Texture => scene.texture.as_ref().map(|t| flat3(t.texels())).unwrap_or_default(),
        ParamGroup::LightDir => match scene.lighting {
            LightingSpec::Lambertian { light_dir, .. } | LightingSpec::Phong { light_dir, .. } => {
                light_dir.as_slice().to_vec()
            }
            _ => Vec::new(),
        },
        ParamGroup::ShCoeffs => match scene.lighting {
            LightingSpec::SphericalHarmonics { coeffs } => coeffs.to_vec(),
            _ => Vec::new(),
        },
        ParamGroup::Material => match scene.lighting {
            LightingSpec::Lambertian { kd, .. } => vec![kd],
            LightingSpec::Phong { kd, ks, shininess, .. } => vec![kd, ks, shininess],
            _ => Vec::new(),
        },
        ParamGroup::CameraEye => camera.eye.as_slice().to_vec(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(OptimError::InvalidHyperparameter("lr must be positive"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(OptimError::InvalidHyperparameter("betas must be in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(OptimError::InvalidHyperparameter("eps must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: FlatParams,
    v: FlatParams,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

/// One bias-corrected Adam update of every group in `params`.
pub fn adam_step(params: &mut FlatParams, grads: &FlatParams, state: &mut AdamState) -> Result<(), OptimError> {
    for (&group, p) in params.iter() {
        let g = grads.get(&group).ok_or(OptimError::ShapeMismatch {
            group,
            got: 0,
            expected: p.len(),
        })?;
        if g.len() != p.len() {
            return Err(OptimError::ShapeMismatch {
                group,
                got: g.len(),
                expected: p.len(),
            });
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(OptimError::NonFiniteGradient(group));
        }
    }
    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (&group, p) in params.iter_mut() {
        let g = &grads[&group];
        let m = state.m.entry(group).or_insert_with(|| vec![0.0; p.len()]);
        let v = state.v.entry(group).or_insert_with(|| vec![0.0; p.len()]);
        for i in 0..p.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            p[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::unit_sphere;
    use crate::raster::SoftConfig;

    fn flat(g: ParamGroup, v: Vec<f64>) -> FlatParams {
        BTreeMap::from([(g, v)])
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = flat(ParamGroup::VertexColors, vec![0.1, 0.2, 0.3]);
        let before = p.clone();
        let mut s = AdamState::new(AdamConfig::default());
        for _ in 0..3 {
            adam_step(&mut p, &flat(ParamGroup::VertexColors, vec![0.0; 3]), &mut s).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = AdamConfig::default();
        let mut p = flat(ParamGroup::ShCoeffs, vec![1.0, 1.0, 1.0]);
        let mut s = AdamState::new(cfg);
        adam_step(&mut p, &flat(ParamGroup::ShCoeffs, vec![3.0, -0.02, 1e3]), &mut s).unwrap();
        let p = &p[&ParamGroup::ShCoeffs];
        assert!((p[0] - (1.0 - cfg.lr)).abs() < 1e-9);
        assert!((p[1] - (1.0 + cfg.lr)).abs() < 1e-9);
        assert!((p[2] - (1.0 - cfg.lr)).abs() < 1e-9);
    }

    #[test]
    fn runs_are_bit_identical() {
        let run = || {
            let mut p = flat(ParamGroup::VertexPositions, vec![0.5; 6]);
            let mut s = AdamState::new(AdamConfig { lr: 0.01, ..Default::default() });
            for k in 0..50 {
                let g: Vec<f64> = p[&ParamGroup::VertexPositions]
                    .iter()
                    .enumerate()
                    .map(|(i, x)| (x - i as f64 * 0.1) * (1.0 + k as f64 * 0.01))
                    .collect();
                adam_step(&mut p, &flat(ParamGroup::VertexPositions, g), &mut s).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn errors() {
        let mut s = AdamState::new(AdamConfig::default());
        let mut p = flat(ParamGroup::Uvs, vec![0.0; 4]);
        assert!(matches!(
            adam_step(&mut p, &flat(ParamGroup::Uvs, vec![0.0; 3]), &mut s),
            Err(OptimError::ShapeMismatch { .. })
        ));
        assert_eq!(
            adam_step(&mut p, &flat(ParamGroup::Uvs, vec![f64::NAN, 0.0, 0.0, 0.0]), &mut s),
            Err(OptimError::NonFiniteGradient(ParamGroup::Uvs))
        );
        assert_eq!(s.step, 0);
        assert_eq!(ParamSet::new([]), Err(OptimError::NoGroups));
    }

    fn lit_scene() -> (Scene, Camera) {
        let mesh = unit_sphere(1).unwrap();
        let colors = vec![Vec3::new(0.5, 0.5, 0.5); mesh.vertex_count()];
        let mesh = mesh
            .with_attributes(VertexAttributes {
                colors: Some(colors),
                ..Default::default()
            })
            .unwrap();
        let scene = Scene {
            mesh,
            texture: None,
            lighting: LightingSpec::Phong {
                kd: 0.8,
                ks: 0.2,
                shininess: 5.0,
                light_dir: Vec3::z(),
            },
            soft: SoftConfig::default(),
            width: 16,
            height: 16,
        };
        let cam = Camera::look_at(Vec3::new(0.0, 0.0, 3.0), Vec3::zeros(), Vec3::y(), 0.8, 1.0);
        (scene, cam)
    }

    #[test]
    fn gather_scatter_round_trip_and_projection() {
        let (mut scene, mut cam) = lit_scene();
        let ps = ParamSet::new([
            ParamGroup::VertexPositions,
            ParamGroup::VertexColors,
            ParamGroup::LightDir,
            ParamGroup::Material,
            ParamGroup::CameraEye,
        ])
        .unwrap();
        ps.check_scene(&scene).unwrap();
        let mut values = ps.gather(&scene, &cam);
        let before = (scene.clone(), cam);
        ps.scatter(&values, &mut scene, &mut cam).unwrap();
        assert_eq!((scene.clone(), cam), before);

        values.insert(ParamGroup::LightDir, vec![0.0, 3.0, 4.0]);
        values.insert(ParamGroup::Material, vec![-0.2, -1.0, 0.5]);
        ps.project(&mut values, &scene);
        assert_eq!(values[&ParamGroup::LightDir], vec![0.0, 0.6, 0.8]);
        assert_eq!(values[&ParamGroup::Material], vec![0.0, 0.0, 1.0]);
        ps.scatter(&values, &mut scene, &mut cam).unwrap();
        assert!(matches!(scene.lighting, LightingSpec::Phong { shininess, .. } if shininess == 1.0));

        let bad = ParamSet::new([ParamGroup::ShCoeffs]).unwrap();
        assert!(matches!(bad.check_scene(&scene), Err(OptimError::GroupMismatch { .. })));
        let bad = ParamSet::new([ParamGroup::Texture]).unwrap();
        assert!(bad.check_scene(&scene).is_err());
    }
}
