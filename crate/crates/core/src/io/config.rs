//! Scene and task configuration (JSON).
//!
//! Every field has a default, so `{}` is a valid document. Parsing fills in
//! all defaults; serializing the result gives the fully resolved config.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::Camera;
use crate::geometry::{unit_sphere, GeometryError, Mesh, Vec2, Vec3, VertexAttributes};
use crate::io::obj::{load_obj, ObjError};
use crate::io::png::{load_png, PngError};
use crate::loss::LossWeights;
use crate::optim::AdamConfig;
use crate::raster::SoftConfig;
use crate::render::{ParamGroup, Scene};
use crate::shading::{LightingSpec, Texture};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("schema error at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("invalid value for `{field}`: {message}")]
    Invalid { field: &'static str, message: String },
    #[error("mesh: {0}")]
    Mesh(#[from] ObjError),
    #[error("texture: {0}")]
    Texture(#[from] PngError),
}

fn invalid(field: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field,
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Single,
    #[default]
    Double,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorName {
    /// Mesh colours if present, otherwise `position`.
    Auto,
    /// Colour from the normalized vertex position.
    Position,
    /// Colours stored in the mesh file.
    Mesh,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ColorSpec {
    Named(ColorName),
    Constant([f64; 3]),
}

impl Default for ColorSpec {
    fn default() -> Self {
        ColorSpec::Named(ColorName::Auto)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum TextureSpec {
    /// Path to an RGB(A) PNG, relative to the config file.
    Png(PathBuf),
    /// Two-colour checkerboard with `cells` squares per side.
    Checker { size: [usize; 2], cells: usize },
    /// Smooth colour ramp over (u, v).
    Ramp { size: [usize; 2] },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraConfig {
    pub eye: [f64; 3],
    pub center: [f64; 3],
    pub up: [f64; 3],
    pub fov_y_deg: f64,
    pub near: f64,
    pub far: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            eye: [0.0, 0.0, 3.0],
            center: [0.0; 3],
            up: [0.0, 1.0, 0.0],
            fov_y_deg: 45.0,
            near: 0.1,
            far: 100.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    /// Vertex positions from silhouettes.
    #[serde(rename = "a", alias = "silhouette")]
    Silhouette,
    #[serde(rename = "b", alias = "vertex_colors")]
    VertexColors,
    #[serde(rename = "c", alias = "texels")]
    Texels,
    #[serde(rename = "d", alias = "uvs")]
    Uvs,
    /// Vertex positions under Lambertian shading.
    #[serde(rename = "e", alias = "positions")]
    Positions,
    #[serde(rename = "f", alias = "camera_eye")]
    CameraEye,
    #[serde(rename = "g", alias = "sh_lighting")]
    ShLighting,
    #[serde(rename = "h", alias = "phong_material")]
    PhongMaterial,
}

impl TaskKind {
    pub fn letter(&self) -> char {
        match self {
            TaskKind::Silhouette => 'a',
            TaskKind::VertexColors => 'b',
            TaskKind::Texels => 'c',
            TaskKind::Uvs => 'd',
            TaskKind::Positions => 'e',
            TaskKind::CameraEye => 'f',
            TaskKind::ShLighting => 'g',
            TaskKind::PhongMaterial => 'h',
        }
    }

    pub fn default_group(&self) -> ParamGroup {
        match self {
            TaskKind::Silhouette | TaskKind::Positions => ParamGroup::VertexPositions,
            TaskKind::VertexColors => ParamGroup::VertexColors,
            TaskKind::Texels => ParamGroup::Texture,
            TaskKind::Uvs => ParamGroup::Uvs,
            TaskKind::CameraEye => ParamGroup::CameraEye,
            TaskKind::ShLighting => ParamGroup::ShCoeffs,
            TaskKind::PhongMaterial => ParamGroup::Material,
        }
    }

    /// Size of the initial perturbation when the config does not set one.
    pub fn default_init_noise(&self) -> f64 {
        match self {
            TaskKind::Silhouette => 0.0,
            TaskKind::VertexColors | TaskKind::Texels => 0.0,
            TaskKind::Uvs => 0.03,
            TaskKind::Positions => 0.04,
            TaskKind::CameraEye => 0.1,
            TaskKind::ShLighting => 0.3,
            TaskKind::PhongMaterial => 0.4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    #[serde(default = "TaskConfig::default_iterations")]
    pub iterations: usize,
    /// Write a snapshot every this many iterations; 0 disables snapshots.
    #[serde(default)]
    pub snapshot_every: usize,
    #[serde(default)]
    pub init_noise: Option<f64>,
    /// Per-axis scale applied to the mesh to make the silhouette target.
    #[serde(default = "TaskConfig::default_target_scale")]
    pub target_scale: [f64; 3],
    /// Groups to optimize; defaults to the task's own group.
    #[serde(default)]
    pub groups: Option<Vec<ParamGroup>>,
    /// RGBA target images, one per view, instead of rendered targets.
    #[serde(default)]
    pub targets: Option<Vec<PathBuf>>,
}

impl TaskConfig {
    fn default_iterations() -> usize {
        500
    }

    fn default_target_scale() -> [f64; 3] {
        [1.3, 0.75, 1.0]
    }

    pub fn new(kind: TaskKind) -> Self {
        Self {
            kind,
            iterations: Self::default_iterations(),
            snapshot_every: 0,
            init_noise: None,
            target_scale: Self::default_target_scale(),
            groups: None,
            targets: None,
        }
    }

    pub fn init_noise(&self) -> f64 {
        self.init_noise.unwrap_or_else(|| self.kind.default_init_noise())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// Template (`icosphere:<level>`) or OBJ path relative to the config file.
    pub mesh: String,
    pub colors: ColorSpec,
    pub texture: Option<TextureSpec>,
    pub shading: LightingSpec,
    pub camera: CameraConfig,
    /// Number of supervision views; extra views orbit the camera centre.
    pub views: usize,
    pub soft: SoftConfig,
    /// Width and height in pixels.
    pub resolution: [usize; 2],
    pub loss: LossWeights,
    pub optimizer: AdamConfig,
    pub task: Option<TaskConfig>,
    pub seed: u64,
    pub precision: Precision,
    /// Rayon worker count; `null` uses the global pool.
    pub workers: Option<usize>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            mesh: "icosphere:2".into(),
            colors: ColorSpec::default(),
            texture: None,
            shading: LightingSpec::None,
            camera: CameraConfig::default(),
            views: 1,
            soft: SoftConfig::default(),
            resolution: [64, 64],
            loss: LossWeights::default(),
            optimizer: AdamConfig::default(),
            task: None,
            seed: 0,
            precision: Precision::Double,
            workers: None,
        }
    }
}

/// Parses and validates a config document.
pub fn parse_scene_str(text: &str) -> Result<SceneConfig, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: SceneConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        ConfigError::Schema {
            path,
            message: e.into_inner().to_string(),
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_scene(path: &Path) -> Result<SceneConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_scene_str(&text)
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let [w, h] = self.resolution;
        if w < 8 || h < 8 {
            return Err(invalid("resolution", format!("must be at least 8x8, got {w}x{h}")));
        }
        if self.views == 0 {
            return Err(invalid("views", "must be at least 1"));
        }
        self.soft.validate().map_err(|e| invalid("soft", e.to_string()))?;
        self.shading.validate().map_err(|e| invalid("shading", e.to_string()))?;
        self.loss.validate().map_err(|e| invalid("loss", e.to_string()))?;
        self.optimizer.validate().map_err(|e| invalid("optimizer", e.to_string()))?;
        self.camera().validate().map_err(|e| invalid("camera", e.to_string()))?;
        if let ColorSpec::Constant(c) = self.colors {
            if c.iter().any(|v| !v.is_finite()) {
                return Err(invalid("colors", "must be finite"));
            }
        }
        match &self.texture {
            Some(TextureSpec::Checker { size, cells }) => {
                if size[0] == 0 || size[1] == 0 || *cells == 0 {
                    return Err(invalid("texture", "checker size and cells must be positive"));
                }
            }
            Some(TextureSpec::Ramp { size }) if size[0] == 0 || size[1] == 0 => {
                return Err(invalid("texture", "ramp size must be positive"));
            }
            _ => {}
        }
        if self.workers == Some(0) {
            return Err(invalid("workers", "must be at least 1"));
        }
        if let Some(t) = &self.task {
            if t.iterations == 0 {
                return Err(invalid("task.iterations", "must be at least 1"));
            }
            if !(t.init_noise() >= 0.0 && t.init_noise().is_finite()) {
                return Err(invalid("task.init_noise", "must be finite and >= 0"));
            }
            if t.target_scale.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
                return Err(invalid("task.target_scale", "must be positive"));
            }
            if matches!(&t.groups, Some(g) if g.is_empty()) {
                return Err(invalid("task.groups", "must name at least one group"));
            }
        }
        Ok(())
    }

    /// The primary camera.
    pub fn camera(&self) -> Camera {
        let c = &self.camera;
        let [w, h] = self.resolution;
        Camera {
            eye: Vec3::from(c.eye),
            center: Vec3::from(c.center),
            up: Vec3::from(c.up),
            fov_y: c.fov_y_deg.to_radians(),
            aspect: w as f64 / h as f64,
            near: c.near,
            far: c.far,
        }
    }

    /// The primary camera followed by `views - 1` cameras at the same distance
    /// and elevation with seeded random azimuths.
    pub fn cameras(&self) -> Vec<Camera> {
        let base = self.camera();
        let mut out = vec![base];
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_0f_u64);
        let axis = base.up.normalize();
        let offset = base.eye - base.center;
        for _ in 1..self.views {
            let angle = rng.gen_range(0.0..2.0 * PI);
            let rot = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
            out.push(Camera {
                eye: base.center + rot * offset,
                ..base
            });
        }
        out
    }

    /// Loads or builds the mesh, texture and lighting described by the config.
    /// Relative paths resolve against `base_dir`.
    pub fn build_scene(&self, base_dir: &Path) -> Result<Scene, ConfigError> {
        let mut mesh = load_mesh(&self.mesh, base_dir)?;
        let texture = match &self.texture {
            None => None,
            Some(spec) => Some(build_texture(spec, base_dir)?),
        };
        let mut attrs = mesh.attributes();
        if texture.is_some() {
            if attrs.uvs.is_none() {
                attrs.uvs = Some(planar_uvs(&mesh));
            }
        } else {
            attrs.colors = Some(match self.colors {
                ColorSpec::Constant(c) => vec![Vec3::from(c); mesh.vertex_count()],
                ColorSpec::Named(ColorName::Position) => position_colors(&mesh),
                ColorSpec::Named(ColorName::Auto) => match mesh.colors() {
                    Some(c) => c.to_vec(),
                    None => position_colors(&mesh),
                },
                ColorSpec::Named(ColorName::Mesh) => mesh
                    .colors()
                    .ok_or_else(|| invalid("colors", "mesh file has no vertex colours"))?
                    .to_vec(),
            });
        }
        mesh = mesh.with_attributes(attrs).map_err(|e| invalid("mesh", e.to_string()))?;
        Ok(Scene {
            mesh,
            texture,
            lighting: self.shading,
            soft: self.soft,
            width: self.resolution[0],
            height: self.resolution[1],
        })
    }

    /// Pretty JSON with every default filled in.
    pub fn resolved_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// `icosphere:<level>` or an OBJ path.
pub fn load_mesh(spec: &str, base_dir: &Path) -> Result<Mesh, ConfigError> {
    if let Some(level) = spec.strip_prefix("icosphere:") {
        let level: u32 = level
            .parse()
            .map_err(|_| invalid("mesh", format!("bad icosphere level `{level}`")))?;
        return unit_sphere(level).map_err(|e: GeometryError| invalid("mesh", e.to_string()));
    }
    let path = base_dir.join(spec);
    Ok(load_obj(&path)?)
}

fn build_texture(spec: &TextureSpec, base_dir: &Path) -> Result<Texture, ConfigError> {
    let tex = match spec {
        TextureSpec::Png(p) => {
            let img = load_png(&base_dir.join(p))?;
            Texture::from_image(&img).map_err(|e| invalid("texture", e.to_string()))?
        }
        TextureSpec::Checker { size, cells } => {
            let [w, h] = *size;
            let a = Vec3::new(0.9, 0.35, 0.2);
            let b = Vec3::new(0.15, 0.45, 0.85);
            let texels = (0..h)
                .flat_map(|i| {
                    (0..w).map(move |j| {
                        let ci = i * cells / h;
                        let cj = j * cells / w;
                        if (ci + cj) % 2 == 0 {
                            a
                        } else {
                            b
                        }
                    })
                })
                .collect();
            Texture::new(w, h, texels).map_err(|e| invalid("texture", e.to_string()))?
        }
        TextureSpec::Ramp { size } => {
            let [w, h] = *size;
            let texels = (0..h)
                .flat_map(|i| {
                    (0..w).map(move |j| {
                        let u = (j as f64 + 0.5) / w as f64;
                        let v = (i as f64 + 0.5) / h as f64;
                        Vec3::new(0.1 + 0.8 * u, 0.1 + 0.8 * v, 0.9 - 0.4 * (u + v))
                    })
                })
                .collect();
            Texture::new(w, h, texels).map_err(|e| invalid("texture", e.to_string()))?
        }
    };
    Ok(tex)
}

fn bounds(mesh: &Mesh) -> (Vec3, Vec3) {
    mesh.vertices().iter().fold(
        (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY)),
        |(lo, hi), v| (lo.inf(v), hi.sup(v)),
    )
}

/// Colours from positions mapped into the unit cube around the mesh.
pub fn position_colors(mesh: &Mesh) -> Vec<Vec3> {
    let (lo, hi) = bounds(mesh);
    let extent = (hi - lo).map(|e| if e > 0.0 { e } else { 1.0 });
    mesh.vertices()
        .iter()
        .map(|v| (v - lo).component_div(&extent) * 0.8 + Vec3::repeat(0.1))
        .collect()
}

/// Front projection onto the xy bounding box, `v` growing downwards.
pub fn planar_uvs(mesh: &Mesh) -> Vec<Vec2> {
    let (lo, hi) = bounds(mesh);
    let ex = if hi.x > lo.x { hi.x - lo.x } else { 1.0 };
    let ey = if hi.y > lo.y { hi.y - lo.y } else { 1.0 };
    mesh.vertices()
        .iter()
        .map(|v| Vec2::new((v.x - lo.x) / ex, (hi.y - v.y) / ey))
        .collect()
}

/// Vertex attributes with colours replaced.
pub fn with_colors(mesh: &Mesh, colors: Vec<Vec3>) -> Result<Mesh, GeometryError> {
    mesh.with_attributes(VertexAttributes {
        colors: Some(colors),
        ..mesh.attributes()
    })
}
