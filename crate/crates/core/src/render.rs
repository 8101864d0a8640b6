//! Full pipeline: vertex stage, rasterization, fragment shading, and the
//! reverse pass through all three.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{project_backward, project_vertices, Camera, CameraError, VertexStageTape};
use crate::geometry::{vertex_normals_backward, vertex_normals_with_tape, Mesh, Vec2, Vec3, VertexNormalsTape};
use crate::image::Image;
use crate::raster::{rasterize, rasterize_backward, FrameBuffers, RasterError, RasterTape, SoftConfig, VertexAttrs};
use crate::shading::{
    sample_texture, sample_texture_backward, shade, shading_backward, LightGrad, LightingSpec, ShadeError,
    ShadeInputs, ShadeTape, Texture, TextureTape,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RenderError {
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Shade(#[from] ShadeError),
    #[error("scene is missing {0}")]
    MissingAttribute(&'static str),
    #[error("gradient buffers do not match the render tape")]
    TapeMismatch,
}

/// An optimizable parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    VertexPositions,
    VertexColors,
    Uvs,
    Texture,
    LightDir,
    ShCoeffs,
    /// `kd`, plus `ks` and shininess under Phong.
    Material,
    CameraEye,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 8] = [
        ParamGroup::VertexPositions,
        ParamGroup::VertexColors,
        ParamGroup::Uvs,
        ParamGroup::Texture,
        ParamGroup::LightDir,
        ParamGroup::ShCoeffs,
        ParamGroup::Material,
        ParamGroup::CameraEye,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ParamGroup::VertexPositions => "vertex_positions",
            ParamGroup::VertexColors => "vertex_colors",
            ParamGroup::Uvs => "uvs",
            ParamGroup::Texture => "texture",
            ParamGroup::LightDir => "light_dir",
            ParamGroup::ShCoeffs => "sh_coeffs",
            ParamGroup::Material => "material",
            ParamGroup::CameraEye => "camera_eye",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ParamGroup {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ParamGroup::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = ParamGroup::ALL.iter().map(|g| g.name()).collect();
                format!("unknown parameter group `{s}` (expected one of {})", names.join(", "))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub mesh: Mesh,
    /// When set, base colour comes from the mesh uvs and this texture;
    /// otherwise from vertex colours.
    pub texture: Option<Texture>,
    pub lighting: LightingSpec,
    pub soft: SoftConfig,
    pub width: usize,
    pub height: usize,
}

impl Scene {
    /// Checks that the mesh carries what the base-colour and lighting models need.
    pub fn validate(&self) -> Result<(), RenderError> {
        if self.texture.is_some() {
            if self.mesh.uvs().is_none() {
                return Err(RenderError::MissingAttribute("uvs"));
            }
        } else if self.mesh.colors().is_none() {
            return Err(RenderError::MissingAttribute("vertex colors"));
        }
        self.lighting.check_renderable()?;
        self.soft.validate()?;
        if self.width == 0 || self.height == 0 {
            return Err(RasterError::ZeroResolution(self.width, self.height).into());
        }
        Ok(())
    }

    fn base_channels(&self) -> usize {
        if self.texture.is_some() {
            2
        } else {
            3
        }
    }
}

/// Channel offsets into the rasterized attribute image.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Layout {
    base: usize,
    normals: Option<usize>,
    positions: Option<usize>,
    channels: usize,
}

impl Layout {
    fn for_scene(scene: &Scene) -> Self {
        let base = scene.base_channels();
        let mut channels = base;
        let normals = scene.lighting.needs_normals().then(|| {
            channels += 3;
            channels - 3
        });
        let positions = scene.lighting.needs_positions().then(|| {
            channels += 3;
            channels - 3
        });
        Self {
            base,
            normals,
            positions,
            channels,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RenderTape {
    layout: Layout,
    vertex: VertexStageTape,
    /// Present when normals are derived from geometry.
    normals: Option<VertexNormalsTape>,
    raster: RasterTape,
    texture: Option<TextureTape>,
    shade: ShadeTape,
    vertex_count: usize,
    texel_count: usize,
}

impl RenderTape {
    pub fn raster(&self) -> &RasterTape {
        &self.raster
    }

    pub fn shade(&self) -> &ShadeTape {
        &self.shade
    }

    pub fn texture(&self) -> Option<&TextureTape> {
        self.texture.as_ref()
    }
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub color: Image,
    pub alpha: Image,
    pub frame: FrameBuffers,
}

pub fn forward_render(scene: &Scene, camera: &Camera) -> Result<(RenderOutput, RenderTape), RenderError> {
    scene.validate()?;
    let mesh = &scene.mesh;
    let layout = Layout::for_scene(scene);
    let (screen, vtape) = project_vertices(mesh, camera)?;

    let n = mesh.vertex_count();
    let (normals, ntape) = if layout.normals.is_some() {
        match mesh.normals() {
            Some(stored) => (stored.to_vec(), None),
            None => {
                let (normals, _, tape) = vertex_normals_with_tape(mesh);
                (normals, Some(tape))
            }
        }
    } else {
        (Vec::new(), None)
    };

    let mut data = Vec::with_capacity(n * layout.channels);
    for v in 0..n {
        match scene.texture {
            Some(_) => data.extend_from_slice(mesh.uvs().unwrap()[v].as_slice()),
            None => data.extend_from_slice(mesh.colors().unwrap()[v].as_slice()),
        }
        if layout.normals.is_some() {
            data.extend_from_slice(normals[v].as_slice());
        }
        if layout.positions.is_some() {
            data.extend_from_slice(mesh.vertices()[v].as_slice());
        }
    }
    let attrs = VertexAttrs::new(layout.channels, data);
    let (frame, rtape) = rasterize(&screen, mesh.faces(), &attrs, &scene.soft, scene.width, scene.height)?;
    let coverage = frame.coverage_mask();

    let (base, ttape) = match &scene.texture {
        Some(tex) => {
            let uv = frame.attr_image.channel_slice(0, 2);
            let (img, tape) = sample_texture(tex, &uv, &coverage)?;
            (img, Some(tape))
        }
        None => (frame.attr_image.channel_slice(0, 3), None),
    };
    let normal_img = layout.normals.map(|o| frame.attr_image.channel_slice(o, 3));
    let position_img = layout.positions.map(|o| frame.attr_image.channel_slice(o, 3));
    let inputs = ShadeInputs {
        base: &base,
        normals: normal_img.as_ref(),
        positions: position_img.as_ref(),
        coverage: &coverage,
        eye: camera.eye,
    };
    let (color, stape) = shade(&inputs, &scene.lighting)?;
    let alpha = frame.alpha.clone();
    let tape = RenderTape {
        layout,
        vertex: vtape,
        normals: ntape,
        raster: rtape,
        texture: ttape,
        shade: stape,
        vertex_count: n,
        texel_count: scene.texture.as_ref().map_or(0, |t| t.texels().len()),
    };
    Ok((RenderOutput { color, alpha, frame }, tape))
}

/// Gradients of a scalar loss, one buffer per enabled group.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientSet {
    pub vertex_positions: Option<Vec<Vec3>>,
    pub vertex_colors: Option<Vec<Vec3>>,
    pub uvs: Option<Vec<Vec2>>,
    pub texture: Option<Vec<Vec3>>,
    pub light: Option<LightGrad>,
    pub camera_eye: Option<Vec3>,
}

fn add_into<T: std::ops::AddAssign + Copy>(dst: &mut Option<Vec<T>>, src: Option<Vec<T>>) {
    match (dst.as_mut(), src) {
        (Some(d), Some(s)) => d.iter_mut().zip(s).for_each(|(a, b)| *a += b),
        (None, Some(s)) => *dst = Some(s),
        _ => {}
    }
}

impl GradientSet {
    /// Sums `other` into `self`.
    pub fn accumulate(&mut self, other: GradientSet) {
        add_into(&mut self.vertex_positions, other.vertex_positions);
        add_into(&mut self.vertex_colors, other.vertex_colors);
        add_into(&mut self.uvs, other.uvs);
        add_into(&mut self.texture, other.texture);
        if let Some(o) = other.light {
            let l = self.light.get_or_insert_with(LightGrad::default);
            l.light_dir += o.light_dir;
            l.kd += o.kd;
            l.ks += o.ks;
            l.shininess += o.shininess;
            for (a, b) in l.sh.iter_mut().zip(o.sh) {
                *a += b;
            }
        }
        if let Some(o) = other.camera_eye {
            *self.camera_eye.get_or_insert_with(Vec3::zeros) += o;
        }
    }

    pub fn scale(&mut self, s: f64) {
        let scale3 = |v: &mut Option<Vec<Vec3>>| v.iter_mut().flatten().for_each(|x| *x *= s);
        scale3(&mut self.vertex_positions);
        scale3(&mut self.vertex_colors);
        scale3(&mut self.texture);
        self.uvs.iter_mut().flatten().for_each(|x| *x *= s);
        if let Some(l) = self.light.as_mut() {
            l.light_dir *= s;
            l.kd *= s;
            l.ks *= s;
            l.shininess *= s;
            l.sh.iter_mut().for_each(|x| *x *= s);
        }
        if let Some(e) = self.camera_eye.as_mut() {
            *e *= s;
        }
    }
}

fn needs_light(groups: &BTreeSet<ParamGroup>) -> bool {
    [ParamGroup::LightDir, ParamGroup::ShCoeffs, ParamGroup::Material]
        .iter()
        .any(|g| groups.contains(g))
}

/// Reverse pass of [`forward_render`] restricted to `groups`.
pub fn backward_render(
    grad_color: &Image,
    grad_alpha: &Image,
    tape: &RenderTape,
    groups: &BTreeSet<ParamGroup>,
) -> Result<GradientSet, RenderError> {
    let (w, h) = tape.raster.resolution();
    if grad_color.shape() != (w, h, 3) || grad_alpha.shape() != (w, h, 1) {
        return Err(RenderError::TapeMismatch);
    }
    let want = |g: ParamGroup| groups.contains(&g);
    let geometric = want(ParamGroup::VertexPositions) || want(ParamGroup::CameraEye);

    let sg = shading_backward(grad_color, &tape.shade)?;
    let layout = tape.layout;
    let mut out = GradientSet::default();
    if needs_light(groups) {
        out.light = Some(sg.light);
    }

    let mut texel_grad = None;
    let mut g_attr = Image::zeros(w, h, layout.channels);
    match &tape.texture {
        Some(ttape) => {
            let (gt, guv) = sample_texture_backward(&sg.base, ttape)?;
            texel_grad = Some(gt);
            for i in 0..w * h {
                g_attr.pixel_mut(i)[..2].copy_from_slice(guv.pixel(i));
            }
        }
        None => {
            for i in 0..w * h {
                g_attr.pixel_mut(i)[..3].copy_from_slice(sg.base.pixel(i));
            }
        }
    }
    if want(ParamGroup::Texture) {
        out.texture = Some(texel_grad.unwrap_or_else(|| vec![Vec3::zeros(); tape.texel_count]));
    }
    for (offset, img) in [(layout.normals, &sg.normals), (layout.positions, &sg.positions)] {
        if let (Some(o), Some(img)) = (offset, img) {
            for i in 0..w * h {
                g_attr.pixel_mut(i)[o..o + 3].copy_from_slice(img.pixel(i));
            }
        }
    }
    let zero_alpha;
    let alpha_for_raster = if geometric {
        grad_alpha
    } else {
        zero_alpha = Image::zeros(w, h, 1);
        &zero_alpha
    };
    let rg = rasterize_backward(&g_attr, alpha_for_raster, &tape.raster)?;

    let n = tape.vertex_count;
    let c = layout.channels;
    let attr3 = |v: usize, o: usize| Vec3::new(rg.attrs[v * c + o], rg.attrs[v * c + o + 1], rg.attrs[v * c + o + 2]);
    if tape.texture.is_some() {
        if want(ParamGroup::Uvs) {
            out.uvs = Some((0..n).map(|v| Vec2::new(rg.attrs[v * c], rg.attrs[v * c + 1])).collect());
        }
    } else if want(ParamGroup::VertexColors) {
        out.vertex_colors = Some((0..n).map(|v| attr3(v, 0)).collect());
    }

    if geometric {
        let (mut gv, g_eye) = project_backward(&rg.screen, &vec![0.0; n], &tape.vertex)?;
        if let (Some(o), Some(ntape)) = (layout.normals, tape.normals.as_ref()) {
            let gn: Vec<Vec3> = (0..n).map(|v| attr3(v, o)).collect();
            for (a, b) in gv.iter_mut().zip(vertex_normals_backward(&gn, ntape)) {
                *a += b;
            }
        }
        if let Some(o) = layout.positions {
            for (v, a) in gv.iter_mut().enumerate() {
                *a += attr3(v, o);
            }
        }
        if want(ParamGroup::VertexPositions) {
            out.vertex_positions = Some(gv);
        }
        if want(ParamGroup::CameraEye) {
            out.camera_eye = Some(g_eye + sg.eye);
        }
    }
    Ok(out)
}
