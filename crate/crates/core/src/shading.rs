//! Fragment stage: base colour from vertex colours or a texture, lighting
//! factors, and the composition `I = I_l * I_c + I_s`.
//!
//! Lighting is monochrome (light colour 1, no ambient term) and dot products
//! are clamped at zero. Interpolated normals are renormalized per pixel and the
//! light direction is normalized in-graph, so gradients are taken w.r.t. the
//! raw vectors.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{normalize_backward, Vec3};
use crate::image::Image;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShadeError {
    #[error("image shape {got:?} does not match {expected:?}")]
    ShapeMismatch {
        got: (usize, usize, usize),
        expected: (usize, usize, usize),
    },
    #[error("operation requires {expected} lighting")]
    WrongSpecVariant { expected: &'static str },
    #[error("invalid texture: {0}")]
    InvalidTexture(&'static str),
    #[error("invalid lighting parameters: {0}")]
    InvalidLighting(String),
    #[error("tape does not match the gradient buffers")]
    TapeMismatch,
}

/// RGB texture, row-major with row 0 at `v = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Texture {
    width: usize,
    height: usize,
    texels: Vec<Vec3>,
}

impl Texture {
    pub fn new(width: usize, height: usize, texels: Vec<Vec3>) -> Result<Self, ShadeError> {
        if width == 0 || height == 0 {
            return Err(ShadeError::InvalidTexture("dimensions must be at least 1"));
        }
        if texels.len() != width * height {
            return Err(ShadeError::InvalidTexture("texel count does not match dimensions"));
        }
        if texels.iter().any(|t| !t.iter().all(|c| c.is_finite())) {
            return Err(ShadeError::InvalidTexture("texels must be finite"));
        }
        Ok(Self {
            width,
            height,
            texels,
        })
    }

    pub fn filled(width: usize, height: usize, value: Vec3) -> Self {
        Self {
            width,
            height,
            texels: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn texels(&self) -> &[Vec3] {
        &self.texels
    }

    pub fn texel(&self, row: usize, col: usize) -> Vec3 {
        self.texels[row * self.width + col]
    }

    pub fn to_image(&self) -> Image {
        let data = self.texels.iter().flat_map(|t| [t.x, t.y, t.z]).collect();
        Image::from_vec(self.width, self.height, 3, data).expect("texel layout")
    }

    pub fn from_image(image: &Image) -> Result<Self, ShadeError> {
        if image.channels() < 3 {
            return Err(ShadeError::InvalidTexture("texture image needs RGB channels"));
        }
        let texels = (0..image.pixel_count())
            .map(|i| {
                let p = image.pixel(i);
                Vec3::new(p[0], p[1], p[2])
            })
            .collect();
        Self::new(image.width(), image.height(), texels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case", deny_unknown_fields)]
pub enum LightingSpec {
    None,
    Lambertian {
        kd: f64,
        light_dir: Vec3,
    },
    Phong {
        kd: f64,
        ks: f64,
        shininess: f64,
        light_dir: Vec3,
    },
    #[serde(rename = "sh")]
    SphericalHarmonics { coeffs: [f64; 9] },
}

impl LightingSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LightingSpec::None => "none",
            LightingSpec::Lambertian { .. } => "lambertian",
            LightingSpec::Phong { .. } => "phong",
            LightingSpec::SphericalHarmonics { .. } => "sh",
        }
    }

    /// Checks a user-supplied model: everything [`LightingSpec::check_renderable`]
    /// checks, plus a unit light direction.
    pub fn validate(&self) -> Result<(), ShadeError> {
        self.check_renderable()?;
        match self {
            LightingSpec::Lambertian { light_dir, .. } | LightingSpec::Phong { light_dir, .. }
                if (light_dir.norm() - 1.0).abs() > 1e-6 =>
            {
                Err(ShadeError::InvalidLighting("light_dir must be a unit vector".into()))
            }
            _ => Ok(()),
        }
    }

    /// The weaker condition the renderer needs. The light direction only has
    /// to be finite and non-zero since it is normalized before use.
    pub fn check_renderable(&self) -> Result<(), ShadeError> {
        let bad = |m: String| Err(ShadeError::InvalidLighting(m));
        let dir_ok = |d: &Vec3| d.iter().all(|x| x.is_finite()) && d.norm() > 0.0;
        match self {
            LightingSpec::None => Ok(()),
            LightingSpec::Lambertian { kd, light_dir } => {
                if !(*kd >= 0.0 && kd.is_finite()) {
                    return bad(format!("kd must be >= 0, got {kd}"));
                }
                if !dir_ok(light_dir) {
                    return bad("light_dir must be finite and non-zero".into());
                }
                Ok(())
            }
            LightingSpec::Phong {
                kd,
                ks,
                shininess,
                light_dir,
            } => {
                if !(*kd >= 0.0 && *ks >= 0.0 && kd.is_finite() && ks.is_finite()) {
                    return bad(format!("kd and ks must be >= 0, got {kd}, {ks}"));
                }
                if !(*shininess >= 1.0 && shininess.is_finite()) {
                    return bad(format!("shininess must be >= 1, got {shininess}"));
                }
                if !dir_ok(light_dir) {
                    return bad("light_dir must be finite and non-zero".into());
                }
                Ok(())
            }
            LightingSpec::SphericalHarmonics { coeffs } => {
                if coeffs.iter().all(|c| c.is_finite()) {
                    Ok(())
                } else {
                    bad("coefficients must be finite".into())
                }
            }
        }
    }

    pub fn needs_normals(&self) -> bool {
        !matches!(self, LightingSpec::None)
    }

    pub fn needs_positions(&self) -> bool {
        matches!(self, LightingSpec::Phong { .. })
    }
}

pub const SH_C0: f64 = 0.282095;
pub const SH_C1: f64 = 0.488603;
pub const SH_C2: f64 = 1.092548;
pub const SH_C3: f64 = 0.315392;
pub const SH_C4: f64 = 0.546274;

/// Real spherical harmonics for bands 0..=2, ordered (l, m) = (0,0), (1,-1),
/// (1,0), (1,1), (2,-2), (2,-1), (2,0), (2,1), (2,2).
pub fn sh_basis(n: &Vec3) -> [f64; 9] {
    let (x, y, z) = (n.x, n.y, n.z);
    [
        SH_C0,
        SH_C1 * y,
        SH_C1 * z,
        SH_C1 * x,
        SH_C2 * x * y,
        SH_C2 * y * z,
        SH_C3 * (3.0 * z * z - 1.0),
        SH_C2 * x * z,
        SH_C4 * (x * x - y * y),
    ]
}

/// `sum_i g_i * grad Y_i(n)`
fn sh_basis_backward(n: &Vec3, g: &[f64; 9]) -> Vec3 {
    let (x, y, z) = (n.x, n.y, n.z);
    Vec3::new(
        SH_C1 * g[3] + SH_C2 * (g[4] * y + g[7] * z) + SH_C4 * g[8] * 2.0 * x,
        SH_C1 * g[1] + SH_C2 * (g[4] * x + g[5] * z) - SH_C4 * g[8] * 2.0 * y,
        SH_C1 * g[2] + SH_C2 * (g[5] * y + g[7] * x) + SH_C3 * g[6] * 6.0 * z,
    )
}

fn check_shape(img: &Image, expected: (usize, usize, usize)) -> Result<(), ShadeError> {
    if img.shape() == expected {
        Ok(())
    } else {
        Err(ShadeError::ShapeMismatch {
            got: img.shape(),
            expected,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Bilinear {
    rows: [usize; 2],
    cols: [usize; 2],
    fx: f64,
    fy: f64,
    /// Set when the coordinate was clamped to [0, 1].
    u_clamped: bool,
    v_clamped: bool,
}

impl Bilinear {
    fn new(u: f64, v: f64, width: usize, height: usize) -> Self {
        let axis = |t: f64, size: usize| -> (usize, usize, f64, bool) {
            let clamped = !(0.0..=1.0).contains(&t);
            let x = t.clamp(0.0, 1.0) * size as f64 - 0.5;
            let i0 = x.floor();
            let f = x - i0;
            let last = (size - 1) as f64;
            let a = i0.clamp(0.0, last) as usize;
            let b = (i0 + 1.0).clamp(0.0, last) as usize;
            (a, b, f, clamped)
        };
        let (c0, c1, fx, uc) = axis(u, width);
        let (r0, r1, fy, vc) = axis(v, height);
        Self {
            rows: [r0, r1],
            cols: [c0, c1],
            fx,
            fy,
            u_clamped: uc,
            v_clamped: vc,
        }
    }

    fn cell(&self) -> [usize; 6] {
        [
            self.rows[0],
            self.rows[1],
            self.cols[0],
            self.cols[1],
            self.u_clamped as usize,
            self.v_clamped as usize,
        ]
    }

    fn weights(&self) -> [(usize, usize, f64); 4] {
        let (fx, fy) = (self.fx, self.fy);
        [
            (self.rows[0], self.cols[0], (1.0 - fx) * (1.0 - fy)),
            (self.rows[0], self.cols[1], fx * (1.0 - fy)),
            (self.rows[1], self.cols[0], (1.0 - fx) * fy),
            (self.rows[1], self.cols[1], fx * fy),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct TextureTape {
    texture: Texture,
    width: usize,
    height: usize,
    samples: Vec<Option<Bilinear>>,
}

impl TextureTape {
    /// Per pixel: the four texel indices used and the clamp flags, or `None`
    /// for uncovered pixels.
    pub fn cells(&self) -> Vec<Option<[usize; 6]>> {
        self.samples.iter().map(|s| s.as_ref().map(Bilinear::cell)).collect()
    }
}

/// Bilinear texture lookup with texel centres at `((j + 0.5) / W, (i + 0.5) / H)`.
/// Pixels outside `coverage` are zero.
pub fn sample_texture(
    texture: &Texture,
    uv_image: &Image,
    coverage: &[bool],
) -> Result<(Image, TextureTape), ShadeError> {
    let (w, h) = (uv_image.width(), uv_image.height());
    check_shape(uv_image, (w, h, 2))?;
    if coverage.len() != w * h {
        return Err(ShadeError::ShapeMismatch {
            got: (coverage.len(), 1, 1),
            expected: (w * h, 1, 1),
        });
    }
    let mut out = Image::zeros(w, h, 3);
    let mut samples = vec![None; w * h];
    for (i, &covered) in coverage.iter().enumerate() {
        if !covered {
            continue;
        }
        let uv = uv_image.pixel(i);
        let s = Bilinear::new(uv[0], uv[1], texture.width, texture.height);
        let mut c = Vec3::zeros();
        for (r, col, wgt) in s.weights() {
            c += texture.texel(r, col) * wgt;
        }
        out.pixel_mut(i).copy_from_slice(c.as_slice());
        samples[i] = Some(s);
    }
    Ok((
        out,
        TextureTape {
            texture: texture.clone(),
            width: w,
            height: h,
            samples,
        },
    ))
}

/// Returns gradients w.r.t. texels (row-major) and the uv image.
pub fn sample_texture_backward(grad_color: &Image, tape: &TextureTape) -> Result<(Vec<Vec3>, Image), ShadeError> {
    if grad_color.shape() != (tape.width, tape.height, 3) {
        return Err(ShadeError::TapeMismatch);
    }
    let tex = &tape.texture;
    let mut grad_texels = vec![Vec3::zeros(); tex.texels.len()];
    let mut grad_uv = Image::zeros(tape.width, tape.height, 2);
    for (i, s) in tape.samples.iter().enumerate() {
        let Some(s) = s else { continue };
        let gp = grad_color.pixel(i);
        let g = Vec3::new(gp[0], gp[1], gp[2]);
        if g == Vec3::zeros() {
            continue;
        }
        for (r, c, wgt) in s.weights() {
            grad_texels[r * tex.width + c] += g * wgt;
        }
        let t00 = tex.texel(s.rows[0], s.cols[0]);
        let t01 = tex.texel(s.rows[0], s.cols[1]);
        let t10 = tex.texel(s.rows[1], s.cols[0]);
        let t11 = tex.texel(s.rows[1], s.cols[1]);
        let d_dfx = (t01 - t00) * (1.0 - s.fy) + (t11 - t10) * s.fy;
        let d_dfy = (t10 - t00) * (1.0 - s.fx) + (t11 - t01) * s.fx;
        let out = grad_uv.pixel_mut(i);
        if !s.u_clamped {
            out[0] = g.dot(&d_dfx) * tex.width as f64;
        }
        if !s.v_clamped {
            out[1] = g.dot(&d_dfy) * tex.height as f64;
        }
    }
    Ok((grad_texels, grad_uv))
}

fn unit_or_zero(v: &Vec3) -> Vec3 {
    let n = v.norm();
    if n > 0.0 {
        v / n
    } else {
        Vec3::zeros()
    }
}

fn pixel_vec3(img: &Image, i: usize) -> Vec3 {
    let p = img.pixel(i);
    Vec3::new(p[0], p[1], p[2])
}

/// `I_l = kd * max(0, L . N)` with `N` the renormalized pixel normal.
pub fn lambertian_factors(normal_image: &Image, spec: &LightingSpec) -> Result<Image, ShadeError> {
    let LightingSpec::Lambertian { kd, light_dir } = spec else {
        return Err(ShadeError::WrongSpecVariant { expected: "lambertian" });
    };
    let l = unit_or_zero(light_dir);
    let mut out = Image::zeros(normal_image.width(), normal_image.height(), 1);
    for i in 0..normal_image.pixel_count() {
        let n = unit_or_zero(&pixel_vec3(normal_image, i));
        out.data_mut()[i] = kd * l.dot(&n).max(0.0);
    }
    Ok(out)
}

/// Phong diffuse and specular factors. `view_dir_image` holds unit vectors
/// from the surface towards the eye.
pub fn phong_factors(
    normal_image: &Image,
    view_dir_image: &Image,
    spec: &LightingSpec,
) -> Result<(Image, Image), ShadeError> {
    let LightingSpec::Phong {
        kd,
        ks,
        shininess,
        light_dir,
    } = spec
    else {
        return Err(ShadeError::WrongSpecVariant { expected: "phong" });
    };
    check_shape(view_dir_image, normal_image.shape())?;
    let l = unit_or_zero(light_dir);
    let (w, h) = (normal_image.width(), normal_image.height());
    let mut il = Image::zeros(w, h, 1);
    let mut is = Image::zeros(w, h, 1);
    for i in 0..normal_image.pixel_count() {
        let n = unit_or_zero(&pixel_vec3(normal_image, i));
        let v = pixel_vec3(view_dir_image, i);
        let ln = l.dot(&n);
        let r = n * (2.0 * ln) - l;
        il.data_mut()[i] = kd * ln.max(0.0);
        let rv = r.dot(&v);
        is.data_mut()[i] = if rv > 0.0 { ks * rv.powf(*shininess) } else { 0.0 };
    }
    Ok((il, is))
}

/// `I_l = max(0, sum_i c_i Y_i(N))`
pub fn sh_factors(normal_image: &Image, spec: &LightingSpec) -> Result<Image, ShadeError> {
    let LightingSpec::SphericalHarmonics { coeffs } = spec else {
        return Err(ShadeError::WrongSpecVariant { expected: "spherical harmonics" });
    };
    let mut out = Image::zeros(normal_image.width(), normal_image.height(), 1);
    for i in 0..normal_image.pixel_count() {
        let n = unit_or_zero(&pixel_vec3(normal_image, i));
        let y = sh_basis(&n);
        let s: f64 = y.iter().zip(coeffs).map(|(a, b)| a * b).sum();
        out.data_mut()[i] = s.max(0.0);
    }
    Ok(out)
}

/// `I = I_l * I_c + I_s`, with single-channel lighting factors broadcast over colour.
pub fn compose(ic: &Image, il: &Image, is: &Image) -> Result<Image, ShadeError> {
    let (w, h, c) = ic.shape();
    check_shape(il, (w, h, 1))?;
    check_shape(is, (w, h, 1))?;
    let mut out = ic.clone();
    for i in 0..w * h {
        let (l, s) = (il.data()[i], is.data()[i]);
        for v in &mut out.data_mut()[i * c..(i + 1) * c] {
            *v = l * *v + s;
        }
    }
    Ok(out)
}

/// Per-pixel inputs to the lighting stage.
#[derive(Debug, Clone)]
pub struct ShadeInputs<'a> {
    pub base: &'a Image,
    /// Interpolated (unnormalized) normals; required when lit.
    pub normals: Option<&'a Image>,
    /// Interpolated world positions; required for Phong.
    pub positions: Option<&'a Image>,
    pub coverage: &'a [bool],
    pub eye: Vec3,
}

#[derive(Debug, Clone)]
pub struct ShadeTape {
    spec: LightingSpec,
    width: usize,
    height: usize,
    base: Image,
    normals: Option<Image>,
    positions: Option<Image>,
    coverage: Vec<bool>,
    eye: Vec3,
    il: Image,
    /// Clamp state per pixel: bit 0 diffuse active, bit 1 specular active.
    active: Vec<u8>,
}

impl ShadeTape {
    pub fn lighting(&self) -> &LightingSpec {
        &self.spec
    }

    pub fn clamp_state(&self) -> &[u8] {
        &self.active
    }
}

/// Applies the lighting model and composes the final colour image.
pub fn shade(inputs: &ShadeInputs, spec: &LightingSpec) -> Result<(Image, ShadeTape), ShadeError> {
    let (w, h, _) = inputs.base.shape();
    check_shape(inputs.base, (w, h, 3))?;
    if inputs.coverage.len() != w * h {
        return Err(ShadeError::ShapeMismatch {
            got: (inputs.coverage.len(), 1, 1),
            expected: (w * h, 1, 1),
        });
    }
    let need = |img: Option<&Image>, what: &'static str| -> Result<Image, ShadeError> {
        let img = img.ok_or(ShadeError::WrongSpecVariant { expected: what })?;
        check_shape(img, (w, h, 3))?;
        Ok(img.clone())
    };
    let normals = spec.needs_normals().then(|| need(inputs.normals, "normal-carrying")).transpose()?;
    let positions = spec
        .needs_positions()
        .then(|| need(inputs.positions, "position-carrying"))
        .transpose()?;

    let mut il = Image::filled(w, h, 1, 1.0);
    let mut is = Image::zeros(w, h, 1);
    let mut active = vec![0u8; w * h];
    match spec {
        LightingSpec::None => {}
        LightingSpec::Lambertian { .. } | LightingSpec::SphericalHarmonics { .. } => {
            let n = normals.as_ref().unwrap();
            il = if matches!(spec, LightingSpec::Lambertian { .. }) {
                lambertian_factors(n, spec)?
            } else {
                sh_factors(n, spec)?
            };
            for (i, a) in active.iter_mut().enumerate() {
                *a = u8::from(il.data()[i] > 0.0);
            }
        }
        LightingSpec::Phong { .. } => {
            let n = normals.as_ref().unwrap();
            let p = positions.as_ref().unwrap();
            let mut view = Image::zeros(w, h, 3);
            for i in 0..w * h {
                let v = unit_or_zero(&(inputs.eye - pixel_vec3(p, i)));
                view.pixel_mut(i).copy_from_slice(v.as_slice());
            }
            let (l, s) = phong_factors(n, &view, spec)?;
            for (i, a) in active.iter_mut().enumerate() {
                *a = u8::from(l.data()[i] > 0.0) | (u8::from(s.data()[i] > 0.0) << 1);
            }
            il = l;
            is = s;
        }
    }
    for (i, &c) in inputs.coverage.iter().enumerate() {
        if !c {
            il.data_mut()[i] = 0.0;
            is.data_mut()[i] = 0.0;
            active[i] = 0;
        }
    }
    let out = compose(inputs.base, &il, &is)?;
    let tape = ShadeTape {
        spec: *spec,
        width: w,
        height: h,
        base: inputs.base.clone(),
        normals,
        positions,
        coverage: inputs.coverage.to_vec(),
        eye: inputs.eye,
        il,
        active,
    };
    Ok((out, tape))
}

/// Gradients w.r.t. the lighting parameters. Only the fields of the active
/// model are meaningful.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LightGrad {
    /// W.r.t. the raw (unnormalized) light direction.
    pub light_dir: Vec3,
    pub kd: f64,
    pub ks: f64,
    pub shininess: f64,
    pub sh: [f64; 9],
}

impl LightGrad {
    fn add(&mut self, o: &LightGrad) {
        self.light_dir += o.light_dir;
        self.kd += o.kd;
        self.ks += o.ks;
        self.shininess += o.shininess;
        for (a, b) in self.sh.iter_mut().zip(&o.sh) {
            *a += b;
        }
    }
}

#[derive(Debug, Clone)]
pub struct ShadeGrads {
    pub base: Image,
    /// W.r.t. the interpolated, pre-normalization normals.
    pub normals: Option<Image>,
    pub positions: Option<Image>,
    pub eye: Vec3,
    pub light: LightGrad,
}

struct RowGrad {
    light: LightGrad,
    eye: Vec3,
    /// Light gradient w.r.t. the unit light direction; mapped to the raw vector at the end.
    unit_dir: Vec3,
}

pub fn shading_backward(grad_final: &Image, tape: &ShadeTape) -> Result<ShadeGrads, ShadeError> {
    if grad_final.shape() != (tape.width, tape.height, 3) {
        return Err(ShadeError::TapeMismatch);
    }
    let (w, h) = (tape.width, tape.height);
    let mut grads = ShadeGrads {
        base: Image::zeros(w, h, 3),
        normals: tape.normals.as_ref().map(|_| Image::zeros(w, h, 3)),
        positions: tape.positions.as_ref().map(|_| Image::zeros(w, h, 3)),
        eye: Vec3::zeros(),
        light: LightGrad::default(),
    };
    let spec = tape.spec;
    let raw_dir = match spec {
        LightingSpec::Lambertian { light_dir, .. } | LightingSpec::Phong { light_dir, .. } => light_dir,
        _ => Vec3::z(),
    };
    let l = unit_or_zero(&raw_dir);

    let base_rows = grads.base.data_mut().par_chunks_mut(w * 3);
    let mut normal_rows: Vec<Option<&mut [f64]>> = match grads.normals.as_mut() {
        Some(img) => img.data_mut().chunks_mut(w * 3).map(Some).collect(),
        None => (0..h).map(|_| None).collect(),
    };
    let mut position_rows: Vec<Option<&mut [f64]>> = match grads.positions.as_mut() {
        Some(img) => img.data_mut().chunks_mut(w * 3).map(Some).collect(),
        None => (0..h).map(|_| None).collect(),
    };
    let rows: Vec<RowGrad> = base_rows
        .zip(normal_rows.par_iter_mut())
        .zip(position_rows.par_iter_mut())
        .enumerate()
        .map(|(y, ((g_base, g_norm), g_pos))| {
            let mut acc = RowGrad {
                light: LightGrad::default(),
                eye: Vec3::zeros(),
                unit_dir: Vec3::zeros(),
            };
            for x in 0..w {
                let i = y * w + x;
                if !tape.coverage[i] {
                    continue;
                }
                let gi = pixel_vec3(grad_final, i);
                if gi == Vec3::zeros() {
                    continue;
                }
                let ic = pixel_vec3(&tape.base, i);
                let il = tape.il.data()[i];
                let g_ic = gi * il;
                g_base[x * 3..x * 3 + 3].copy_from_slice(g_ic.as_slice());
                let g_il = gi.dot(&ic);
                let g_is = gi.x + gi.y + gi.z;
                let active = tape.active[i];
                let mut g_n = Vec3::zeros();
                match spec {
                    LightingSpec::None => {}
                    LightingSpec::Lambertian { kd, .. } => {
                        if active & 1 != 0 {
                            let n = unit_or_zero(&pixel_vec3(tape.normals.as_ref().unwrap(), i));
                            acc.light.kd += g_il * l.dot(&n);
                            g_n += l * (g_il * kd);
                            acc.unit_dir += n * (g_il * kd);
                        }
                    }
                    LightingSpec::SphericalHarmonics { coeffs } => {
                        if active & 1 != 0 {
                            let n = unit_or_zero(&pixel_vec3(tape.normals.as_ref().unwrap(), i));
                            let y = sh_basis(&n);
                            for k in 0..9 {
                                acc.light.sh[k] += g_il * y[k];
                            }
                            let gc = coeffs.map(|c| c * g_il);
                            g_n += sh_basis_backward(&n, &gc);
                        }
                    }
                    LightingSpec::Phong { kd, ks, shininess, .. } => {
                        let n = unit_or_zero(&pixel_vec3(tape.normals.as_ref().unwrap(), i));
                        let ln = l.dot(&n);
                        if active & 1 != 0 {
                            acc.light.kd += g_il * ln;
                            g_n += l * (g_il * kd);
                            acc.unit_dir += n * (g_il * kd);
                        }
                        if active & 2 != 0 {
                            let to_eye = tape.eye - pixel_vec3(tape.positions.as_ref().unwrap(), i);
                            let v = unit_or_zero(&to_eye);
                            let r = n * (2.0 * ln) - l;
                            let rv = r.dot(&v);
                            let pow = rv.powf(shininess);
                            acc.light.ks += g_is * pow;
                            acc.light.shininess += g_is * ks * pow * rv.ln();
                            let g_rv = g_is * ks * shininess * rv.powf(shininess - 1.0);
                            let g_r = v * g_rv;
                            let g_v = r * g_rv;
                            // r = 2 (l.n) n - l
                            g_n += g_r * (2.0 * ln) + l * (2.0 * n.dot(&g_r));
                            acc.unit_dir += n * (2.0 * n.dot(&g_r)) - g_r;
                            let g_to_eye = normalize_backward(&to_eye, &g_v);
                            acc.eye += g_to_eye;
                            if let Some(gp) = g_pos.as_deref_mut() {
                                gp[x * 3..x * 3 + 3].copy_from_slice((-g_to_eye).as_slice());
                            }
                        }
                    }
                }
                if let Some(gn) = g_norm.as_deref_mut() {
                    let raw = pixel_vec3(tape.normals.as_ref().unwrap(), i);
                    if raw.norm() > 0.0 && g_n != Vec3::zeros() {
                        let g_raw = normalize_backward(&raw, &g_n);
                        gn[x * 3..x * 3 + 3].copy_from_slice(g_raw.as_slice());
                    }
                }
            }
            acc
        })
        .collect();

    let mut unit_dir = Vec3::zeros();
    for r in &rows {
        grads.light.add(&r.light);
        grads.eye += r.eye;
        unit_dir += r.unit_dir;
    }
    if raw_dir.norm() > 0.0 && matches!(spec, LightingSpec::Lambertian { .. } | LightingSpec::Phong { .. }) {
        grads.light.light_dir = normalize_backward(&raw_dir, &unit_dir);
    }
    Ok(grads)
}
