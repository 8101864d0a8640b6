//! Differentiable rasterization.
//!
//! Covered (foreground) pixels take their value from the nearest covering face
//! by affine barycentric interpolation of per-vertex attributes. Uncovered
//! (background) pixels get a soft alpha
//!
//! ```text
//! A^j = exp(-d2(p, f_j) / delta)        A = 1 - prod_j (1 - A^j)
//! ```
//!
//! over every face whose `A^j` reaches `cutoff_eps`. Foreground alpha is
//! exactly one and carries no gradient.
//!
//! Work is split into fixed 16x16 pixel tiles. Gradients are accumulated per
//! tile and reduced in tile order, so results do not depend on the number of
//! worker threads.

mod bary;
mod distance;

pub use bary::{barycentric_backward, barycentric_weights, cross2, signed_area, MIN_AREA};
pub use distance::{dist2_backward, point_triangle_dist2, Witness};

use rayon::prelude::*;
use thiserror::Error;

use crate::camera::{next_tape_id, ScreenVertices};
use crate::geometry::Vec2;
use crate::image::Image;

/// Sentinel in [`FrameBuffers::face_id`] for uncovered pixels.
pub const NO_FACE: u32 = u32::MAX;

pub const TILE: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RasterError {
    #[error("triangle is degenerate (area below {MIN_AREA})")]
    DegenerateTriangle,
    #[error("face list is empty")]
    EmptyFaceList,
    #[error("resolution must be non-zero, got {0}x{1}")]
    ZeroResolution(usize, usize),
    #[error("attribute buffer has {got} values, expected {expected}")]
    AttributeLength { got: usize, expected: usize },
    #[error("face {face} references vertex {index} outside the screen buffer")]
    IndexOutOfRange { face: usize, index: usize },
    #[error("invalid soft-rasterization config: {0}")]
    InvalidSoftConfig(&'static str),
    #[error("gradient image shape {got:?} does not match {expected:?}")]
    ShapeMismatch {
        got: (usize, usize, usize),
        expected: (usize, usize, usize),
    },
    #[error("tape does not match the gradient buffers")]
    TapeMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SoftConfig {
    /// Smoothness of the soft silhouette, in squared NDC units.
    pub delta: f64,
    /// Faces with `A^j` below this are dropped from the product.
    pub cutoff_eps: f64,
}

impl Default for SoftConfig {
    fn default() -> Self {
        Self {
            delta: 1e-4,
            cutoff_eps: 1e-7,
        }
    }
}

impl SoftConfig {
    pub fn validate(&self) -> Result<(), RasterError> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(RasterError::InvalidSoftConfig("delta must be positive"));
        }
        if !(self.cutoff_eps > 0.0 && self.cutoff_eps < 1.0) {
            return Err(RasterError::InvalidSoftConfig("cutoff_eps must be in (0, 1)"));
        }
        Ok(())
    }

    /// Distance beyond which a face's soft value drops below the cutoff.
    pub fn influence_radius(&self) -> f64 {
        (self.delta * (1.0 / self.cutoff_eps).ln()).sqrt()
    }
}

/// NDC position of the centre of pixel `(x, y)`.
#[inline]
pub fn pixel_center(x: usize, y: usize, width: usize, height: usize) -> Vec2 {
    Vec2::new(
        (x as f64 + 0.5) / width as f64 * 2.0 - 1.0,
        1.0 - (y as f64 + 0.5) / height as f64 * 2.0,
    )
}

/// Per-vertex attributes, `channels` values per vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct VertexAttrs {
    pub channels: usize,
    pub data: Vec<f64>,
}

impl VertexAttrs {
    pub fn new(channels: usize, data: Vec<f64>) -> Self {
        Self { channels, data }
    }

    pub fn vertex(&self, v: usize) -> &[f64] {
        &self.data[v * self.channels..(v + 1) * self.channels]
    }

    pub fn vertex_count(&self) -> usize {
        if self.channels == 0 {
            0
        } else {
            self.data.len() / self.channels
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameBuffers {
    pub width: usize,
    pub height: usize,
    pub attr_image: Image,
    pub alpha: Image,
    pub depth: Vec<f64>,
    pub face_id: Vec<u32>,
    pub bary: Vec<[f64; 3]>,
}

impl FrameBuffers {
    pub fn covered(&self, pixel: usize) -> bool {
        self.face_id[pixel] != NO_FACE
    }

    /// 1 where a face covers the pixel, 0 elsewhere.
    pub fn coverage_mask(&self) -> Vec<bool> {
        self.face_id.iter().map(|&f| f != NO_FACE).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftEntry {
    pub face: u32,
    /// `A^j` for this pixel and face.
    pub value: f64,
    pub witness: Witness,
}

#[derive(Debug, Clone)]
pub struct RasterTape {
    id: u64,
    width: usize,
    height: usize,
    delta: f64,
    ndc: Vec<Vec2>,
    faces: Vec<[usize; 3]>,
    attrs: VertexAttrs,
    face_id: Vec<u32>,
    bary: Vec<[f64; 3]>,
    soft_offsets: Vec<u32>,
    soft_entries: Vec<SoftEntry>,
}

impl RasterTape {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn channels(&self) -> usize {
        self.attrs.channels
    }

    /// Soft entries retained for a background pixel (empty for covered pixels).
    pub fn soft_entries(&self, pixel: usize) -> &[SoftEntry] {
        let (a, b) = (self.soft_offsets[pixel] as usize, self.soft_offsets[pixel + 1] as usize);
        &self.soft_entries[a..b]
    }
}

/// Screen-space data for faces that take part in rasterization.
struct PreparedFace {
    index: usize,
    v: [Vec2; 3],
    depth: [f64; 3],
    area2: f64,
    /// Inclusive pixel ranges: coverage box and soft-influence box.
    cover: [usize; 4],
    soft: [usize; 4],
}

fn pixel_range(lo: f64, hi: f64, size: usize) -> Option<(usize, usize)> {
    // pixel centre x sits at ndc (x + 0.5) / size * 2 - 1
    let to_pix = |ndc: f64| (ndc + 1.0) * 0.5 * size as f64 - 0.5;
    let a = to_pix(lo).ceil() - 1.0;
    let b = to_pix(hi).floor() + 1.0;
    if b < 0.0 || a > (size - 1) as f64 || !a.is_finite() || !b.is_finite() {
        return None;
    }
    Some((a.max(0.0) as usize, b.min((size - 1) as f64) as usize))
}

fn pixel_box(v: &[Vec2; 3], pad: f64, width: usize, height: usize) -> Option<[usize; 4]> {
    let minx = v.iter().map(|p| p.x).fold(f64::INFINITY, f64::min) - pad;
    let maxx = v.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max) + pad;
    let miny = v.iter().map(|p| p.y).fold(f64::INFINITY, f64::min) - pad;
    let maxy = v.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max) + pad;
    let (x0, x1) = pixel_range(minx, maxx, width)?;
    // rows grow downwards while ndc y grows upwards
    let (r0, r1) = pixel_range(-maxy, -miny, height)?;
    Some([x0, x1, r0, r1])
}

#[inline]
fn in_box(b: &[usize; 4], x: usize, y: usize) -> bool {
    x >= b[0] && x <= b[1] && y >= b[2] && y <= b[3]
}

/// Faces eligible for rasterization: no vertex behind the near plane and
/// projected area of at least [`MIN_AREA`].
fn prepare_faces(
    screen: &ScreenVertices,
    faces: &[[usize; 3]],
    soft: &SoftConfig,
    width: usize,
    height: usize,
) -> Vec<PreparedFace> {
    let radius = soft.influence_radius();
    faces
        .iter()
        .enumerate()
        .filter_map(|(index, f)| {
            if f.iter().any(|&i| screen.behind[i]) {
                return None;
            }
            let v = [screen.ndc_xy[f[0]], screen.ndc_xy[f[1]], screen.ndc_xy[f[2]]];
            let area2 = cross2(&v[0], &v[1], &v[2]);
            if !(0.5 * area2.abs() >= MIN_AREA) {
                return None;
            }
            let soft_box = pixel_box(&v, radius, width, height)?;
            let cover = pixel_box(&v, 0.0, width, height).unwrap_or([1, 0, 1, 0]);
            Some(PreparedFace {
                index,
                v,
                depth: [screen.depth[f[0]], screen.depth[f[1]], screen.depth[f[2]]],
                area2,
                cover,
                soft: soft_box,
            })
        })
        .collect()
}

struct TileGrid {
    cols: usize,
    rows: usize,
    width: usize,
    height: usize,
}

impl TileGrid {
    fn new(width: usize, height: usize) -> Self {
        Self {
            cols: width.div_ceil(TILE),
            rows: height.div_ceil(TILE),
            width,
            height,
        }
    }

    fn count(&self) -> usize {
        self.cols * self.rows
    }

    /// Pixel bounds `[x0, x1) x [y0, y1)` of tile `t`.
    fn bounds(&self, t: usize) -> (usize, usize, usize, usize) {
        let (tx, ty) = (t % self.cols, t / self.cols);
        let x0 = tx * TILE;
        let y0 = ty * TILE;
        (x0, (x0 + TILE).min(self.width), y0, (y0 + TILE).min(self.height))
    }

    /// Prepared-face indices overlapping each tile, in ascending face order.
    fn bin(&self, faces: &[PreparedFace]) -> Vec<Vec<u32>> {
        let mut bins = vec![Vec::new(); self.count()];
        for (i, f) in faces.iter().enumerate() {
            let [x0, x1, y0, y1] = f.soft;
            for ty in y0 / TILE..=y1 / TILE {
                for tx in x0 / TILE..=x1 / TILE {
                    bins[ty * self.cols + tx].push(i as u32);
                }
            }
        }
        bins
    }
}

struct PixelOut {
    face: u32,
    bary: [f64; 3],
    depth: f64,
    alpha: f64,
    soft: Vec<SoftEntry>,
}

fn shade_pixel(
    x: usize,
    y: usize,
    p: &Vec2,
    bin: &[u32],
    faces: &[PreparedFace],
    soft: &SoftConfig,
) -> PixelOut {
    let mut best: Option<(usize, f64, [f64; 3])> = None;
    for &fi in bin {
        let f = &faces[fi as usize];
        if !in_box(&f.cover, x, y) {
            continue;
        }
        let s = f.area2.signum();
        let e0 = cross2(p, &f.v[1], &f.v[2]) * s;
        let e1 = cross2(p, &f.v[2], &f.v[0]) * s;
        let e2 = cross2(p, &f.v[0], &f.v[1]) * s;
        if e0 < 0.0 || e1 < 0.0 || e2 < 0.0 {
            continue;
        }
        let w = bary::weights_unchecked(&f.v[0], &f.v[1], &f.v[2], p, f.area2);
        let depth = f.depth[0] + w[1] * (f.depth[1] - f.depth[0]) + w[2] * (f.depth[2] - f.depth[0]);
        // strict comparison keeps the lower face index on ties
        if best.is_none_or(|(_, d, _)| depth < d) {
            best = Some((fi as usize, depth, w));
        }
    }
    if let Some((fi, depth, w)) = best {
        return PixelOut {
            face: faces[fi].index as u32,
            bary: w,
            depth,
            alpha: 1.0,
            soft: Vec::new(),
        };
    }
    let mut entries = Vec::new();
    let mut keep = 1.0;
    for &fi in bin {
        let f = &faces[fi as usize];
        if !in_box(&f.soft, x, y) {
            continue;
        }
        let (d2, witness) = distance::dist2_unchecked(p, &f.v, f.area2);
        let value = (-d2 / soft.delta).exp();
        if value >= soft.cutoff_eps {
            keep *= 1.0 - value;
            entries.push(SoftEntry {
                face: f.index as u32,
                value,
                witness,
            });
        }
    }
    PixelOut {
        face: NO_FACE,
        bary: [0.0; 3],
        depth: f64::INFINITY,
        alpha: 1.0 - keep,
        soft: entries,
    }
}

/// Forward rasterization of projected faces.
pub fn rasterize(
    screen: &ScreenVertices,
    faces: &[[usize; 3]],
    attrs: &VertexAttrs,
    soft: &SoftConfig,
    width: usize,
    height: usize,
) -> Result<(FrameBuffers, RasterTape), RasterError> {
    if faces.is_empty() {
        return Err(RasterError::EmptyFaceList);
    }
    if width == 0 || height == 0 {
        return Err(RasterError::ZeroResolution(width, height));
    }
    soft.validate()?;
    let n = screen.len();
    if attrs.data.len() != n * attrs.channels {
        return Err(RasterError::AttributeLength {
            got: attrs.data.len(),
            expected: n * attrs.channels,
        });
    }
    for (fi, f) in faces.iter().enumerate() {
        if let Some(&index) = f.iter().find(|&&i| i >= n) {
            return Err(RasterError::IndexOutOfRange { face: fi, index });
        }
    }

    let prepared = prepare_faces(screen, faces, soft, width, height);
    let grid = TileGrid::new(width, height);
    let bins = grid.bin(&prepared);

    let tiles: Vec<Vec<PixelOut>> = (0..grid.count())
        .into_par_iter()
        .map(|t| {
            let (x0, x1, y0, y1) = grid.bounds(t);
            let mut out = Vec::with_capacity((x1 - x0) * (y1 - y0));
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = pixel_center(x, y, width, height);
                    out.push(shade_pixel(x, y, &p, &bins[t], &prepared, soft));
                }
            }
            out
        })
        .collect();

    let pixels = width * height;
    let c = attrs.channels;
    let mut fb = FrameBuffers {
        width,
        height,
        attr_image: Image::zeros(width, height, c),
        alpha: Image::zeros(width, height, 1),
        depth: vec![f64::INFINITY; pixels],
        face_id: vec![NO_FACE; pixels],
        bary: vec![[0.0; 3]; pixels],
    };
    let mut soft_lists: Vec<Vec<SoftEntry>> = vec![Vec::new(); pixels];
    for (t, tile) in tiles.into_iter().enumerate() {
        let (x0, x1, y0, _) = grid.bounds(t);
        let tw = x1 - x0;
        for (i, px) in tile.into_iter().enumerate() {
            let idx = (y0 + i / tw) * width + x0 + i % tw;
            fb.alpha.data_mut()[idx] = px.alpha;
            if px.face != NO_FACE {
                let f = &faces[px.face as usize];
                let out = fb.attr_image.pixel_mut(idx);
                for (ch, o) in out.iter_mut().enumerate() {
                    *o = px.bary[0] * attrs.data[f[0] * c + ch]
                        + px.bary[1] * attrs.data[f[1] * c + ch]
                        + px.bary[2] * attrs.data[f[2] * c + ch];
                }
                fb.face_id[idx] = px.face;
                fb.bary[idx] = px.bary;
                fb.depth[idx] = px.depth;
            }
            soft_lists[idx] = px.soft;
        }
    }
    let mut soft_offsets = Vec::with_capacity(pixels + 1);
    let mut soft_entries = Vec::new();
    soft_offsets.push(0u32);
    for list in soft_lists {
        soft_entries.extend(list);
        soft_offsets.push(soft_entries.len() as u32);
    }

    let tape = RasterTape {
        id: next_tape_id(),
        width,
        height,
        delta: soft.delta,
        ndc: screen.ndc_xy.clone(),
        faces: faces.to_vec(),
        attrs: attrs.clone(),
        face_id: fb.face_id.clone(),
        bary: fb.bary.clone(),
        soft_offsets,
        soft_entries,
    };
    Ok((fb, tape))
}

/// Gradients produced by [`rasterize_backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct RasterGrads {
    /// d/d(ndc_xy) per vertex.
    pub screen: Vec<Vec2>,
    /// d/d(attribute) per vertex, laid out like [`VertexAttrs::data`].
    pub attrs: Vec<f64>,
}

#[derive(Default)]
struct TileGrad {
    screen: Vec<(u32, Vec2)>,
    attrs: Vec<(u32, u32)>,
    attr_values: Vec<f64>,
}

/// Reverse pass of [`rasterize`].
pub fn rasterize_backward(
    grad_attr_image: &Image,
    grad_alpha: &Image,
    tape: &RasterTape,
) -> Result<RasterGrads, RasterError> {
    let c = tape.attrs.channels;
    let (w, h) = (tape.width, tape.height);
    if grad_attr_image.shape() != (w, h, c) {
        return Err(RasterError::ShapeMismatch {
            got: grad_attr_image.shape(),
            expected: (w, h, c),
        });
    }
    if grad_alpha.shape() != (w, h, 1) {
        return Err(RasterError::ShapeMismatch {
            got: grad_alpha.shape(),
            expected: (w, h, 1),
        });
    }
    if tape.face_id.len() != w * h || tape.soft_offsets.len() != w * h + 1 {
        return Err(RasterError::TapeMismatch);
    }

    let grid = TileGrid::new(w, h);
    let partials: Vec<TileGrad> = (0..grid.count())
        .into_par_iter()
        .map(|t| {
            let (x0, x1, y0, y1) = grid.bounds(t);
            let mut out = TileGrad::default();
            let mut prefix = Vec::new();
            for y in y0..y1 {
                for x in x0..x1 {
                    let idx = y * w + x;
                    let p = pixel_center(x, y, w, h);
                    let face = tape.face_id[idx];
                    if face != NO_FACE {
                        foreground_pixel(tape, idx, &p, face as usize, grad_attr_image.pixel(idx), &mut out);
                    } else {
                        let g = grad_alpha.data()[idx];
                        if g != 0.0 {
                            background_pixel(tape, idx, &p, g, &mut prefix, &mut out);
                        }
                    }
                }
            }
            out
        })
        .collect();

    let mut grads = RasterGrads {
        screen: vec![Vec2::zeros(); tape.ndc.len()],
        attrs: vec![0.0; tape.attrs.data.len()],
    };
    for part in partials {
        for (v, g) in part.screen {
            grads.screen[v as usize] += g;
        }
        for (v, start) in part.attrs {
            let src = &part.attr_values[start as usize..start as usize + c];
            let dst = &mut grads.attrs[v as usize * c..(v as usize + 1) * c];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    Ok(grads)
}

fn foreground_pixel(tape: &RasterTape, idx: usize, p: &Vec2, face: usize, g: &[f64], out: &mut TileGrad) {
    if g.iter().all(|&x| x == 0.0) {
        return;
    }
    let f = tape.faces[face];
    let w = tape.bary[idx];
    let c = tape.attrs.channels;
    let mut grad_w = [0.0; 3];
    for k in 0..3 {
        let start = out.attr_values.len() as u32;
        out.attr_values.extend(g.iter().map(|gc| w[k] * gc));
        out.attrs.push((f[k] as u32, start));
        let u = tape.attrs.vertex(f[k]);
        grad_w[k] = (0..c).map(|ch| g[ch] * u[ch]).sum();
    }
    let v = [tape.ndc[f[0]], tape.ndc[f[1]], tape.ndc[f[2]]];
    let d = cross2(&v[0], &v[1], &v[2]);
    let gv = bary::backward_unchecked(&v[0], &v[1], &v[2], p, d, &grad_w);
    for k in 0..3 {
        out.screen.push((f[k] as u32, gv[k]));
    }
}

fn background_pixel(tape: &RasterTape, idx: usize, p: &Vec2, g: f64, prefix: &mut Vec<f64>, out: &mut TileGrad) {
    let entries = tape.soft_entries(idx);
    if entries.is_empty() {
        return;
    }
    // prod_{m != j} (1 - A^m) from prefix and suffix products
    prefix.clear();
    let mut acc = 1.0;
    for e in entries {
        prefix.push(acc);
        acc *= 1.0 - e.value;
    }
    let mut suffix = 1.0;
    for (j, e) in entries.iter().enumerate().rev() {
        let others = prefix[j] * suffix;
        suffix *= 1.0 - e.value;
        let g_d2 = -g * others * e.value / tape.delta;
        let f = tape.faces[e.face as usize];
        let v = [tape.ndc[f[0]], tape.ndc[f[1]], tape.ndc[f[2]]];
        let gv = distance::dist2_backward(p, &v, &e.witness, g_d2);
        for k in 0..3 {
            if gv[k] != Vec2::zeros() {
                out.screen.push((f[k] as u32, gv[k]));
            }
        }
    }
}
