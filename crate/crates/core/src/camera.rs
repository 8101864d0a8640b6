//! Look-at perspective camera and the differentiable vertex stage.
//!
//! Camera space follows the usual right-handed convention: the camera sits at
//! the origin looking down `-z` with `+y` up. Depth is `-z_cam`, positive in
//! front of the camera. Normalized device coordinates have `+y` pointing up.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::Matrix4;
use thiserror::Error;

use crate::geometry::{normalize_backward, Mesh, Vec2, Vec3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CameraError {
    #[error("degenerate camera: {0}")]
    DegenerateCamera(&'static str),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(&'static str),
    #[error("gradient buffers do not match the vertex-stage tape ({got} vs {expected} vertices)")]
    TapeMismatch { got: usize, expected: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub eye: Vec3,
    pub center: Vec3,
    pub up: Vec3,
    /// Vertical field of view in radians.
    pub fov_y: f64,
    /// Width over height.
    pub aspect: f64,
    pub near: f64,
    pub far: f64,
}

/// Orthonormal view basis: `right`, `up`, and `forward` (towards the target).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewBasis {
    pub right: Vec3,
    pub up: Vec3,
    pub forward: Vec3,
}

impl Camera {
    pub fn look_at(eye: Vec3, center: Vec3, up: Vec3, fov_y: f64, aspect: f64) -> Self {
        Self {
            eye,
            center,
            up,
            fov_y,
            aspect,
            near: 0.1,
            far: 100.0,
        }
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        if !(self.fov_y > 0.0 && self.fov_y < std::f64::consts::PI) {
            return Err(CameraError::InvalidIntrinsics("fov_y must be in (0, pi)"));
        }
        if !(self.aspect > 0.0 && self.aspect.is_finite()) {
            return Err(CameraError::InvalidIntrinsics("aspect must be positive"));
        }
        if !(self.near > 0.0 && self.near < self.far && self.far.is_finite()) {
            return Err(CameraError::InvalidIntrinsics("need 0 < near < far"));
        }
        self.basis().map(|_| ())
    }

    pub fn basis(&self) -> Result<ViewBasis, CameraError> {
        let view = self.center - self.eye;
        let dist = view.norm();
        if !(dist > 0.0) || !dist.is_finite() {
            return Err(CameraError::DegenerateCamera("eye coincides with center"));
        }
        let up_len = self.up.norm();
        if !(up_len > 0.0) {
            return Err(CameraError::DegenerateCamera("up vector is zero"));
        }
        let forward = view / dist;
        let side = forward.cross(&self.up);
        // |f x u| / |u| = sin(angle between them)
        if side.norm() / up_len <= 1e-6 {
            return Err(CameraError::DegenerateCamera("up is parallel to the view direction"));
        }
        let right = side.normalize();
        Ok(ViewBasis {
            right,
            up: right.cross(&forward),
            forward,
        })
    }

    /// `1 / tan(fov_y / 2)`
    pub fn focal_y(&self) -> f64 {
        1.0 / (self.fov_y * 0.5).tan()
    }

    pub fn focal_x(&self) -> f64 {
        self.focal_y() / self.aspect
    }

    /// Distance from eye to center.
    pub fn radius(&self) -> f64 {
        (self.center - self.eye).norm()
    }
}

/// Rigid world-to-camera transform.
pub fn look_at_matrix(camera: &Camera) -> Result<Matrix4<f64>, CameraError> {
    let b = camera.basis()?;
    let e = camera.eye;
    #[rustfmt::skip]
    let m = Matrix4::new(
        b.right.x,    b.right.y,    b.right.z,    -b.right.dot(&e),
        b.up.x,       b.up.y,       b.up.z,       -b.up.dot(&e),
        -b.forward.x, -b.forward.y, -b.forward.z, b.forward.dot(&e),
        0.0,          0.0,          0.0,          1.0,
    );
    Ok(m)
}

/// OpenGL-style projection: camera `z = -near` maps to NDC `z = -1`, `z = -far` to `+1`.
pub fn perspective_matrix(camera: &Camera) -> Matrix4<f64> {
    let (n, f) = (camera.near, camera.far);
    #[rustfmt::skip]
    let m = Matrix4::new(
        camera.focal_x(), 0.0,              0.0,                0.0,
        0.0,              camera.focal_y(), 0.0,                0.0,
        0.0,              0.0,              -(f + n) / (f - n), -2.0 * f * n / (f - n),
        0.0,              0.0,              -1.0,               0.0,
    );
    m
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScreenVertices {
    pub ndc_xy: Vec<Vec2>,
    pub depth: Vec<f64>,
    pub inv_w: Vec<f64>,
    /// Set when the vertex is at or behind the near plane.
    pub behind: Vec<bool>,
}

impl ScreenVertices {
    pub fn len(&self) -> usize {
        self.ndc_xy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ndc_xy.is_empty()
    }
}

static TAPE_IDS: AtomicU64 = AtomicU64::new(1);

pub(crate) fn next_tape_id() -> u64 {
    TAPE_IDS.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone)]
pub struct VertexStageTape {
    pub(crate) id: u64,
    camera: Camera,
    basis: ViewBasis,
    /// `p - eye` per vertex, in world axes.
    offsets: Vec<Vec3>,
    cam_points: Vec<Vec3>,
    behind: Vec<bool>,
}

impl VertexStageTape {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn vertex_count(&self) -> usize {
        self.offsets.len()
    }
}

pub fn project_vertices(
    mesh: &Mesh,
    camera: &Camera,
) -> Result<(ScreenVertices, VertexStageTape), CameraError> {
    camera.validate()?;
    let basis = camera.basis()?;
    let (fx, fy) = (camera.focal_x(), camera.focal_y());
    let n = mesh.vertex_count();
    let mut out = ScreenVertices {
        ndc_xy: Vec::with_capacity(n),
        depth: Vec::with_capacity(n),
        inv_w: Vec::with_capacity(n),
        behind: Vec::with_capacity(n),
    };
    let mut offsets = Vec::with_capacity(n);
    let mut cam_points = Vec::with_capacity(n);
    for v in mesh.vertices() {
        let d = v - camera.eye;
        let pc = Vec3::new(basis.right.dot(&d), basis.up.dot(&d), -basis.forward.dot(&d));
        let depth = -pc.z;
        let behind = !(depth > camera.near);
        let (ndc, inv_w) = if behind {
            (Vec2::zeros(), 0.0)
        } else {
            let iw = 1.0 / depth;
            (Vec2::new(fx * pc.x * iw, fy * pc.y * iw), iw)
        };
        out.ndc_xy.push(ndc);
        out.depth.push(depth);
        out.inv_w.push(inv_w);
        out.behind.push(behind);
        offsets.push(d);
        cam_points.push(pc);
    }
    let tape = VertexStageTape {
        id: next_tape_id(),
        camera: *camera,
        basis,
        offsets,
        cam_points,
        behind: out.behind.clone(),
    };
    Ok((out, tape))
}

/// Reverse pass of [`project_vertices`]: returns gradients w.r.t. vertex
/// positions and the camera eye. `center` and `up` are held constant.
pub fn project_backward(
    grad_ndc: &[Vec2],
    grad_depth: &[f64],
    tape: &VertexStageTape,
) -> Result<(Vec<Vec3>, Vec3), CameraError> {
    project_backward_with_center(grad_ndc, grad_depth, tape).map(|(v, e, _)| (v, e))
}

/// Also returns the gradient w.r.t. the look-at center.
pub(crate) fn project_backward_with_center(
    grad_ndc: &[Vec2],
    grad_depth: &[f64],
    tape: &VertexStageTape,
) -> Result<(Vec<Vec3>, Vec3, Vec3), CameraError> {
    let n = tape.vertex_count();
    for got in [grad_ndc.len(), grad_depth.len()] {
        if got != n {
            return Err(CameraError::TapeMismatch { got, expected: n });
        }
    }
    let cam = &tape.camera;
    let b = &tape.basis;
    let (fx, fy) = (cam.focal_x(), cam.focal_y());

    let mut grad_vertices = Vec::with_capacity(n);
    let mut grad_eye = Vec3::zeros();
    let mut g_right = Vec3::zeros();
    let mut g_up = Vec3::zeros();
    let mut g_forward = Vec3::zeros();
    for i in 0..n {
        if tape.behind[i] {
            grad_vertices.push(Vec3::zeros());
            continue;
        }
        let pc = tape.cam_points[i];
        let depth = -pc.z;
        let iw = 1.0 / depth;
        let gn = grad_ndc[i];
        // ndc = f * pc.xy / depth, depth = -pc.z
        let g_pc = Vec3::new(
            gn.x * fx * iw,
            gn.y * fy * iw,
            (gn.x * fx * pc.x + gn.y * fy * pc.y) * iw * iw - grad_depth[i],
        );
        // pc = (r.d, u.d, -f.d) with d = p - eye
        let g_d = b.right * g_pc.x + b.up * g_pc.y - b.forward * g_pc.z;
        grad_vertices.push(g_d);
        grad_eye -= g_d;
        let d = tape.offsets[i];
        g_right += d * g_pc.x;
        g_up += d * g_pc.y;
        g_forward -= d * g_pc.z;
    }

    // up_cam = right x forward
    g_right += b.forward.cross(&g_up);
    g_forward += g_up.cross(&b.right);
    // right = normalize(forward x world_up)
    let side = b.forward.cross(&cam.up);
    let g_side = normalize_backward(&side, &g_right);
    g_forward += cam.up.cross(&g_side);
    // forward = normalize(center - eye)
    let view = cam.center - cam.eye;
    let g_view = normalize_backward(&view, &g_forward);
    grad_eye -= g_view;

    Ok((grad_vertices, grad_eye, g_view))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::VertexAttributes;
    use nalgebra::Vector4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam() -> Camera {
        Camera::look_at(
            Vec3::new(0.0, 0.0, 2.0),
            Vec3::zeros(),
            Vec3::y(),
            std::f64::consts::FRAC_PI_2,
            1.0,
        )
    }

    fn mesh(vertices: Vec<Vec3>) -> Mesh {
        let faces = (0..vertices.len() / 3).map(|i| [3 * i, 3 * i + 1, 3 * i + 2]).collect();
        Mesh::new(vertices, faces, VertexAttributes::default()).unwrap()
    }

    #[test]
    fn projection_examples() {
        let m = mesh(vec![Vec3::zeros(), Vec3::new(0.0, 0.0, 2.0), Vec3::x()]);
        let (sv, _) = project_vertices(&m, &cam()).unwrap();
        assert_eq!(sv.ndc_xy[0], Vec2::zeros());
        assert!(!sv.behind[0]);
        assert!(sv.behind[1]);
        assert!((sv.ndc_xy[2].x - 0.5).abs() < 1e-12);
        assert!((sv.depth[2] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_cameras() {
        let mut c = cam();
        c.center = c.eye;
        assert!(matches!(look_at_matrix(&c), Err(CameraError::DegenerateCamera(_))));
        let mut c = cam();
        c.up = Vec3::z();
        assert!(matches!(c.validate(), Err(CameraError::DegenerateCamera(_))));
        let m = mesh(vec![Vec3::zeros(), Vec3::x(), Vec3::y()]);
        assert!(project_vertices(&m, &c).is_err());
    }

    #[test]
    fn look_at_properties() {
        let v = look_at_matrix(&cam()).unwrap();
        let o = v * Vector4::new(0.0, 0.0, 0.0, 1.0);
        assert!((o - Vector4::new(0.0, 0.0, -2.0, 1.0)).norm() < 1e-12);

        let c = Camera::look_at(
            Vec3::new(1.0, 2.0, 3.0),
            Vec3::new(-0.5, 0.1, 0.2),
            Vec3::new(0.1, 1.0, 0.0),
            1.0,
            1.3,
        );
        let v = look_at_matrix(&c).unwrap();
        let e = v * c.eye.push(1.0);
        assert!(e.xyz().norm() < 1e-12);
        let r = v.fixed_view::<3, 3>(0, 0);
        assert!((r * r.transpose() - nalgebra::Matrix3::identity()).norm() < 1e-9);
        // view direction maps to -z
        let f = r * (c.center - c.eye).normalize();
        assert!((f - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
    }

    #[test]
    fn perspective_anchors() {
        let mut c = cam();
        c.near = 0.5;
        c.far = 10.0;
        let p = perspective_matrix(&c);
        for (z, expected) in [(-0.5, -1.0), (-10.0, 1.0)] {
            let clip = p * Vector4::new(0.0, 0.0, z, 1.0);
            assert!((clip.z / clip.w - expected).abs() < 1e-12);
        }
        let clip = p * Vector4::new(1.0, 0.0, -1.0, 1.0);
        assert!((clip.x / clip.w - 1.0).abs() < 1e-12);
    }

    #[test]
    fn composition_matches_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let c = random_camera(&mut rng);
            let m = random_mesh(&mut rng);
            let (sv, _) = project_vertices(&m, &c).unwrap();
            let pv = perspective_matrix(&c) * look_at_matrix(&c).unwrap();
            for (i, v) in m.vertices().iter().enumerate() {
                let clip = pv * v.push(1.0);
                assert!((clip.x / clip.w - sv.ndc_xy[i].x).abs() < 1e-9);
                assert!((clip.y / clip.w - sv.ndc_xy[i].y).abs() < 1e-9);
                assert!((clip.w - sv.depth[i]).abs() < 1e-9);
                assert!((1.0 / clip.w - sv.inv_w[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn on_axis_points_ignore_fov() {
        let m = mesh(vec![Vec3::zeros(), Vec3::new(0.0, 0.0, -1.0), Vec3::new(0.0, 0.0, 0.5)]);
        for fov in [0.3, 1.0, 2.5] {
            let mut c = cam();
            c.fov_y = fov;
            let (sv, _) = project_vertices(&m, &c).unwrap();
            assert!(sv.ndc_xy.iter().all(|p| p.norm() < 1e-12));
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let m = mesh(vec![Vec3::zeros(), Vec3::x(), Vec3::y()]);
        let (_, tape) = project_vertices(&m, &cam()).unwrap();
        let (gv, ge) = project_backward(&[Vec2::zeros(); 3], &[0.0; 3], &tape).unwrap();
        assert!(gv.iter().all(|g| *g == Vec3::zeros()));
        assert_eq!(ge, Vec3::zeros());
        assert!(matches!(
            project_backward(&[Vec2::zeros(); 2], &[0.0; 3], &tape),
            Err(CameraError::TapeMismatch { got: 2, expected: 3 })
        ));
    }

    #[test]
    fn common_translation_has_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let c = random_camera(&mut rng);
            let m = random_mesh(&mut rng);
            let (_, tape) = project_vertices(&m, &c).unwrap();
            let gn: Vec<Vec2> = (0..m.vertex_count())
                .map(|_| Vec2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect();
            let gd: Vec<f64> = (0..m.vertex_count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (gv, ge, gc) = project_backward_with_center(&gn, &gd, &tape).unwrap();
            let total: Vec3 = gv.iter().sum::<Vec3>() + ge + gc;
            assert!(total.norm() < 1e-9, "{total}");
        }
    }

    pub(crate) fn random_camera(rng: &mut ChaCha8Rng) -> Camera {
        let dir = Vec3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        )
        .normalize();
        let r = rng.gen_range(2.5..4.0);
        let center = Vec3::new(
            rng.gen_range(-0.2..0.2),
            rng.gen_range(-0.2..0.2),
            rng.gen_range(-0.2..0.2),
        );
        let mut up = Vec3::new(rng.gen_range(-0.3..0.3), 1.0, rng.gen_range(-0.3..0.3));
        if dir.cross(&up.normalize()).norm() < 0.1 {
            up = Vec3::x();
        }
        Camera {
            eye: center + dir * r,
            center,
            up: up.normalize(),
            fov_y: rng.gen_range(0.5..1.5),
            aspect: rng.gen_range(0.7..1.5),
            near: 0.1,
            far: 20.0,
        }
    }

    fn random_mesh(rng: &mut ChaCha8Rng) -> Mesh {
        mesh(
            (0..9)
                .map(|_| {
                    Vec3::new(
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    )
                })
                .collect(),
        )
    }

    fn objective(m: &Mesh, c: &Camera, gn: &[Vec2], gd: &[f64]) -> f64 {
        let (sv, _) = project_vertices(m, c).unwrap();
        sv.ndc_xy
            .iter()
            .zip(gn)
            .map(|(p, g)| p.dot(g))
            .chain(sv.depth.iter().zip(gd).map(|(d, g)| d * g))
            .sum()
    }

    fn close(analytic: f64, numeric: f64) -> bool {
        let diff = (analytic - numeric).abs();
        diff <= 1e-8 || diff <= 1e-4 * analytic.abs().max(numeric.abs())
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let h = 1e-5;
        for _ in 0..100 {
            let c = random_camera(&mut rng);
            let m = random_mesh(&mut rng);
            let n = m.vertex_count();
            let gn: Vec<Vec2> = (0..n)
                .map(|_| Vec2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect();
            let gd: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (_, tape) = project_vertices(&m, &c).unwrap();
            let (gv, ge) = project_backward(&gn, &gd, &tape).unwrap();
            for vi in 0..n {
                for k in 0..3 {
                    let mut p = m.vertices().to_vec();
                    let mut q = p.clone();
                    p[vi][k] += h;
                    q[vi][k] -= h;
                    let fd = (objective(&m.with_vertices(p).unwrap(), &c, &gn, &gd)
                        - objective(&m.with_vertices(q).unwrap(), &c, &gn, &gd))
                        / (2.0 * h);
                    assert!(close(gv[vi][k], fd), "vertex {vi}.{k}: {} vs {fd}", gv[vi][k]);
                }
            }
            for k in 0..3 {
                let (mut cp, mut cm) = (c, c);
                cp.eye[k] += h;
                cm.eye[k] -= h;
                let fd = (objective(&m, &cp, &gn, &gd) - objective(&m, &cm, &gn, &gd)) / (2.0 * h);
                assert!(close(ge[k], fd), "eye {k}: {} vs {fd}", ge[k]);
            }
        }
    }
}
