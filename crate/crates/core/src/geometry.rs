//! Triangle meshes, derived normals, adjacency and template shapes.
//!
//! Faces are counter-clockwise when viewed from their front side, so the
//! face normal of `(a, b, c)` is `normalize((b - a) x (c - a))`.

use std::collections::BTreeMap;

use nalgebra::{Vector2, Vector3};
use thiserror::Error;

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("mesh has no vertices")]
    NoVertices,
    #[error("mesh has no faces")]
    NoFaces,
    #[error("face {face} references vertex {index}, but the mesh has {count} vertices")]
    IndexOutOfRange {
        face: usize,
        index: usize,
        count: usize,
    },
    #[error("face {face} repeats a vertex index: {indices:?}")]
    DegenerateFace { face: usize, indices: [usize; 3] },
    #[error("{attribute} has {got} entries, expected one per vertex ({expected})")]
    AttributeLengthMismatch {
        attribute: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("normal of vertex {vertex} has norm {norm}, expected unit length")]
    NonUnitNormal { vertex: usize, norm: f64 },
    #[error("subdivision level {0} is outside 0..=5")]
    LevelOutOfRange(u32),
}

/// Optional per-vertex attributes accepted by [`Mesh::new`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VertexAttributes {
    pub colors: Option<Vec<Vec3>>,
    pub uvs: Option<Vec<Vec2>>,
    pub normals: Option<Vec<Vec3>>,
}

/// A validated triangle mesh. Fields are read-only; build a new mesh to change it.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
    colors: Option<Vec<Vec3>>,
    uvs: Option<Vec<Vec2>>,
    normals: Option<Vec<Vec3>>,
}

impl Mesh {
    pub fn new(
        vertices: Vec<Vec3>,
        faces: Vec<[usize; 3]>,
        attrs: VertexAttributes,
    ) -> Result<Self, GeometryError> {
        if vertices.is_empty() {
            return Err(GeometryError::NoVertices);
        }
        if faces.is_empty() {
            return Err(GeometryError::NoFaces);
        }
        let count = vertices.len();
        for (fi, f) in faces.iter().enumerate() {
            if let Some(&index) = f.iter().find(|&&i| i >= count) {
                return Err(GeometryError::IndexOutOfRange {
                    face: fi,
                    index,
                    count,
                });
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(GeometryError::DegenerateFace {
                    face: fi,
                    indices: *f,
                });
            }
        }
        check_len("colors", attrs.colors.as_ref().map(Vec::len), count)?;
        check_len("uvs", attrs.uvs.as_ref().map(Vec::len), count)?;
        check_len("normals", attrs.normals.as_ref().map(Vec::len), count)?;
        if let Some(normals) = &attrs.normals {
            for (vertex, n) in normals.iter().enumerate() {
                let norm = n.norm();
                if !((norm - 1.0).abs() <= 1e-6) {
                    return Err(GeometryError::NonUnitNormal { vertex, norm });
                }
            }
        }
        Ok(Self {
            vertices,
            faces,
            colors: attrs.colors,
            uvs: attrs.uvs,
            normals: attrs.normals,
        })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn colors(&self) -> Option<&[Vec3]> {
        self.colors.as_deref()
    }

    pub fn uvs(&self) -> Option<&[Vec2]> {
        self.uvs.as_deref()
    }

    pub fn normals(&self) -> Option<&[Vec3]> {
        self.normals.as_deref()
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn attributes(&self) -> VertexAttributes {
        VertexAttributes {
            colors: self.colors.clone(),
            uvs: self.uvs.clone(),
            normals: self.normals.clone(),
        }
    }

    /// Same topology and attributes with new vertex positions.
    pub fn with_vertices(&self, vertices: Vec<Vec3>) -> Result<Self, GeometryError> {
        Self::new(vertices, self.faces.clone(), self.attributes())
    }

    pub fn with_attributes(&self, attrs: VertexAttributes) -> Result<Self, GeometryError> {
        Self::new(self.vertices.clone(), self.faces.clone(), attrs)
    }

    /// Radius of the smallest origin-centred ball around the bounding-box centre
    /// that contains every vertex.
    pub fn bounding_radius(&self) -> f64 {
        let (lo, hi) = self.vertices.iter().fold(
            (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY)),
            |(lo, hi), v| (lo.inf(v), hi.sup(v)),
        );
        let centre = (lo + hi) * 0.5;
        self.vertices
            .iter()
            .map(|v| (v - centre).norm())
            .fold(0.0, f64::max)
    }
}

fn check_len(
    attribute: &'static str,
    got: Option<usize>,
    expected: usize,
) -> Result<(), GeometryError> {
    match got {
        Some(got) if got != expected => Err(GeometryError::AttributeLengthMismatch {
            attribute,
            got,
            expected,
        }),
        _ => Ok(()),
    }
}

/// Unnormalized face normal `(b - a) x (c - a)`; its length is twice the face area.
pub fn face_cross(vertices: &[Vec3], face: &[usize; 3]) -> Vec3 {
    let a = vertices[face[0]];
    (vertices[face[1]] - a).cross(&(vertices[face[2]] - a))
}

/// Per-face unit normals plus a flag per face that is set for zero-area faces,
/// whose normal is reported as the zero vector.
pub fn face_normals(mesh: &Mesh) -> (Vec<Vec3>, Vec<bool>) {
    mesh.faces
        .iter()
        .map(|f| {
            let c = face_cross(&mesh.vertices, f);
            let n = c.norm();
            if n > 0.0 && n.is_finite() {
                (c / n, false)
            } else {
                (Vec3::zeros(), true)
            }
        })
        .unzip()
}

/// Saved state of [`vertex_normals`] for the backward pass.
#[derive(Debug, Clone)]
pub struct VertexNormalsTape {
    faces: Vec<[usize; 3]>,
    vertices: Vec<Vec3>,
    /// Sum of incident face crosses per vertex (before normalization).
    sums: Vec<Vec3>,
    isolated: Vec<bool>,
}

/// Area-weighted vertex normals. Vertices with no incident area get `(0, 0, 1)`
/// and are flagged.
pub fn vertex_normals(mesh: &Mesh) -> (Vec<Vec3>, Vec<bool>) {
    let (n, flags, _) = vertex_normals_with_tape(mesh);
    (n, flags)
}

pub fn vertex_normals_with_tape(mesh: &Mesh) -> (Vec<Vec3>, Vec<bool>, VertexNormalsTape) {
    let mut sums = vec![Vec3::zeros(); mesh.vertex_count()];
    for f in &mesh.faces {
        let c = face_cross(&mesh.vertices, f);
        for &v in f {
            sums[v] += c;
        }
    }
    let mut normals = Vec::with_capacity(sums.len());
    let mut isolated = Vec::with_capacity(sums.len());
    for s in &sums {
        let len = s.norm();
        if len > 1e-300 && len.is_finite() {
            normals.push(s / len);
            isolated.push(false);
        } else {
            normals.push(Vec3::z());
            isolated.push(true);
        }
    }
    let tape = VertexNormalsTape {
        faces: mesh.faces.clone(),
        vertices: mesh.vertices.clone(),
        sums,
        isolated: isolated.clone(),
    };
    (normals, isolated, tape)
}

/// Gradient of a scalar w.r.t. vertex positions given its gradient w.r.t. the
/// normalized vertex normals.
pub fn vertex_normals_backward(grad_normals: &[Vec3], tape: &VertexNormalsTape) -> Vec<Vec3> {
    let grad_sums: Vec<Vec3> = tape
        .sums
        .iter()
        .zip(grad_normals)
        .zip(&tape.isolated)
        .map(|((s, g), &iso)| {
            if iso {
                Vec3::zeros()
            } else {
                normalize_backward(s, g)
            }
        })
        .collect();
    let mut grad = vec![Vec3::zeros(); tape.vertices.len()];
    for f in &tape.faces {
        let gc = grad_sums[f[0]] + grad_sums[f[1]] + grad_sums[f[2]];
        cross_face_backward(&tape.vertices, f, &gc, &mut grad);
    }
    grad
}

/// Accumulates the gradient of `(b - a) x (c - a)` into the three face vertices.
pub(crate) fn cross_face_backward(vertices: &[Vec3], f: &[usize; 3], gc: &Vec3, grad: &mut [Vec3]) {
    let a = vertices[f[0]];
    let e1 = vertices[f[1]] - a;
    let e2 = vertices[f[2]] - a;
    // d/de1 (e1 x e2) . g = e2 x g ; d/de2 = g x e1
    let g1 = e2.cross(gc);
    let g2 = gc.cross(&e1);
    grad[f[1]] += g1;
    grad[f[2]] += g2;
    grad[f[0]] -= g1 + g2;
}

/// Backward of `x / |x|`.
pub fn normalize_backward(x: &Vec3, grad_out: &Vec3) -> Vec3 {
    let len = x.norm();
    let n = x / len;
    (grad_out - n * n.dot(grad_out)) / len
}

/// Edge-to-face and vertex-neighbour maps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    pub edge_faces: BTreeMap<(usize, usize), Vec<usize>>,
    pub vertex_neighbors: Vec<Vec<usize>>,
    /// Edges shared by more than two faces.
    pub non_manifold: Vec<(usize, usize)>,
}

impl Adjacency {
    /// Edges with exactly two incident faces.
    pub fn interior_edges(&self) -> impl Iterator<Item = ((usize, usize), usize, usize)> + '_ {
        self.edge_faces
            .iter()
            .filter(|(_, fs)| fs.len() == 2)
            .map(|(e, fs)| (*e, fs[0], fs[1]))
    }
}

pub fn adjacency(mesh: &Mesh) -> Adjacency {
    let mut edge_faces: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    let mut vertex_neighbors = vec![Vec::new(); mesh.vertex_count()];
    for (fi, f) in mesh.faces.iter().enumerate() {
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            let key = (a.min(b), a.max(b));
            edge_faces.entry(key).or_default().push(fi);
            vertex_neighbors[a].push(b);
            vertex_neighbors[b].push(a);
        }
    }
    for n in &mut vertex_neighbors {
        n.sort_unstable();
        n.dedup();
    }
    let non_manifold = edge_faces
        .iter()
        .filter(|(_, fs)| fs.len() > 2)
        .map(|(e, _)| *e)
        .collect();
    Adjacency {
        edge_faces,
        vertex_neighbors,
        non_manifold,
    }
}

/// Unit icosphere: an icosahedron subdivided `level` times with every vertex
/// pushed onto the unit sphere.
pub fn unit_sphere(level: u32) -> Result<Mesh, GeometryError> {
    if level > 5 {
        return Err(GeometryError::LevelOutOfRange(level));
    }
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut vertices: Vec<Vec3> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..level {
        let mut midpoints: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut midpoint = |a: usize, b: usize, vertices: &mut Vec<Vec3>| -> usize {
            *midpoints.entry((a.min(b), a.max(b))).or_insert_with(|| {
                vertices.push(((vertices[a] + vertices[b]) * 0.5).normalize());
                vertices.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for &[a, b, c] in &faces {
            let ab = midpoint(a, b, &mut vertices);
            let bc = midpoint(b, c, &mut vertices);
            let ca = midpoint(c, a, &mut vertices);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    Mesh::new(vertices, faces, VertexAttributes::default())
}
