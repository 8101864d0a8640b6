//! Wavefront OBJ subset: `v` (optionally with RGB), `vt`, `vn`, `f`.
//!
//! Corners that pair one position with different texture coordinates or
//! normals are split into separate vertices. The first attribute pairing seen
//! for a position keeps the position's index; later conflicting pairings are
//! appended after all positions. Positions never referenced by a face keep
//! their index and get zero uvs and `+z` normals when those attributes exist.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::geometry::{GeometryError, Mesh, Vec2, Vec3, VertexAttributes};

#[derive(Debug, Error)]
pub enum ObjError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid mesh: {0}")]
    Geometry(#[from] GeometryError),
}

/// A skipped record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjWarning {
    pub line: usize,
    pub directive: String,
}

pub fn load_obj(path: &Path) -> Result<Mesh, ObjError> {
    load_obj_with_warnings(path).map(|(m, _)| m)
}

pub fn load_obj_with_warnings(path: &Path) -> Result<(Mesh, Vec<ObjWarning>), ObjError> {
    let text = std::fs::read_to_string(path).map_err(|source| ObjError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_obj(&text)
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
struct Corner {
    v: usize,
    vt: Option<usize>,
    vn: Option<usize>,
}

struct Cursor<'a> {
    line: usize,
    text: &'a str,
}

impl Cursor<'_> {
    fn error(&self, token: &str, message: impl Into<String>) -> ObjError {
        // token is a subslice of the line
        let column = token.as_ptr() as usize - self.text.as_ptr() as usize + 1;
        ObjError::Parse {
            line: self.line,
            column,
            message: message.into(),
        }
    }

    fn float(&self, token: &str) -> Result<f64, ObjError> {
        token
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| self.error(token, format!("expected a finite number, found `{token}`")))
    }

    fn index(&self, token: &str, part: &str, count: usize, what: &str) -> Result<usize, ObjError> {
        let raw: i64 = part
            .parse()
            .map_err(|_| self.error(token, format!("invalid {what} index `{part}`")))?;
        let resolved = if raw > 0 {
            raw - 1
        } else if raw < 0 {
            count as i64 + raw
        } else {
            return Err(self.error(token, format!("{what} index 0 is not allowed")));
        };
        if resolved < 0 || resolved >= count as i64 {
            return Err(self.error(token, format!("{what} index {raw} is out of range ({count} defined)")));
        }
        Ok(resolved as usize)
    }
}

/// Parses OBJ text. Unsupported directives are skipped and reported.
pub fn parse_obj(text: &str) -> Result<(Mesh, Vec<ObjWarning>), ObjError> {
    let mut positions: Vec<Vec3> = Vec::new();
    let mut colors: Vec<Vec3> = Vec::new();
    let mut texcoords: Vec<Vec2> = Vec::new();
    let mut normals: Vec<Vec3> = Vec::new();
    let mut polygons: Vec<Vec<Corner>> = Vec::new();
    let mut warnings = Vec::new();
    let mut corner_shape: Option<(bool, bool)> = None;

    for (i, raw) in text.lines().enumerate() {
        let cur = Cursor { line: i + 1, text: raw };
        let content = raw.split('#').next().unwrap_or("");
        let mut tokens = content.split_whitespace();
        let Some(head) = tokens.next() else { continue };
        let args: Vec<&str> = tokens.collect();
        let floats = |n_min: usize, n_max: usize| -> Result<Vec<f64>, ObjError> {
            if args.len() < n_min || args.len() > n_max {
                return Err(cur.error(head, format!("`{head}` takes {n_min} to {n_max} values, found {}", args.len())));
            }
            args.iter().map(|t| cur.float(t)).collect()
        };
        match head {
            "v" => {
                let v = floats(3, 6)?;
                match v.len() {
                    3 => positions.push(Vec3::new(v[0], v[1], v[2])),
                    4 => {
                        if v[3] == 0.0 {
                            return Err(cur.error(args[3], "homogeneous weight must be non-zero"));
                        }
                        positions.push(Vec3::new(v[0], v[1], v[2]) / v[3]);
                    }
                    6 => {
                        positions.push(Vec3::new(v[0], v[1], v[2]));
                        colors.push(Vec3::new(v[3], v[4], v[5]));
                    }
                    _ => return Err(cur.error(head, "`v` takes 3, 4 or 6 values")),
                }
                if !colors.is_empty() && colors.len() != positions.len() {
                    return Err(cur.error(head, "vertex colours must be given for every vertex or none"));
                }
            }
            "vt" => {
                let v = floats(1, 3)?;
                texcoords.push(Vec2::new(v[0], v.get(1).copied().unwrap_or(0.0)));
            }
            "vn" => {
                let v = floats(3, 3)?;
                let n = Vec3::new(v[0], v[1], v[2]);
                let len = n.norm();
                if !(len > 0.0) {
                    return Err(cur.error(head, "normal has zero length"));
                }
                normals.push(n / len);
            }
            "f" => {
                if args.len() < 3 {
                    return Err(cur.error(head, format!("face needs at least 3 vertices, found {}", args.len())));
                }
                let mut poly = Vec::with_capacity(args.len());
                for &tok in &args {
                    let parts: Vec<&str> = tok.split('/').collect();
                    if parts.len() > 3 || parts[0].is_empty() {
                        return Err(cur.error(tok, format!("malformed face vertex `{tok}`")));
                    }
                    let v = cur.index(tok, parts[0], positions.len(), "vertex")?;
                    let vt = match parts.get(1) {
                        Some(p) if !p.is_empty() => Some(cur.index(tok, p, texcoords.len(), "texture")?),
                        _ => None,
                    };
                    let vn = match parts.get(2) {
                        Some(p) if !p.is_empty() => Some(cur.index(tok, p, normals.len(), "normal")?),
                        Some(_) => return Err(cur.error(tok, format!("malformed face vertex `{tok}`"))),
                        None => None,
                    };
                    let shape = (vt.is_some(), vn.is_some());
                    match corner_shape {
                        None => corner_shape = Some(shape),
                        Some(s) if s != shape => {
                            return Err(cur.error(tok, "faces mix corners with and without texture or normal indices"))
                        }
                        _ => {}
                    }
                    poly.push(Corner { v, vt, vn });
                }
                polygons.push(poly);
            }
            other => warnings.push(ObjWarning {
                line: i + 1,
                directive: other.to_string(),
            }),
        }
    }

    let (has_uv, has_n) = corner_shape.unwrap_or((false, false));
    let mut primary: Vec<Option<Corner>> = vec![None; positions.len()];
    let mut extra: HashMap<Corner, usize> = HashMap::new();
    let mut extra_order: Vec<Corner> = Vec::new();
    let mut faces = Vec::new();
    let mut resolve = |c: Corner| -> usize {
        match primary[c.v] {
            None => {
                primary[c.v] = Some(c);
                c.v
            }
            Some(p) if p == c => c.v,
            Some(_) => *extra.entry(c).or_insert_with(|| {
                extra_order.push(c);
                positions.len() + extra_order.len() - 1
            }),
        }
    };
    for poly in &polygons {
        let ids: Vec<usize> = poly.iter().map(|&c| resolve(c)).collect();
        for k in 1..ids.len() - 1 {
            faces.push([ids[0], ids[k], ids[k + 1]]);
        }
    }

    let corners: Vec<Option<Corner>> = primary.iter().copied().chain(extra_order.iter().map(|&c| Some(c))).collect();
    let pos_of = |c: &Option<Corner>, i: usize| c.map_or(i, |c| c.v);
    let vertices: Vec<Vec3> = corners.iter().enumerate().map(|(i, c)| positions[pos_of(c, i)]).collect();
    let attrs = VertexAttributes {
        colors: (!colors.is_empty())
            .then(|| corners.iter().enumerate().map(|(i, c)| colors[pos_of(c, i)]).collect()),
        uvs: has_uv.then(|| {
            corners
                .iter()
                .map(|c| c.and_then(|c| c.vt).map_or(Vec2::zeros(), |t| texcoords[t]))
                .collect()
        }),
        normals: has_n.then(|| {
            corners
                .iter()
                .map(|c| c.and_then(|c| c.vn).map_or(Vec3::z(), |n| normals[n]))
                .collect()
        }),
    };
    Ok((Mesh::new(vertices, faces, attrs)?, warnings))
}

/// Serializes a mesh. Output is deterministic and round-trips exactly.
pub fn write_obj(mesh: &Mesh) -> String {
    let mut s = String::new();
    let colors = mesh.colors();
    for (i, v) in mesh.vertices().iter().enumerate() {
        match colors {
            Some(c) => writeln!(s, "v {} {} {} {} {} {}", v.x, v.y, v.z, c[i].x, c[i].y, c[i].z),
            None => writeln!(s, "v {} {} {}", v.x, v.y, v.z),
        }
        .unwrap();
    }
    for t in mesh.uvs().into_iter().flatten() {
        writeln!(s, "vt {} {}", t.x, t.y).unwrap();
    }
    for n in mesh.normals().into_iter().flatten() {
        writeln!(s, "vn {} {} {}", n.x, n.y, n.z).unwrap();
    }
    let (uv, nrm) = (mesh.uvs().is_some(), mesh.normals().is_some());
    for f in mesh.faces() {
        s.push('f');
        for &i in f {
            let i = i + 1;
            match (uv, nrm) {
                (false, false) => write!(s, " {i}"),
                (true, false) => write!(s, " {i}/{i}"),
                (false, true) => write!(s, " {i}//{i}"),
                (true, true) => write!(s, " {i}/{i}/{i}"),
            }
            .unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn save_obj(mesh: &Mesh, path: &Path) -> Result<(), ObjError> {
    std::fs::write(path, write_obj(mesh)).map_err(|source| ObjError::Io {
        path: path.display().to_string(),
        source,
    })
}
