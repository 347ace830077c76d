//! Wavefront OBJ meshes with texture coordinates (`v`, `vt`, `f a/ta`).
//!
//! A vertex referenced with two different texture coordinates is split so
//! that every vertex carries exactly one UV. Polygons are fan-triangulated.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Vector2, Vector3};

use crate::deform::CorrespondenceMesh;
use crate::error::{malformed, Result};

/// Writes vertex `i` with texture coordinate `i`; coordinates use the
/// shortest representation that parses back to the same `f64`.
pub fn encode_obj(mesh: &CorrespondenceMesh) -> String {
    let mut out = String::new();
    for v in mesh.vertices() {
        let _ = writeln!(out, "v {} {} {}", v.x, v.y, v.z);
    }
    for t in mesh.uv() {
        let _ = writeln!(out, "vt {} {}", t.x, t.y);
    }
    for f in mesh.triangles() {
        let [a, b, c] = f.map(|i| i + 1);
        let _ = writeln!(out, "f {a}/{a} {b}/{b} {c}/{c}");
    }
    out
}

fn resolve(token: &str, len: usize, line: usize) -> Result<usize> {
    let bad = || malformed("obj", format!("line {line}: bad index {token:?}"));
    let i: i64 = token.parse().map_err(|_| bad())?;
    let idx = if i > 0 {
        i - 1
    } else if i < 0 {
        len as i64 + i
    } else {
        return Err(bad());
    };
    if idx < 0 || idx as usize >= len {
        return Err(malformed("obj", format!("line {line}: index {i} out of range")));
    }
    Ok(idx as usize)
}

pub fn decode_obj(text: &str) -> Result<CorrespondenceMesh> {
    let mut positions: Vec<Vector3<f64>> = Vec::new();
    let mut texcoords: Vec<Vector2<f64>> = Vec::new();
    let mut faces: Vec<Vec<(usize, usize)>> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let raw = raw.split('#').next().unwrap_or("");
        let mut tok = raw.split_whitespace();
        let num = |t: Option<&str>| -> Result<f64> {
            t.and_then(|s| s.parse().ok())
                .ok_or_else(|| malformed("obj", format!("line {line}: expected a number")))
        };
        match tok.next() {
            Some("v") => {
                let (x, y, z) = (num(tok.next())?, num(tok.next())?, num(tok.next())?);
                positions.push(Vector3::new(x, y, z));
            }
            Some("vt") => {
                let (u, v) = (num(tok.next())?, num(tok.next())?);
                texcoords.push(Vector2::new(u, v));
            }
            Some("f") => {
                let mut corners = Vec::new();
                for c in tok {
                    let mut parts = c.split('/');
                    let v = resolve(parts.next().unwrap_or(""), positions.len(), line)?;
                    let t = match parts.next() {
                        Some(t) if !t.is_empty() => resolve(t, texcoords.len(), line)?,
                        _ => return Err(malformed("obj", format!("line {line}: face corner {c:?} has no uv"))),
                    };
                    corners.push((v, t));
                }
                if corners.len() < 3 {
                    return Err(malformed("obj", format!("line {line}: face with {} corners", corners.len())));
                }
                faces.push(corners);
            }
            _ => {}
        }
    }

    // Keep the file's vertex order and split only on conflicting UVs.
    let mut uv_of: Vec<Option<usize>> = vec![None; positions.len()];
    let mut vertices = positions.clone();
    let mut uv = vec![Vector2::zeros(); positions.len()];
    let mut split: HashMap<(usize, usize), usize> = HashMap::new();
    let mut triangles = Vec::new();
    for face in &faces {
        let mut ids = Vec::with_capacity(face.len());
        for &(v, t) in face {
            let id = match uv_of[v] {
                None => {
                    uv_of[v] = Some(t);
                    uv[v] = texcoords[t];
                    v
                }
                Some(t0) if t0 == t => v,
                Some(_) => *split.entry((v, t)).or_insert_with(|| {
                    vertices.push(positions[v]);
                    uv.push(texcoords[t]);
                    vertices.len() - 1
                }),
            };
            ids.push(id);
        }
        for k in 1..ids.len() - 1 {
            triangles.push([ids[0], ids[k], ids[k + 1]]);
        }
    }
    CorrespondenceMesh::new(vertices, triangles, uv)
}

pub fn save_obj(mesh: &CorrespondenceMesh, path: &Path) -> Result<()> {
    std::fs::write(path, encode_obj(mesh))?;
    Ok(())
}

pub fn load_obj(path: &Path) -> Result<CorrespondenceMesh> {
    decode_obj(&std::fs::read_to_string(path)?)
}
