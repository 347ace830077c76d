//! Carrying Gaussians with a driving mesh through per-triangle deformation
//! gradients `J = E_def * E_canon^-1`, where `E` holds the tangent
//! `v1 - v0`, the bitangent `v2 - v0` and the unit normal of a triangle.
//!
//! Each active texel of the Gaussian map is bound to a triangle and a
//! barycentric point by rasterizing the mesh in UV space. Texel `(x, y)`
//! samples the UV point `((x + 0.5) / w, (y + 0.5) / h)`.

use nalgebra::{Matrix3, Vector2, Vector3, Vector4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eigenmodel::TexelLayout;
use crate::error::{invalid, GemError, Result};
use crate::gaussian::{quat_mul, quat_to_rotation, rotation_to_quat, GaussianCloud};

/// Triangles with area at or below this are degenerate.
pub const MIN_TRIANGLE_AREA: f64 = 1e-12;

/// Symmetric stretch closer than this to the identity is treated as none.
const RIGID_TOL: f64 = 1e-12;

/// Where one texel sits on the mesh.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TexelBinding {
    pub triangle: usize,
    /// Non-negative, summing to 1.
    pub weights: [f64; 3],
}

/// Triangle mesh with per-vertex UVs and the texel-to-surface binding.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrespondenceMesh {
    vertices: Vec<Vector3<f64>>,
    triangles: Vec<[usize; 3]>,
    uv: Vec<Vector2<f64>>,
    binding: Vec<TexelBinding>,
}

impl CorrespondenceMesh {
    /// Mesh without a binding; see [`CorrespondenceMesh::bind`].
    pub fn new(vertices: Vec<Vector3<f64>>, triangles: Vec<[usize; 3]>, uv: Vec<Vector2<f64>>) -> Result<Self> {
        if uv.len() != vertices.len() {
            return Err(GemError::SizeMismatch {
                expected: format!("{} uvs", vertices.len()),
                found: uv.len().to_string(),
            });
        }
        if let Some(i) = vertices.iter().position(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(invalid(format!("vertex {i} is not finite")));
        }
        if let Some(i) = uv.iter().position(|t| !t.iter().all(|c| (0.0..=1.0).contains(c))) {
            return Err(invalid(format!("uv {i} = {:?} outside [0, 1]", uv[i])));
        }
        if let Some(f) = triangles.iter().position(|t| t.iter().any(|&i| i >= vertices.len())) {
            return Err(invalid(format!(
                "triangle {f} references a vertex beyond {}",
                vertices.len()
            )));
        }
        Ok(Self {
            vertices,
            triangles,
            uv,
            binding: Vec::new(),
        })
    }

    pub fn vertices(&self) -> &[Vector3<f64>] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn uv(&self) -> &[Vector2<f64>] {
        &self.uv
    }

    /// One entry per active texel, in layout order. Empty until bound.
    pub fn binding(&self) -> &[TexelBinding] {
        &self.binding
    }

    pub fn triangle_vertices(&self, f: usize) -> [Vector3<f64>; 3] {
        self.triangles[f].map(|i| self.vertices[i])
    }

    /// Binds every active texel of `layout`; fails if a texel center is not
    /// covered by any triangle in UV space.
    pub fn bind(mut self, layout: &TexelLayout) -> Result<Self> {
        layout.validate()?;
        let hits = rasterize_uv(&self, layout.tex_width, layout.tex_height);
        self.binding = layout
            .active
            .iter()
            .map(|&t| {
                hits[t].ok_or_else(|| {
                    invalid(format!(
                        "texel ({}, {}) is not covered by any triangle",
                        t % layout.tex_width,
                        t / layout.tex_width
                    ))
                })
            })
            .collect::<Result<_>>()?;
        Ok(self)
    }

    /// Same topology, UVs and binding with new vertex positions.
    pub fn with_vertices(&self, vertices: Vec<Vector3<f64>>) -> Result<Self> {
        if vertices.len() != self.vertices.len() {
            return Err(GemError::SizeMismatch {
                expected: format!("{} vertices", self.vertices.len()),
                found: vertices.len().to_string(),
            });
        }
        if let Some(i) = vertices.iter().position(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(invalid(format!("vertex {i} is not finite")));
        }
        Ok(Self {
            vertices,
            triangles: self.triangles.clone(),
            uv: self.uv.clone(),
            binding: self.binding.clone(),
        })
    }

    /// The surface point of a binding.
    pub fn surface_point(&self, b: &TexelBinding) -> Vector3<f64> {
        let [a, c, d] = self.triangle_vertices(b.triangle);
        a * b.weights[0] + c * b.weights[1] + d * b.weights[2]
    }
}

/// Texels of a `width x height` grid whose centers fall inside some UV
/// triangle.
pub fn uv_coverage(mesh: &CorrespondenceMesh, width: usize, height: usize) -> Vec<bool> {
    rasterize_uv(mesh, width, height).iter().map(Option::is_some).collect()
}

/// Per texel, the lowest-index triangle covering its center.
fn rasterize_uv(mesh: &CorrespondenceMesh, width: usize, height: usize) -> Vec<Option<TexelBinding>> {
    let mut hits: Vec<Option<TexelBinding>> = vec![None; width * height];
    for (f, tri) in mesh.triangles.iter().enumerate() {
        let [a, b, c] = tri.map(|i| Vector2::new(mesh.uv[i].x * width as f64, mesh.uv[i].y * height as f64));
        let area = (b - a).perp(&(c - a));
        if area.abs() <= f64::EPSILON {
            continue;
        }
        let lo = a.inf(&b).inf(&c);
        let hi = a.sup(&b).sup(&c);
        let x0 = (lo.x - 0.5).ceil().max(0.0) as usize;
        let y0 = (lo.y - 0.5).ceil().max(0.0) as usize;
        let x1 = ((hi.x - 0.5).floor() as i64).min(width as i64 - 1);
        let y1 = ((hi.y - 0.5).floor() as i64).min(height as i64 - 1);
        if x1 < 0 || y1 < 0 {
            continue;
        }
        for y in y0..=y1 as usize {
            for x in x0..=x1 as usize {
                let slot = &mut hits[y * width + x];
                if slot.is_some() {
                    continue;
                }
                let p = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
                let w1 = (p - a).perp(&(c - a)) / area;
                let w2 = (b - a).perp(&(p - a)) / area;
                let w = [1.0 - w1 - w2, w1, w2];
                let eps = 1e-12;
                if w.iter().all(|&v| v >= -eps) {
                    let w = w.map(|v| v.max(0.0));
                    let s: f64 = w.iter().sum();
                    *slot = Some(TexelBinding {
                        triangle: f,
                        weights: w.map(|v| v / s),
                    });
                }
            }
        }
    }
    hits
}

/// Columns: tangent, bitangent, unit normal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrenetFrame(pub Matrix3<f64>);

fn triangle_area(v: &[Vector3<f64>; 3]) -> f64 {
    0.5 * (v[1] - v[0]).cross(&(v[2] - v[0])).norm()
}

pub fn frenet_frame(v: &[Vector3<f64>; 3], triangle: usize) -> Result<FrenetFrame> {
    if !(triangle_area(v) > MIN_TRIANGLE_AREA) {
        return Err(GemError::DegenerateTriangle { triangle });
    }
    let t = v[1] - v[0];
    let b = v[2] - v[0];
    let n = t.cross(&b).normalize();
    Ok(FrenetFrame(Matrix3::from_columns(&[t, b, n])))
}

pub fn deformation_gradient(canonical: &FrenetFrame, deformed: &FrenetFrame) -> Result<Matrix3<f64>> {
    let inv = canonical
        .0
        .try_inverse()
        .ok_or_else(|| invalid("canonical frame is singular"))?;
    Ok(deformed.0 * inv)
}

/// `J = U P` with `U` a rotation and `P` symmetric positive definite.
/// `None` when `det J <= 0`.
pub fn polar_decomposition(j: &Matrix3<f64>) -> Option<(Matrix3<f64>, Matrix3<f64>)> {
    if !(j.determinant() > 0.0) {
        return None;
    }
    // Scaled Newton iteration on U <- (g U + U^-T / g) / 2.
    let mut u = *j;
    for _ in 0..100 {
        let inv_t = u.try_inverse()?.transpose();
        let g = (inv_t.norm() / u.norm()).sqrt();
        let next = (u * g + inv_t / g) * 0.5;
        let delta = (next - u).norm();
        u = next;
        if delta <= 4.0 * f64::EPSILON * u.norm() {
            break;
        }
    }
    let p = u.transpose() * j;
    let p = (p + p.transpose()) * 0.5;
    Some((u, p))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct DeformConfig {
    /// Add the symmetric stretch of `J` to the log-scales; otherwise
    /// Gaussians are only rotated.
    pub propagate_stretch: bool,
}

impl Default for DeformConfig {
    fn default() -> Self {
        Self { propagate_stretch: true }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DeformStats {
    pub gaussians: usize,
    /// Gaussians on degenerate deformed triangles, moved by translation only.
    pub translation_only: usize,
    pub stretched: usize,
}

enum TriangleMap {
    Identity,
    TranslationOnly,
    Affine {
        j: Matrix3<f64>,
        rotation: Vector4<f64>,
        stretch: Option<Matrix3<f64>>,
    },
}

/// Moves a canonical cloud from `canonical` onto `deformed`.
///
/// Positions follow the bound surface point plus `J` applied to the offset
/// from it. Rotations are composed with the rotational polar factor of `J`,
/// and with `propagate_stretch` each Gaussian axis is scaled by the length
/// the symmetric factor gives it.
pub fn apply_deformation(
    cloud: &GaussianCloud,
    canonical: &CorrespondenceMesh,
    deformed: &CorrespondenceMesh,
    cfg: &DeformConfig,
) -> Result<(GaussianCloud, DeformStats)> {
    let binding = canonical.binding();
    if binding.len() != cloud.len() {
        return Err(GemError::SizeMismatch {
            expected: format!("{} bound texels", binding.len()),
            found: format!("{} gaussians", cloud.len()),
        });
    }
    if deformed.triangles != canonical.triangles || deformed.vertices.len() != canonical.vertices.len() {
        return Err(invalid("deformed mesh topology differs from the canonical mesh"));
    }
    let mut used = vec![false; canonical.triangles.len()];
    for b in binding {
        used[b.triangle] = true;
    }
    let maps: Vec<Option<TriangleMap>> = (0..canonical.triangles.len())
        .into_par_iter()
        .map(|f| {
            if !used[f] {
                return Ok(None);
            }
            let a = canonical.triangle_vertices(f);
            let b = deformed.triangle_vertices(f);
            if a == b {
                return Ok(Some(TriangleMap::Identity));
            }
            let ea = frenet_frame(&a, f)?;
            let Ok(eb) = frenet_frame(&b, f) else {
                return Ok(Some(TriangleMap::TranslationOnly));
            };
            let j = deformation_gradient(&ea, &eb)?;
            let Some((u, p)) = polar_decomposition(&j) else {
                return Ok(Some(TriangleMap::TranslationOnly));
            };
            let stretch = (cfg.propagate_stretch && (p - Matrix3::identity()).amax() > RIGID_TOL).then_some(p);
            Ok(Some(TriangleMap::Affine {
                j,
                rotation: rotation_to_quat(&u),
                stretch,
            }))
        })
        .collect::<Result<_>>()?;

    let n = cloud.len();
    if maps.iter().flatten().all(|m| matches!(m, TriangleMap::Identity)) {
        return Ok((
            cloud.clone(),
            DeformStats {
                gaussians: n,
                ..DeformStats::default()
            },
        ));
    }
    let mut positions = cloud.positions().to_vec();
    let mut rotations = cloud.rotations().to_vec();
    let mut log_scales = cloud.log_scales().to_vec();
    let mut stats = DeformStats {
        gaussians: n,
        ..DeformStats::default()
    };
    for i in 0..n {
        let b = &binding[i];
        let map = maps[b.triangle].as_ref().expect("bound triangle has a map");
        let offset = || cloud.positions()[i] - canonical.surface_point(b);
        match map {
            TriangleMap::Identity => {}
            TriangleMap::TranslationOnly => {
                positions[i] = deformed.surface_point(b) + offset();
                stats.translation_only += 1;
            }
            TriangleMap::Affine { j, rotation, stretch } => {
                positions[i] = deformed.surface_point(b) + j * offset();
                let q = cloud.rotations()[i];
                rotations[i] = quat_mul(rotation, &q);
                if let Some(p) = stretch {
                    let axes = quat_to_rotation(&q);
                    for k in 0..3 {
                        log_scales[i][k] += (p * axes.column(k)).norm().ln();
                    }
                    stats.stretched += 1;
                }
            }
        }
    }
    let out = GaussianCloud::new(
        positions,
        rotations,
        log_scales,
        cloud.opacity_logits().to_vec(),
        cloud.colors().to_vec(),
    )?;
    Ok((out, stats))
}
