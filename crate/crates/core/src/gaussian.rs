//! Gaussian primitives and the closed-form covariance / projection math
//! shared by the renderer, the eigenmodel and the deformation code.
//!
//! Quaternions are stored as `Vector4` in `(w, x, y, z)` order. Scales are
//! stored as natural logs and opacities as logits; activations are applied
//! at render time.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3, Vector4};

use crate::camera::Camera;
use crate::error::{invalid, Result};

/// Tolerance on the unit norm of stored quaternions.
pub const QUAT_NORM_TOL: f64 = 1e-6;

/// Determinant floor below which a 2D covariance is treated as singular.
pub const SINGULAR_DET: f64 = 1e-12;

/// Fixed-size set of 3D Gaussians.
///
/// Rotations are renormalized on every construction and mutation, colors are
/// kept in `[0, 1]` and log-scales must exponentiate to finite positive values.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianCloud {
    positions: Vec<Vector3<f64>>,
    rotations: Vec<Vector4<f64>>,
    log_scales: Vec<Vector3<f64>>,
    opacity_logits: Vec<f64>,
    colors: Vec<Vector3<f64>>,
}

impl GaussianCloud {
    pub fn new(
        positions: Vec<Vector3<f64>>,
        rotations: Vec<Vector4<f64>>,
        log_scales: Vec<Vector3<f64>>,
        opacity_logits: Vec<f64>,
        colors: Vec<Vector3<f64>>,
    ) -> Result<Self> {
        let n = positions.len();
        if rotations.len() != n
            || log_scales.len() != n
            || opacity_logits.len() != n
            || colors.len() != n
        {
            return Err(invalid(format!(
                "attribute lengths differ: {} positions, {} rotations, {} scales, {} opacities, {} colors",
                n,
                rotations.len(),
                log_scales.len(),
                opacity_logits.len(),
                colors.len()
            )));
        }
        let mut cloud = Self {
            positions: Vec::with_capacity(n),
            rotations: Vec::with_capacity(n),
            log_scales: Vec::with_capacity(n),
            opacity_logits: Vec::with_capacity(n),
            colors: Vec::with_capacity(n),
        };
        for i in 0..n {
            cloud.push(
                positions[i],
                rotations[i],
                log_scales[i],
                opacity_logits[i],
                colors[i],
            )?;
        }
        Ok(cloud)
    }

    /// Appends one Gaussian, validating and normalizing it.
    pub fn push(
        &mut self,
        position: Vector3<f64>,
        rotation: Vector4<f64>,
        log_scale: Vector3<f64>,
        opacity_logit: f64,
        color: Vector3<f64>,
    ) -> Result<()> {
        let index = self.len();
        check_position(index, &position)?;
        let rotation = normalize_quat_checked(index, &rotation)?;
        check_log_scale(index, &log_scale)?;
        check_opacity(index, opacity_logit)?;
        check_color(index, &color)?;
        self.positions.push(position);
        self.rotations.push(rotation);
        self.log_scales.push(log_scale);
        self.opacity_logits.push(opacity_logit);
        self.colors.push(color);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Vector3<f64>] {
        &self.positions
    }

    pub fn rotations(&self) -> &[Vector4<f64>] {
        &self.rotations
    }

    pub fn log_scales(&self) -> &[Vector3<f64>] {
        &self.log_scales
    }

    pub fn opacity_logits(&self) -> &[f64] {
        &self.opacity_logits
    }

    pub fn colors(&self) -> &[Vector3<f64>] {
        &self.colors
    }

    pub fn set_position(&mut self, i: usize, value: Vector3<f64>) -> Result<()> {
        check_position(i, &value)?;
        self.positions[i] = value;
        Ok(())
    }

    /// Stores `value / |value|`.
    pub fn set_rotation(&mut self, i: usize, value: Vector4<f64>) -> Result<()> {
        self.rotations[i] = normalize_quat_checked(i, &value)?;
        Ok(())
    }

    pub fn set_log_scale(&mut self, i: usize, value: Vector3<f64>) -> Result<()> {
        check_log_scale(i, &value)?;
        self.log_scales[i] = value;
        Ok(())
    }

    pub fn set_opacity_logit(&mut self, i: usize, value: f64) -> Result<()> {
        check_opacity(i, value)?;
        self.opacity_logits[i] = value;
        Ok(())
    }

    pub fn set_color(&mut self, i: usize, value: Vector3<f64>) -> Result<()> {
        check_color(i, &value)?;
        self.colors[i] = value;
        Ok(())
    }

    /// Returns a copy with every Gaussian rigidly transformed by `x -> R x + t`.
    pub fn transformed(&self, rotation: &Matrix3<f64>, translation: &Vector3<f64>) -> Result<Self> {
        let q = rotation_to_quat(rotation);
        let mut out = self.clone();
        for i in 0..self.len() {
            out.positions[i] = rotation * self.positions[i] + translation;
            out.rotations[i] = normalize_quat_checked(i, &quat_mul(&q, &self.rotations[i]))?;
        }
        Ok(out)
    }

    /// Axis-aligned bounds of the Gaussian centers, `None` when empty.
    pub fn bounds(&self) -> Option<(Vector3<f64>, Vector3<f64>)> {
        let first = *self.positions.first()?;
        Some(self.positions.iter().fold((first, first), |(lo, hi), p| {
            (lo.inf(p), hi.sup(p))
        }))
    }
}

fn check_position(i: usize, p: &Vector3<f64>) -> Result<()> {
    if p.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(invalid(format!("gaussian {i}: non-finite position")))
    }
}

fn check_log_scale(i: usize, s: &Vector3<f64>) -> Result<()> {
    if s.iter().all(|v| v.is_finite() && v.exp().is_finite() && v.exp() > 0.0) {
        Ok(())
    } else {
        Err(invalid(format!("gaussian {i}: log-scale {s:?} does not exponentiate to a finite positive scale")))
    }
}

fn check_opacity(i: usize, o: f64) -> Result<()> {
    if o.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("gaussian {i}: non-finite opacity logit")))
    }
}

fn check_color(i: usize, c: &Vector3<f64>) -> Result<()> {
    if c.iter().all(|v| (0.0..=1.0).contains(v)) {
        Ok(())
    } else {
        Err(invalid(format!("gaussian {i}: color {c:?} outside [0, 1]")))
    }
}

fn normalize_quat_checked(i: usize, q: &Vector4<f64>) -> Result<Vector4<f64>> {
    let n = q.norm();
    if !n.is_finite() || n < 1e-12 {
        return Err(invalid(format!("gaussian {i}: quaternion {q:?} cannot be normalized")));
    }
    Ok(q / n)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`sigmoid`], with `p` clamped away from 0 and 1.
pub fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-7, 1.0 - 1e-7);
    (p / (1.0 - p)).ln()
}

/// Rotation matrix of the (normalized) quaternion `(w, x, y, z)`.
pub fn quat_to_rotation(q: &Vector4<f64>) -> Matrix3<f64> {
    let q = q / q.norm();
    unit_quat_to_rotation(&q)
}

pub(crate) fn unit_quat_to_rotation(q: &Vector4<f64>) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Quaternion `(w, x, y, z)` of a proper rotation matrix, with `w >= 0`.
pub fn rotation_to_quat(r: &Matrix3<f64>) -> Vector4<f64> {
    // Shepperd's method: pick the largest diagonal combination.
    let trace = r[(0, 0)] + r[(1, 1)] + r[(2, 2)];
    let q = if trace > r[(0, 0)].max(r[(1, 1)]).max(r[(2, 2)]) {
        let s = (1.0 + trace).sqrt() * 2.0;
        Vector4::new(
            0.25 * s,
            (r[(2, 1)] - r[(1, 2)]) / s,
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(1, 0)] - r[(0, 1)]) / s,
        )
    } else if r[(0, 0)] >= r[(1, 1)] && r[(0, 0)] >= r[(2, 2)] {
        let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
        Vector4::new(
            (r[(2, 1)] - r[(1, 2)]) / s,
            0.25 * s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
        )
    } else if r[(1, 1)] >= r[(2, 2)] {
        let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
        Vector4::new(
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            0.25 * s,
            (r[(1, 2)] + r[(2, 1)]) / s,
        )
    } else {
        let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
        Vector4::new(
            (r[(1, 0)] - r[(0, 1)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
            (r[(1, 2)] + r[(2, 1)]) / s,
            0.25 * s,
        )
    };
    let q = q / q.norm();
    if q[0] < 0.0 {
        -q
    } else {
        q
    }
}

/// Hamilton product `a * b` of `(w, x, y, z)` quaternions.
pub fn quat_mul(a: &Vector4<f64>, b: &Vector4<f64>) -> Vector4<f64> {
    let (aw, ax, ay, az) = (a[0], a[1], a[2], a[3]);
    let (bw, bx, by, bz) = (b[0], b[1], b[2], b[3]);
    Vector4::new(
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    )
}

/// Symmetric positive semidefinite 3x3 covariance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Covariance3(Matrix3<f64>);

impl Covariance3 {
    /// Wraps `m`, symmetrizing it. Fails if the smallest eigenvalue is below `-1e-9`.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(invalid("non-finite covariance"));
        }
        let sym = (m + m.transpose()) * 0.5;
        let min_eig = sym.symmetric_eigenvalues().min();
        if min_eig < -1e-9 {
            return Err(invalid(format!("covariance has negative eigenvalue {min_eig}")));
        }
        Ok(Self(sym))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// The six unique entries `(xx, xy, xz, yy, yz, zz)`.
    pub fn unique(&self) -> [f64; 6] {
        let m = &self.0;
        [m[(0, 0)], m[(0, 1)], m[(0, 2)], m[(1, 1)], m[(1, 2)], m[(2, 2)]]
    }
}

/// `R diag(exp(2 s)) R^T` for rotation `q` and log-scale `s`.
pub fn covariance3d(rotation: &Vector4<f64>, log_scale: &Vector3<f64>) -> Result<Covariance3> {
    if !rotation.iter().chain(log_scale.iter()).all(|v| v.is_finite()) {
        return Err(invalid("non-finite rotation or log-scale"));
    }
    let norm = rotation.norm();
    if norm < 1e-12 {
        return Err(invalid("zero quaternion"));
    }
    let r = unit_quat_to_rotation(&(rotation / norm));
    let s2 = log_scale.map(|s| (2.0 * s).exp());
    let m = r * Matrix3::from_diagonal(&s2) * r.transpose();
    // R S S^T R^T is symmetric PSD by construction; only symmetrize rounding.
    Ok(Covariance3((m + m.transpose()) * 0.5))
}

/// Near plane and low-pass dilation used when projecting Gaussians.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ProjectionParams {
    pub near_plane: f64,
    /// Added to the diagonal of every projected covariance, in px^2.
    pub dilation: f64,
}

impl Default for ProjectionParams {
    fn default() -> Self {
        Self {
            near_plane: 0.01,
            dilation: 0.3,
        }
    }
}

/// A Gaussian projected onto the image plane.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectedGaussian {
    /// Image-space covariance, dilation included.
    pub cov: Matrix2<f64>,
    /// Pixel-space center.
    pub center: Vector2<f64>,
    /// Camera-space z.
    pub depth: f64,
    /// Camera-space mean.
    pub cam_point: Vector3<f64>,
    /// Jacobian of the perspective projection at `cam_point`.
    pub jacobian: Matrix2x3<f64>,
}

/// Result of projecting one Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Projection {
    Visible(ProjectedGaussian),
    /// In front of the near plane or behind the camera.
    Culled,
}

/// Jacobian of `(fx x/z + cx, fy y/z + cy)` with respect to the camera-space point.
pub fn projection_jacobian(cam: &Camera, p: &Vector3<f64>) -> Matrix2x3<f64> {
    let (x, y, z) = (p.x, p.y, p.z);
    let iz = 1.0 / z;
    Matrix2x3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * x * iz * iz,
        0.0,
        cam.fy * iz,
        -cam.fy * y * iz * iz,
    )
}

/// Projects a 3D Gaussian with the local affine approximation `J W Sigma W^T J^T`.
pub fn project_covariance(
    cov: &Covariance3,
    mean: &Vector3<f64>,
    cam: &Camera,
    params: &ProjectionParams,
) -> Projection {
    let w = cam.rotation();
    let t = w * mean + cam.translation();
    if !(t.z > params.near_plane) {
        return Projection::Culled;
    }
    let j = projection_jacobian(cam, &t);
    let jw = j * w;
    let mut cov2 = jw * cov.matrix() * jw.transpose();
    cov2 = (cov2 + cov2.transpose()) * 0.5;
    cov2[(0, 0)] += params.dilation;
    cov2[(1, 1)] += params.dilation;
    let center = Vector2::new(cam.fx * t.x / t.z + cam.cx, cam.fy * t.y / t.z + cam.cy);
    Projection::Visible(ProjectedGaussian {
        cov: cov2,
        center,
        depth: t.z,
        cam_point: t,
        jacobian: j,
    })
}

/// Inverse of a 2x2 symmetric covariance, or `None` when `det <= 1e-12`.
pub fn conic(cov2: &Matrix2<f64>) -> Option<Matrix2<f64>> {
    let det = cov2[(0, 0)] * cov2[(1, 1)] - cov2[(0, 1)] * cov2[(1, 0)];
    if !(det > SINGULAR_DET) || !det.is_finite() {
        return None;
    }
    let inv = 1.0 / det;
    Some(Matrix2::new(
        cov2[(1, 1)] * inv,
        -cov2[(0, 1)] * inv,
        -cov2[(1, 0)] * inv,
        cov2[(0, 0)] * inv,
    ))
}

/// `exp(-1/2 d^T cov2^-1 d)` with `d = pixel - center`; `None` for a singular covariance.
pub fn eval_gaussian_2d(cov2: &Matrix2<f64>, center: &Vector2<f64>, pixel: &Vector2<f64>) -> Option<f64> {
    let q = conic(cov2)?;
    let d = pixel - center;
    Some((-0.5 * (d.transpose() * q * d)[0]).exp())
}
