use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3, Vector4};
use rayon::prelude::*;

use super::{pixel_center, splat_power, SortedSplatList, SplatGeometry};
use crate::camera::Camera;
use crate::error::{GemError, Result};
use crate::image::ImageBuffer;

/// Loss gradients with respect to the stored parameters of every Gaussian,
/// laid out like [`GaussianCloud`](crate::gaussian::GaussianCloud).
#[derive(Clone, Debug, PartialEq)]
pub struct RenderGradients {
    pub positions: Vec<Vector3<f64>>,
    /// With respect to the raw quaternion `(w, x, y, z)`, through normalization.
    pub rotations: Vec<Vector4<f64>>,
    pub log_scales: Vec<Vector3<f64>>,
    pub opacity_logits: Vec<f64>,
    pub colors: Vec<Vector3<f64>>,
}

impl RenderGradients {
    pub fn zeros(n: usize) -> Self {
        Self {
            positions: vec![Vector3::zeros(); n],
            rotations: vec![Vector4::zeros(); n],
            log_scales: vec![Vector3::zeros(); n],
            opacity_logits: vec![0.0; n],
            colors: vec![Vector3::zeros(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.positions.iter_mut().zip(&other.positions) {
            *a += b;
        }
        for (a, b) in self.rotations.iter_mut().zip(&other.rotations) {
            *a += b;
        }
        for (a, b) in self.log_scales.iter_mut().zip(&other.log_scales) {
            *a += b;
        }
        for (a, b) in self.opacity_logits.iter_mut().zip(&other.opacity_logits) {
            *a += b;
        }
        for (a, b) in self.colors.iter_mut().zip(&other.colors) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.positions.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.rotations.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.log_scales.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.opacity_logits.iter().all(|x| x.is_finite())
            && self.colors.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Image-space gradient of one splat.
#[derive(Clone, Copy, Default)]
struct Grad2d {
    center: Vector2<f64>,
    conic: Matrix2<f64>,
    opacity: f64,
    color: Vector3<f64>,
}

impl std::ops::AddAssign<&Grad2d> for Grad2d {
    fn add_assign(&mut self, o: &Grad2d) {
        self.center += o.center;
        self.conic += o.conic;
        self.opacity += o.opacity;
        self.color += o.color;
    }
}

/// Chains `d_pixels` (dL/d pixel value, same layout as the rendered image)
/// back to every Gaussian parameter.
pub fn render_backward(list: &SortedSplatList, cam: &Camera, d_pixels: &ImageBuffer) -> Result<RenderGradients> {
    if cam != &list.camera {
        return Err(GemError::ContractViolation(
            "camera differs from the one used in the forward pass".into(),
        ));
    }
    if d_pixels.width() != cam.width || d_pixels.height() != cam.height {
        return Err(GemError::ContractViolation(format!(
            "pixel gradient is {}x{}, forward pass rendered {}x{}",
            d_pixels.width(),
            d_pixels.height(),
            cam.width,
            cam.height
        )));
    }
    let (w, h, ts) = (cam.width, cam.height, list.config.tile_size);
    let tiles = list.tiles_x * list.tiles_y;
    let grad = d_pixels.data();

    let per_tile: Vec<Vec<Grad2d>> = (0..tiles)
        .into_par_iter()
        .map(|tile| {
            let entries = &list.tile_entries[list.tile_offsets[tile]..list.tile_offsets[tile + 1]];
            let mut buf = vec![Grad2d::default(); entries.len()];
            let (tx, ty) = (tile % list.tiles_x, tile / list.tiles_x);
            for y in ty * ts..((ty + 1) * ts).min(h) {
                for x in tx * ts..((tx + 1) * ts).min(w) {
                    let p = y * w + x;
                    let dl = Vector3::new(grad[p * 3], grad[p * 3 + 1], grad[p * 3 + 2]);
                    if dl == Vector3::zeros() {
                        continue;
                    }
                    pixel_backward(list, entries, &mut buf, x, y, &dl);
                }
            }
            buf
        })
        .collect();

    let mut grads2d = vec![Grad2d::default(); list.gaussian_count];
    for (tile, buf) in per_tile.iter().enumerate() {
        let entries = &list.tile_entries[list.tile_offsets[tile]..list.tile_offsets[tile + 1]];
        for (&g, d) in entries.iter().zip(buf) {
            grads2d[g as usize] += d;
        }
    }

    let chained: Vec<Option<ParamGrads>> = (0..list.gaussian_count)
        .into_par_iter()
        .map(|i| {
            let geo = list.geometry[i].as_ref()?;
            let splat = list.splats[i].as_ref()?;
            Some(chain_to_params(cam, geo, &splat.conic, &grads2d[i]))
        })
        .collect();

    let mut out = RenderGradients::zeros(list.gaussian_count);
    for (i, c) in chained.into_iter().enumerate() {
        if let Some((dp, dq, ds, dop, dc)) = c {
            out.positions[i] = dp;
            out.rotations[i] = dq;
            out.log_scales[i] = ds;
            out.opacity_logits[i] = dop;
            out.colors[i] = dc;
        }
    }
    Ok(out)
}

/// Accumulates one pixel's contribution into the tile buffer.
///
/// With `S` the composited color excluding background and `P_i` its prefix
/// through splat `i`, everything behind splat `i` is
/// `after_i = (S - P_i) + T_final bg`, and
/// `dC/dalpha_i = c_i T_i - after_i / (1 - alpha_i)`.
#[inline]
fn pixel_backward(list: &SortedSplatList, entries: &[u32], buf: &mut [Grad2d], x: usize, y: usize, dl: &Vector3<f64>) {
    let cfg = &list.config;
    let p = y * list.camera.width + x;
    let n = list.visited[p] as usize;
    let total = Vector3::new(list.accum[p * 3], list.accum[p * 3 + 1], list.accum[p * 3 + 2]);
    let t_final = list.final_transmittance[p];
    let bg_term = list.background * t_final;
    let pixel = pixel_center(x, y);
    let mut t = 1.0;
    let mut prefix = Vector3::zeros();
    for (k, &g) in entries[..n].iter().enumerate() {
        let s = list.splats[g as usize].as_ref().expect("binned splats are visible");
        let Some((d, power)) = splat_power(s, &pixel, cfg.extent_sigmas) else {
            continue;
        };
        let gauss = power.exp();
        let raw = s.opacity * gauss;
        let alpha = raw.min(cfg.alpha_max);
        let weight = alpha * t;
        prefix += s.color * weight;
        let after = (total - prefix) + bg_term;
        let dc_dalpha = s.color * t - after / (1.0 - alpha);
        let dl_dalpha = dl.dot(&dc_dalpha);

        let b = &mut buf[k];
        b.color += dl * weight;
        if raw < cfg.alpha_max {
            b.opacity += dl_dalpha * gauss;
            let dl_dg = dl_dalpha * s.opacity;
            // G = exp(-1/2 d^T Q d), d = pixel - center.
            let q = &s.conic;
            let qd = q * d;
            b.center += qd * (dl_dg * gauss);
            b.conic += (d * d.transpose()) * (-0.5 * dl_dg * gauss);
        }
        t *= 1.0 - alpha;
    }
}

type ParamGrads = (Vector3<f64>, Vector4<f64>, Vector3<f64>, f64, Vector3<f64>);

fn chain_to_params(
    cam: &Camera,
    geo: &SplatGeometry,
    conic: &Matrix2<f64>,
    g2: &Grad2d,
) -> ParamGrads {
    let w = cam.rotation();
    let j = &geo.jacobian;
    let tmat: Matrix2x3<f64> = j * w;

    // Q = cov2^-1  =>  dL/dcov2 = -Q (dL/dQ) Q.
    let d_conic = (g2.conic + g2.conic.transpose()) * 0.5;
    let d_cov2 = -(conic * d_conic * conic);

    // cov2 = T Sigma T^T + dilation I with T = J W.
    let d_cov3 = tmat.transpose() * d_cov2 * tmat;
    let d_t: Matrix2x3<f64> = d_cov2 * tmat * geo.cov3 * 2.0;
    let d_j: Matrix2x3<f64> = d_t * w.transpose();

    let (x, y, z) = (geo.cam_point.x, geo.cam_point.y, geo.cam_point.z);
    let (fx, fy) = (cam.fx, cam.fy);
    let iz = 1.0 / z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    // Center (fx x/z + cx, fy y/z + cy) has Jacobian J.
    let mut d_cam = j.transpose() * g2.center;
    d_cam.x += d_j[(0, 2)] * (-fx * iz2);
    d_cam.y += d_j[(1, 2)] * (-fy * iz2);
    d_cam.z += d_j[(0, 0)] * (-fx * iz2)
        + d_j[(0, 2)] * (2.0 * fx * x * iz3)
        + d_j[(1, 1)] * (-fy * iz2)
        + d_j[(1, 2)] * (2.0 * fy * y * iz3);
    let d_position = w.transpose() * d_cam;

    // Sigma = sum_j s2_j r_j r_j^T.
    let r = &geo.rotation;
    let mut d_log_scale = Vector3::zeros();
    let mut d_r = Matrix3::zeros();
    for k in 0..3 {
        let col = r.column(k);
        let gc = d_cov3 * col;
        d_log_scale[k] = 2.0 * geo.scale_sq[k] * col.dot(&gc);
        d_r.set_column(k, &(gc * (2.0 * geo.scale_sq[k])));
    }

    let dq_unit = rotation_grad_to_quat(&geo.unit_quat, &d_r);
    let q = &geo.unit_quat;
    let d_quat = (dq_unit - q * q.dot(&dq_unit)) / geo.quat_norm;

    let sig = 1.0 / (1.0 + (-geo.opacity_logit).exp());
    let d_logit = g2.opacity * sig * (1.0 - sig);
    (d_position, d_quat, d_log_scale, d_logit, g2.color)
}

/// `dL/dq` for a unit quaternion given `dL/dR`.
pub(crate) fn rotation_grad_to_quat(q: &Vector4<f64>, d_r: &Matrix3<f64>) -> Vector4<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let dw = Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0);
    let dx = Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x);
    let dy = Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y);
    let dz = Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0);
    Vector4::new(
        2.0 * d_r.dot(&dw),
        2.0 * d_r.dot(&dx),
        2.0 * d_r.dot(&dy),
        2.0 * d_r.dot(&dz),
    )
}
