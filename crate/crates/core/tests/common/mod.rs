//! Shared oracles and scene builders for the integration tests.
//!
//! Everything here is written independently of the library internals: the
//! reference renderer recomputes covariances, projections and compositing
//! from scratch with plain loops and enumerates every Gaussian per pixel.

#![allow(dead_code)]

use gem_core::{Camera, GaussianCloud, ImageBuffer};
use nalgebra::{Matrix2, Matrix2x3, Matrix3, Matrix4, Vector2, Vector3, Vector4};
use rand::Rng;

pub const ALPHA_MAX: f64 = 0.999;
pub const T_MIN: f64 = 1e-4;
pub const DILATION: f64 = 0.3;
pub const NEAR: f64 = 0.01;

fn rot_from_quat(q: &Vector4<f64>) -> Matrix3<f64> {
    let q = q / q.norm();
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    // Vector form (w^2 - v.v) I + 2 v v^T + 2 w [v]x, not the expanded
    // polynomial the library uses.
    let v = Vector3::new(x, y, z);
    let vx = Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0);
    Matrix3::identity() * (w * w - v.dot(&v)) + v * v.transpose() * 2.0 + vx * (2.0 * w)
}

pub struct RefSplat {
    pub index: usize,
    pub depth: f64,
    pub center: Vector2<f64>,
    pub inv: Matrix2<f64>,
    pub opacity: f64,
    pub color: Vector3<f64>,
}

/// Projects every Gaussian without any tiling; `None` for culled or singular.
pub fn reference_splats(cloud: &GaussianCloud, cam: &Camera, dilation: f64) -> Vec<RefSplat> {
    let m: &Matrix4<f64> = cam.world_to_camera();
    let w = m.fixed_view::<3, 3>(0, 0).into_owned();
    let tr = m.fixed_view::<3, 1>(0, 3).into_owned();
    let mut out = Vec::new();
    for i in 0..cloud.len() {
        let r = rot_from_quat(&cloud.rotations()[i]);
        let s = cloud.log_scales()[i];
        let mut sigma = Matrix3::zeros();
        for a in 0..3 {
            for b in 0..3 {
                for k in 0..3 {
                    sigma[(a, b)] += r[(a, k)] * (2.0 * s[k]).exp() * r[(b, k)];
                }
            }
        }
        let t = w * cloud.positions()[i] + tr;
        if t.z <= NEAR {
            continue;
        }
        let j = Matrix2x3::new(
            cam.fx / t.z,
            0.0,
            -cam.fx * t.x / (t.z * t.z),
            0.0,
            cam.fy / t.z,
            -cam.fy * t.y / (t.z * t.z),
        );
        let cov = j * w * sigma * w.transpose() * j.transpose() + Matrix2::identity() * dilation;
        let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
        if det <= 1e-12 {
            continue;
        }
        let Some(inv) = cov.try_inverse() else { continue };
        let o = cloud.opacity_logits()[i];
        out.push(RefSplat {
            index: i,
            depth: t.z,
            center: Vector2::new(cam.fx * t.x / t.z + cam.cx, cam.fy * t.y / t.z + cam.cy),
            inv,
            opacity: 1.0 / (1.0 + (-o).exp()),
            color: cloud.colors()[i],
        });
    }
    out.sort_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap().then(a.index.cmp(&b.index)));
    out
}

/// Per-pixel brute-force renderer. Also returns, per pixel, the composited
/// weights and the final transmittance.
pub fn reference_render(
    cloud: &GaussianCloud,
    cam: &Camera,
    bg: Vector3<f64>,
) -> (ImageBuffer, Vec<(Vec<(usize, f64)>, f64)>) {
    let splats = reference_splats(cloud, cam, DILATION);
    let mut img = ImageBuffer::zeros(cam.width, cam.height);
    let mut detail = Vec::new();
    for y in 0..cam.height {
        for x in 0..cam.width {
            let p = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
            let mut c = Vector3::zeros();
            let mut t = 1.0;
            let mut weights = Vec::new();
            for s in &splats {
                let d = p - s.center;
                let m2 = (d.transpose() * s.inv * d)[0];
                if m2 > 9.0 {
                    continue;
                }
                let a = (s.opacity * (-0.5 * m2).exp()).min(ALPHA_MAX);
                c += s.color * a * t;
                weights.push((s.index, a * t));
                t *= 1.0 - a;
                if t < T_MIN {
                    break;
                }
            }
            img.set_pixel(x, y, c + bg * t);
            detail.push((weights, t));
        }
    }
    (img, detail)
}

pub fn max_abs_diff(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn front_camera(width: usize, height: usize, distance: f64) -> Camera {
    Camera::look_at(
        Vector3::new(0.0, 0.0, -distance),
        Vector3::zeros(),
        Vector3::y(),
        width,
        height,
        0.8,
    )
    .unwrap()
}

pub fn random_quat<R: Rng>(rng: &mut R) -> Vector4<f64> {
    loop {
        let q = Vector4::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = q.norm();
        if n > 0.2 && n < 1.0 {
            return q / n;
        }
    }
}

/// Random Gaussians in front of [`front_camera`]: positions within
/// `spread` of the origin, log-scales in `scale_range`, opacity logits in
/// `logit_range`, colors away from the clamp bounds.
pub fn random_cloud<R: Rng>(
    rng: &mut R,
    n: usize,
    spread: f64,
    scale_range: (f64, f64),
    logit_range: (f64, f64),
) -> GaussianCloud {
    let mut cloud = GaussianCloud::default();
    for _ in 0..n {
        let p = Vector3::new(
            rng.random_range(-spread..spread),
            rng.random_range(-spread..spread),
            rng.random_range(-spread..spread),
        );
        let s = Vector3::new(
            rng.random_range(scale_range.0..scale_range.1),
            rng.random_range(scale_range.0..scale_range.1),
            rng.random_range(scale_range.0..scale_range.1),
        );
        let c = Vector3::new(
            rng.random_range(0.1..0.9),
            rng.random_range(0.1..0.9),
            rng.random_range(0.1..0.9),
        );
        let o = rng.random_range(logit_range.0..logit_range.1);
        cloud.push(p, random_quat(rng), s, o, c).unwrap();
    }
    cloud
}

/// Which stored parameter of a Gaussian a finite-difference probe perturbs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Param {
    Position(usize),
    Rotation(usize),
    LogScale(usize),
    Opacity,
    Color(usize),
}

impl Param {
    pub fn all() -> Vec<Param> {
        let mut v = Vec::new();
        v.extend((0..3).map(Param::Position));
        v.extend((0..4).map(Param::Rotation));
        v.extend((0..3).map(Param::LogScale));
        v.push(Param::Opacity);
        v.extend((0..3).map(Param::Color));
        v
    }
}

/// Copy of `cloud` with parameter `p` of Gaussian `i` shifted by `delta`
/// (raw quaternion components are renormalized by the cloud).
pub fn perturbed(cloud: &GaussianCloud, i: usize, p: Param, delta: f64) -> GaussianCloud {
    let mut c = cloud.clone();
    match p {
        Param::Position(k) => {
            let mut v = c.positions()[i];
            v[k] += delta;
            c.set_position(i, v).unwrap();
        }
        Param::Rotation(k) => {
            let mut v = c.rotations()[i];
            v[k] += delta;
            c.set_rotation(i, v).unwrap();
        }
        Param::LogScale(k) => {
            let mut v = c.log_scales()[i];
            v[k] += delta;
            c.set_log_scale(i, v).unwrap();
        }
        Param::Opacity => {
            let v = c.opacity_logits()[i] + delta;
            c.set_opacity_logit(i, v).unwrap();
        }
        Param::Color(k) => {
            let mut v = c.colors()[i];
            v[k] += delta;
            c.set_color(i, v).unwrap();
        }
    }
    c
}

pub fn analytic(grads: &gem_core::render::RenderGradients, i: usize, p: Param) -> f64 {
    match p {
        Param::Position(k) => grads.positions[i][k],
        Param::Rotation(k) => grads.rotations[i][k],
        Param::LogScale(k) => grads.log_scales[i][k],
        Param::Opacity => grads.opacity_logits[i],
        Param::Color(k) => grads.colors[i][k],
    }
}

/// `1e-3` relative or `1e-6` absolute.
pub fn grad_close(analytic: f64, numeric: f64) -> bool {
    let err = (analytic - numeric).abs();
    err <= 1e-6 || err <= 1e-3 * numeric.abs().max(analytic.abs())
}

pub fn weighted_sum(img: &ImageBuffer, weights: &ImageBuffer) -> f64 {
    img.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
}

/// Which Gaussians touch which pixels. Finite differences are only
/// meaningful when this set is unchanged across the probe, because the
/// extent cutoff makes the image discontinuous at the ellipse boundary.
pub fn contribution_signature(list: &gem_core::render::SortedSplatList, w: usize, h: usize) -> Vec<Vec<u32>> {
    let mut sig = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            sig.push(list.pixel_weights(x, y).into_iter().map(|(g, _)| g).collect());
        }
    }
    sig
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// eigenvalues in descending order with matching eigenvector columns.
pub fn jacobi_eigen(a: &nalgebra::DMatrix<f64>) -> (Vec<f64>, nalgebra::DMatrix<f64>) {
    let n = a.nrows();
    let mut a = a.clone();
    let mut v = nalgebra::DMatrix::<f64>::identity(n, n);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a[(p, q)] * a[(p, q)];
            }
        }
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[(p, q)].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[(k, p)], a[(k, q)]);
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[(p, k)], a[(q, k)]);
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].partial_cmp(&a[(i, i)]).unwrap());
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let vectors = nalgebra::DMatrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    (values, vectors)
}

/// PCA through the sample covariance, for comparison with the SVD route:
/// singular values and the top `m` principal directions (columns).
pub fn covariance_pca(samples: &nalgebra::DMatrix<f64>, m: usize) -> (Vec<f64>, nalgebra::DMatrix<f64>) {
    let n = samples.nrows();
    let mean = samples.row_mean();
    let mut centered = samples.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let (values, vectors) = jacobi_eigen(&cov);
    let sv = values.iter().map(|l| (l.max(0.0) * (n as f64 - 1.0)).sqrt()).collect();
    (sv, vectors.columns(0, m).into_owned())
}

/// Frames of a random cloud moved by `modes` random low-rank fields over
/// every attribute. Seeded, so the same arguments give the same frames.
pub fn toy_sequence(seed: u64, texels: usize, frames: usize, modes: usize) -> Vec<GaussianCloud> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let base = random_cloud(&mut rng, texels, 0.6, (-2.4, -1.9), (0.0, 2.0));
    let fields: Vec<Vec<[f64; 11]>> = (0..modes)
        .map(|_| (0..texels).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect())
        .collect();
    (0..frames)
        .map(|_| {
            let w: Vec<f64> = (0..modes).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut c = GaussianCloud::default();
            for i in 0..texels {
                let d = |j: usize| (0..modes).map(|a| w[a] * fields[a][i][j]).sum::<f64>();
                c.push(
                    base.positions()[i] + Vector3::new(d(0), d(1), d(2)) * 0.08,
                    base.rotations()[i] + Vector4::new(d(3), d(4), d(5), d(6)) * 0.1,
                    base.log_scales()[i] + Vector3::new(d(7), d(8), d(9)) * 0.1,
                    base.opacity_logits()[i] + d(10) * 0.3,
                    base.colors()[i],
                )
                .unwrap();
            }
            c
        })
        .collect()
}

/// A model distilled from [`toy_sequence`] with `comps` per modality.
pub fn toy_model(
    seed: u64,
    texels: usize,
    frames: usize,
    comps: [usize; 4],
) -> (gem_core::eigenmodel::GemModel, Vec<GaussianCloud>) {
    use gem_core::eigenmodel::{distill, ColorSource, TexelLayout};
    let seq = toy_sequence(seed, texels, frames, 3);
    let (model, _) = distill(&seq, &TexelLayout::full(texels, 1), comps, ColorSource::Average).unwrap();
    (model, seq)
}
