//! Image quality metrics: PSNR, SSIM (with its gradient) and L1.
//!
//! SSIM uses the usual 11x11 Gaussian window with sigma 1.5, C1 = 0.01^2,
//! C2 = 0.03^2, averaged over pixels and channels. Borders are padded by
//! half-sample symmetric reflection (`d c b a | a b c d`).

use serde::{Deserialize, Serialize};

use crate::error::{GemError, Result};
use crate::image::ImageBuffer;

pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub l1: f64,
}

impl MetricReport {
    pub fn compute(a: &ImageBuffer, b: &ImageBuffer) -> Result<Self> {
        Ok(Self {
            psnr: psnr(a, b)?,
            ssim: ssim(a, b)?,
            l1: l1(a, b)?,
        })
    }
}

pub fn mse(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.check_same_size(b)?;
    let n = a.data().len().max(1) as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// PSNR in dB for peak value 1, capped at [`PSNR_CAP`].
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    psnr_with_peak(a, b, 1.0)
}

pub fn psnr_with_peak(a: &ImageBuffer, b: &ImageBuffer, peak: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP)
}

/// Mean absolute difference over pixels and channels.
pub fn l1(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.check_same_size(b)?;
    let n = a.data().len().max(1) as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n)
}

pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    Ok(ssim_impl(a, b, false)?.0)
}

/// SSIM and its gradient with respect to the pixels of `a`.
pub fn ssim_with_grad(a: &ImageBuffer, b: &ImageBuffer) -> Result<(f64, ImageBuffer)> {
    let (value, grad) = ssim_impl(a, b, true)?;
    let grad = ImageBuffer::from_data(a.width(), a.height(), grad.expect("requested"))?;
    Ok((value, grad))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - r;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let j = if i < 0 {
        -i - 1
    } else if i >= n {
        2 * n - i - 1
    } else {
        i
    };
    j as usize
}

/// Separable windowed average of a single-channel `w x h` plane.
struct Blur {
    w: usize,
    h: usize,
    win: [f64; SSIM_WINDOW],
}

impl Blur {
    fn apply(&self, src: &[f64]) -> Vec<f64> {
        let (w, h, r) = (self.w, self.h, (SSIM_WINDOW / 2) as isize);
        let mut tmp = vec![0.0; w * h];
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            for x in 0..w {
                let mut acc = 0.0;
                for (k, g) in self.win.iter().enumerate() {
                    acc += g * row[reflect(x as isize + k as isize - r, w)];
                }
                tmp[y * w + x] = acc;
            }
        }
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for (k, g) in self.win.iter().enumerate() {
                let sy = reflect(y as isize + k as isize - r, h);
                let (dst, src_row) = (&mut out[y * w..(y + 1) * w], &tmp[sy * w..(sy + 1) * w]);
                for (d, s) in dst.iter_mut().zip(src_row) {
                    *d += g * s;
                }
            }
        }
        out
    }

    fn adjoint(&self, src: &[f64]) -> Vec<f64> {
        let (w, h, r) = (self.w, self.h, (SSIM_WINDOW / 2) as isize);
        let mut tmp = vec![0.0; w * h];
        for y in 0..h {
            for (k, g) in self.win.iter().enumerate() {
                let sy = reflect(y as isize + k as isize - r, h);
                for x in 0..w {
                    tmp[sy * w + x] += g * src[y * w + x];
                }
            }
        }
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let v = tmp[y * w + x];
                for (k, g) in self.win.iter().enumerate() {
                    out[y * w + reflect(x as isize + k as isize - r, w)] += g * v;
                }
            }
        }
        out
    }
}

fn ssim_impl(a: &ImageBuffer, b: &ImageBuffer, want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    a.check_same_size(b)?;
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(GemError::ImageTooSmall { width: w, height: h });
    }
    let blur = Blur { w, h, win: gaussian_window() };
    let n = (w * h * 3) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; w * h * 3]);
    for c in 0..3 {
        let x: Vec<f64> = a.data().iter().skip(c).step_by(3).copied().collect();
        let y: Vec<f64> = b.data().iter().skip(c).step_by(3).copied().collect();
        let mx = blur.apply(&x);
        let my = blur.apply(&y);
        let xx = blur.apply(&x.iter().map(|v| v * v).collect::<Vec<_>>());
        let yy = blur.apply(&y.iter().map(|v| v * v).collect::<Vec<_>>());
        let xy = blur.apply(&x.iter().zip(&y).map(|(p, q)| p * q).collect::<Vec<_>>());

        let mut d_mu = vec![0.0; w * h];
        let mut d_var = vec![0.0; w * h];
        let mut d_cov = vec![0.0; w * h];
        for p in 0..w * h {
            let (ux, uy) = (mx[p], my[p]);
            let vx = xx[p] - ux * ux;
            let vy = yy[p] - uy * uy;
            let cxy = xy[p] - ux * uy;
            let n1 = 2.0 * ux * uy + SSIM_C1;
            let n2 = 2.0 * cxy + SSIM_C2;
            let d1 = ux * ux + uy * uy + SSIM_C1;
            let d2 = vx + vy + SSIM_C2;
            let s = n1 * n2 / (d1 * d2);
            total += s;
            if want_grad {
                let ds_dux = 2.0 * uy * n2 / (d1 * d2) - s * 2.0 * ux / d1;
                let ds_dvx = -s / d2;
                let ds_dcxy = 2.0 * n1 / (d1 * d2);
                // Chain through vx = E[x^2] - ux^2 and cxy = E[xy] - ux uy.
                d_mu[p] = (ds_dux - 2.0 * ux * ds_dvx - uy * ds_dcxy) / n;
                d_var[p] = ds_dvx / n;
                d_cov[p] = ds_dcxy / n;
            }
        }
        if let Some(g) = grad.as_mut() {
            let a_mu = blur.adjoint(&d_mu);
            let a_var = blur.adjoint(&d_var);
            let a_cov = blur.adjoint(&d_cov);
            for p in 0..w * h {
                g[p * 3 + c] = a_mu[p] + 2.0 * x[p] * a_var[p] + y[p] * a_cov[p];
            }
        }
    }
    Ok((total / n, grad))
}
