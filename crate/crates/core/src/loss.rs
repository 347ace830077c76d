//! Photometric objective: `(1 - w) L1 + w D-SSIM + z perceptual`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::image::ImageBuffer;
use crate::metrics::ssim_with_grad;

/// A perceptual image distance such as a VGG feature loss. Returns the loss
/// and its gradient with respect to the render.
pub trait PerceptualHook: Send + Sync {
    fn loss(&self, render: &ImageBuffer, target: &ImageBuffer) -> Result<(f64, ImageBuffer)>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of D-SSIM against L1.
    pub ssim: f64,
    /// Weight of the perceptual term; only used when a hook is supplied.
    /// The paper uses 0.0075 with a VGG loss.
    pub perceptual: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ssim: 0.2,
            perceptual: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.ssim) {
            return Err(invalid(format!("D-SSIM weight {} outside [0, 1)", self.ssim)));
        }
        if !(self.perceptual >= 0.0) {
            return Err(invalid(format!("perceptual weight {} must be >= 0", self.perceptual)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub l1: f64,
    pub dssim: f64,
    pub perceptual: f64,
    pub total: f64,
}

/// Renders whose every residual is at most this are treated as matching
/// their target: the loss is still reported but the gradient is exactly
/// zero. At an exact match zero is the true gradient, and Adam would rescale
/// rounding noise in the D-SSIM gradient to full-size steps.
pub const MATCH_TOLERANCE: f64 = 1e-10;

/// Loss terms and the gradient of the total with respect to `render`.
///
/// D-SSIM is skipped entirely when its weight is zero, so images smaller
/// than the SSIM window can still be used with pure L1.
pub fn photometric_loss(
    render: &ImageBuffer,
    target: &ImageBuffer,
    weights: &LossWeights,
    hook: Option<&dyn PerceptualHook>,
) -> Result<(LossTerms, ImageBuffer)> {
    render.check_same_size(target)?;
    let n = render.data().len().max(1) as f64;
    let mut grad = ImageBuffer::zeros(render.width(), render.height());
    let mut terms = LossTerms::default();

    let l1_w = 1.0 - weights.ssim;
    let mut l1_sum = 0.0;
    for ((g, r), t) in grad.data_mut().iter_mut().zip(render.data()).zip(target.data()) {
        let d = r - t;
        l1_sum += d.abs();
        // sign(0) = 0 keeps the gradient exactly zero at the optimum.
        *g = l1_w * if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 } / n;
    }
    terms.l1 = l1_sum / n;
    terms.total = l1_w * terms.l1;

    let matched = render
        .data()
        .iter()
        .zip(target.data())
        .all(|(r, t)| (r - t).abs() <= MATCH_TOLERANCE);
    if weights.ssim > 0.0 {
        let (s, ds) = ssim_with_grad(render, target)?;
        terms.dssim = (1.0 - s) / 2.0;
        terms.total += weights.ssim * terms.dssim;
        for (g, d) in grad.data_mut().iter_mut().zip(ds.data()) {
            *g -= 0.5 * weights.ssim * d;
        }
    }
    if matched {
        grad.data_mut().fill(0.0);
    }

    if let Some(hook) = hook.filter(|_| weights.perceptual > 0.0) {
        let (p, dp) = hook.loss(render, target)?;
        render.check_same_size(&dp)?;
        terms.perceptual = p;
        terms.total += weights.perceptual * p;
        for (g, d) in grad.data_mut().iter_mut().zip(dp.data()) {
            *g += weights.perceptual * d;
        }
    }
    Ok((terms, grad))
}
