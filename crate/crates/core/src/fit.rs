//! Analysis-by-synthesis: fit coefficients of a frozen model to target
//! views by minimizing the photometric loss.
//!
//! Coefficients are optimized in units of their standard deviation and
//! clamped to `+-clamp_sigmas` after every step. Components with zero
//! standard deviation stay at zero.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::eigenmodel::{CoefficientVector, GemModel};
use crate::error::{invalid, GemError, Result};
use crate::loss::{LossWeights, PerceptualHook};
use crate::optim::{Adam, AdamConfig};
use crate::refine::{evaluate, frame_gradient, LossRecord, View};
use crate::render::RenderConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct FitConfig {
    pub ssim_weight: f64,
    pub perceptual_weight: f64,
    /// Adam step, in standard deviations per step.
    pub step_size: f64,
    pub steps: usize,
    pub clamp_sigmas: f64,
    pub adam: AdamConfig,
    pub render: RenderConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            ssim_weight: 0.2,
            perceptual_weight: 0.0,
            step_size: 0.05,
            steps: 300,
            clamp_sigmas: 4.0,
            adam: AdamConfig::default(),
            render: RenderConfig::default(),
        }
    }
}

impl FitConfig {
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            ssim: self.ssim_weight,
            perceptual: self.perceptual_weight,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_weights().validate()?;
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(invalid(format!("stepSize must be finite and >= 0, got {}", self.step_size)));
        }
        if !(self.clamp_sigmas >= 0.0) {
            return Err(invalid(format!("clampSigmas must be >= 0, got {}", self.clamp_sigmas)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOutcome {
    pub coefficients: CoefficientVector,
    /// One record per iteration, evaluated before that iteration's update.
    pub history: Vec<LossRecord>,
}

/// Loss and gradient with respect to the coefficients.
pub fn coefficient_objective(
    model: &GemModel,
    views: &[View],
    background: Vector3<f64>,
    k: &CoefficientVector,
    weights: &LossWeights,
    hook: Option<&dyn PerceptualHook>,
    render: &RenderConfig,
) -> Result<(LossRecord, CoefficientVector)> {
    let eval = evaluate(model, k)?;
    let g = frame_gradient(&eval, views, background, weights, hook, render)?;
    let blocks = [0, 1, 2, 3].map(|m| model.bases()[m].basis.tr_mul(&g.attributes[m]));
    let record = LossRecord {
        step: 0,
        l1: g.terms.l1,
        dssim: g.terms.dssim,
        total: g.terms.total,
        psnr: g.psnr,
    };
    Ok((record, CoefficientVector { blocks }))
}

pub fn fit_coefficients(
    model: &GemModel,
    views: &[View],
    background: Vector3<f64>,
    init: &CoefficientVector,
    cfg: &FitConfig,
    hook: Option<&dyn PerceptualHook>,
) -> Result<FitOutcome> {
    cfg.validate()?;
    if views.is_empty() {
        return Err(invalid("fitting needs at least one target view"));
    }
    model.check_coefficients(init)?;
    let weights = cfg.loss_weights();
    let sd: Vec<f64> = model.stddevs_flat();
    let counts = model.component_counts();
    let bound = cfg.clamp_sigmas;

    // z = k / sd; fixed at zero where sd = 0.
    let mut z: Vec<f64> = init
        .to_flat()
        .iter()
        .zip(&sd)
        .map(|(&k, &s)| if s > 0.0 { (k / s).clamp(-bound, bound) } else { 0.0 })
        .collect();
    let to_k = |z: &[f64]| -> Result<CoefficientVector> {
        let flat: Vec<f64> = z.iter().zip(&sd).map(|(a, s)| a * s).collect();
        CoefficientVector::from_flat(&flat, counts)
    };

    let mut opt = Adam::new(z.len(), cfg.adam);
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let k = to_k(&z)?;
        let (mut rec, dk) = coefficient_objective(model, views, background, &k, &weights, hook, &cfg.render)?;
        if !rec.total.is_finite() {
            return Err(GemError::NonFiniteLoss {
                step,
                detail: format!("coefficients {:?}", k.to_flat()),
            });
        }
        rec.step = step;
        history.push(rec);
        let dz: Vec<f64> = dk.to_flat().iter().zip(&sd).map(|(g, s)| g * s).collect();
        opt.step(&mut z, &dz, cfg.step_size);
        for (v, s) in z.iter_mut().zip(&sd) {
            *v = if *s > 0.0 { v.clamp(-bound, bound) } else { 0.0 };
        }
    }
    Ok(FitOutcome {
        coefficients: to_k(&z)?,
        history,
    })
}
