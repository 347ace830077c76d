//! Photometric refinement of eigenmodel bases against training images.
//!
//! Means, basis columns and the color texture are optimized with Adam while
//! the per-frame coefficients stay fixed. Every `orthogonalize_every` steps
//! (and once at the end) each basis is re-orthonormalized by QR and the
//! stored coefficients are mapped into the new basis, so reconstructions
//! are unchanged by the checkpoint.

use std::io::Write;

use nalgebra::{DMatrix, DVector, Vector3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::eigenmodel::{CoefficientVector, GemModel, Modality};
use crate::error::{invalid, GemError, Result};
use crate::gaussian::GaussianCloud;
use crate::image::ImageBuffer;
use crate::linalg::orthogonalize;
use crate::loss::{photometric_loss, LossTerms, LossWeights, PerceptualHook};
use crate::metrics::psnr;
use crate::optim::{Adam, AdamConfig};
use crate::render::{render_backward, render_forward, RenderConfig, RenderGradients};

/// A target image and the camera it was taken from.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub camera: Camera,
    pub target: ImageBuffer,
}

impl View {
    pub fn new(camera: Camera, target: ImageBuffer) -> Result<Self> {
        if camera.width != target.width() || camera.height != target.height() {
            return Err(GemError::SizeMismatch {
                expected: format!("{}x{} target", camera.width, camera.height),
                found: format!("{}x{}", target.width(), target.height()),
            });
        }
        Ok(Self { camera, target })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingFrame {
    pub coefficients: CoefficientVector,
    pub views: Vec<View>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSet {
    pub frames: Vec<TrainingFrame>,
    pub background: Vector3<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct RefineConfig {
    /// D-SSIM weight.
    pub ssim_weight: f64,
    /// Perceptual weight, used only with a hook.
    pub perceptual_weight: f64,
    /// Weight of the summed squared position offsets from the mean.
    pub position_reg: f64,
    /// Weight of the summed squared (activated) scales.
    pub scale_reg: f64,
    pub step_size: f64,
    pub steps: usize,
    pub orthogonalize_every: usize,
    /// Frames per step.
    pub batch: usize,
    /// Learning-rate multipliers for position, rotation, scale, opacity.
    pub modality_lr: [f64; 4],
    pub color_lr: f64,
    /// Seeds the frame order.
    pub seed: u64,
    pub adam: AdamConfig,
    pub render: RenderConfig,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            ssim_weight: 0.2,
            perceptual_weight: 0.0,
            position_reg: 1e-2,
            scale_reg: 1e-3,
            step_size: 1e-3,
            steps: 30_000,
            orthogonalize_every: 1000,
            batch: 1,
            modality_lr: [1.0, 0.1, 0.1, 0.5],
            color_lr: 1.0,
            seed: 0,
            adam: AdamConfig::default(),
            render: RenderConfig::default(),
        }
    }
}

impl RefineConfig {
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            ssim: self.ssim_weight,
            perceptual: self.perceptual_weight,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_weights().validate()?;
        let nonneg = [
            ("positionReg", self.position_reg),
            ("scaleReg", self.scale_reg),
            ("stepSize", self.step_size),
            ("colorLr", self.color_lr),
        ];
        for (name, v) in nonneg.into_iter().chain(self.modality_lr.iter().map(|&v| ("modalityLr", v))) {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.orthogonalize_every == 0 {
            return Err(invalid("orthogonalizeEvery must be >= 1"));
        }
        if self.batch == 0 {
            return Err(invalid("batch must be >= 1"));
        }
        Ok(())
    }
}

/// Gradient of the refinement objective with respect to every model
/// parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGradient {
    pub means: [DVector<f64>; 4],
    /// Same shape as the bases (`dim*T x M`).
    pub bases: [DMatrix<f64>; 4],
    pub colors: Vec<Vector3<f64>>,
}

impl ModelGradient {
    fn zeros(model: &GemModel) -> Self {
        let b = model.bases();
        Self {
            means: [0, 1, 2, 3].map(|i| DVector::zeros(b[i].mean.len())),
            bases: [0, 1, 2, 3].map(|i| DMatrix::zeros(b[i].basis.nrows(), b[i].basis.ncols())),
            colors: vec![Vector3::zeros(); model.texel_count()],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.means.iter().all(|m| m.iter().all(|v| v.is_finite()))
            && self.bases.iter().all(|m| m.iter().all(|v| v.is_finite()))
            && self.colors.iter().all(|c| c.iter().all(|v| v.is_finite()))
    }
}

/// Batch objective value.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Objective {
    /// Photometric terms averaged over views, then frames.
    pub photometric: LossTerms,
    pub regularization: f64,
    pub total: f64,
    /// Mean PSNR of the batch renders.
    pub psnr: f64,
}

/// Gradient of a frame's loss with respect to its reconstructed attributes.
pub(crate) struct FrameGradient {
    pub terms: LossTerms,
    pub psnr: f64,
    pub attributes: [DVector<f64>; 4],
    pub colors: Vec<Vector3<f64>>,
}

pub(crate) struct Evaluated {
    pub raw: [DVector<f64>; 4],
    pub cloud: GaussianCloud,
}

pub(crate) fn evaluate(model: &GemModel, k: &CoefficientVector) -> Result<Evaluated> {
    let raw = model.evaluate_raw(k)?;
    let cloud = crate::eigenmodel::attributes_to_cloud(&raw, model.colors())?;
    Ok(Evaluated { raw, cloud })
}

/// Maps renderer gradients on the (normalized) cloud back to the raw
/// per-modality attribute vectors.
pub(crate) fn attribute_gradients(raw: &[DVector<f64>; 4], g: &RenderGradients) -> [DVector<f64>; 4] {
    let t = g.len();
    let mut out = [DVector::zeros(3 * t), DVector::zeros(4 * t), DVector::zeros(3 * t), DVector::zeros(t)];
    for i in 0..t {
        out[0].fixed_rows_mut::<3>(3 * i).copy_from(&g.positions[i]);
        // The renderer's rotation gradient is already projected onto the
        // tangent of the unit sphere; the raw vector adds a 1/|q| factor.
        let norm = raw[1].fixed_rows::<4>(4 * i).norm();
        out[1].fixed_rows_mut::<4>(4 * i).copy_from(&(g.rotations[i] / norm));
        out[2].fixed_rows_mut::<3>(3 * i).copy_from(&g.log_scales[i]);
        out[3][i] = g.opacity_logits[i];
    }
    out
}

/// Average photometric loss and attribute gradient over `views`.
pub(crate) fn frame_gradient(
    eval: &Evaluated,
    views: &[View],
    background: Vector3<f64>,
    weights: &LossWeights,
    hook: Option<&dyn PerceptualHook>,
    render: &RenderConfig,
) -> Result<FrameGradient> {
    if views.is_empty() {
        return Err(invalid("a frame needs at least one view"));
    }
    let per_view: Vec<Result<(LossTerms, f64, RenderGradients)>> = views
        .par_iter()
        .map(|v| {
            let (img, list) = render_forward(&eval.cloud, &v.camera, background, render)?;
            let (terms, d_img) = photometric_loss(&img, &v.target, weights, hook)?;
            let p = psnr(&img, &v.target)?;
            let g = render_backward(&list, &v.camera, &d_img)?;
            Ok((terms, p, g))
        })
        .collect();
    let scale = 1.0 / views.len() as f64;
    let t = eval.cloud.len();
    let mut terms = LossTerms::default();
    let mut psnr_sum = 0.0;
    let mut total = RenderGradients::zeros(t);
    for r in per_view {
        let (lt, p, g) = r?;
        terms.l1 += lt.l1 * scale;
        terms.dssim += lt.dssim * scale;
        terms.perceptual += lt.perceptual * scale;
        terms.total += lt.total * scale;
        psnr_sum += p;
        total.add_assign(&g);
    }
    let mut attributes = attribute_gradients(&eval.raw, &total);
    attributes.iter_mut().for_each(|a| *a *= scale);
    let colors = total.colors.iter().map(|c| c * scale).collect();
    Ok(FrameGradient {
        terms,
        psnr: psnr_sum * scale,
        attributes,
        colors,
    })
}

/// `position_reg * sum |x - mean|^2 + scale_reg * sum |exp(s)|^2`.
///
/// The scale term's gradient is added into `grad` (it depends on the raw
/// attribute). The position offset `B k` does not depend on the mean, so its
/// gradient is returned separately and only reaches the basis.
fn regularize(
    model: &GemModel,
    raw: &[DVector<f64>; 4],
    cfg: &RefineConfig,
    grad: &mut [DVector<f64>; 4],
) -> (f64, Option<DVector<f64>>) {
    let mut value = 0.0;
    let mut offset_grad = None;
    if cfg.position_reg > 0.0 {
        let offset = &raw[0] - &model.basis(Modality::Position).mean;
        value += cfg.position_reg * offset.norm_squared();
        offset_grad = Some(offset * (2.0 * cfg.position_reg));
    }
    if cfg.scale_reg > 0.0 {
        for (g, s) in grad[2].iter_mut().zip(raw[2].iter()) {
            let e2 = (2.0 * s).exp();
            value += cfg.scale_reg * e2;
            *g += 2.0 * cfg.scale_reg * e2;
        }
    }
    (value, offset_grad)
}

/// Objective and gradient over `frames`, each weighted equally.
pub fn refine_objective(
    model: &GemModel,
    frames: &[&TrainingFrame],
    background: Vector3<f64>,
    cfg: &RefineConfig,
    hook: Option<&dyn PerceptualHook>,
) -> Result<(Objective, ModelGradient)> {
    if frames.is_empty() {
        return Err(invalid("empty training batch"));
    }
    let weights = cfg.loss_weights();
    let per_frame: Vec<Result<(Evaluated, FrameGradient)>> = frames
        .par_iter()
        .map(|f| {
            let eval = evaluate(model, &f.coefficients)?;
            let g = frame_gradient(&eval, &f.views, background, &weights, hook, &cfg.render)?;
            Ok((eval, g))
        })
        .collect();

    let scale = 1.0 / frames.len() as f64;
    let mut obj = Objective::default();
    let mut grad = ModelGradient::zeros(model);
    for (frame, r) in frames.iter().zip(per_frame) {
        let (eval, mut fg) = r?;
        let (reg, offset_grad) = regularize(model, &eval.raw, cfg, &mut fg.attributes);
        obj.photometric.l1 += fg.terms.l1 * scale;
        obj.photometric.dssim += fg.terms.dssim * scale;
        obj.photometric.perceptual += fg.terms.perceptual * scale;
        obj.photometric.total += fg.terms.total * scale;
        obj.regularization += reg * scale;
        obj.psnr += fg.psnr * scale;
        for m in 0..4 {
            grad.means[m].axpy(scale, &fg.attributes[m], 1.0);
            let k = &frame.coefficients.blocks[m];
            if !k.is_empty() {
                grad.bases[m].ger(scale, &fg.attributes[m], k, 1.0);
            }
        }
        if let Some(d) = offset_grad {
            let k = &frame.coefficients.blocks[0];
            if !k.is_empty() {
                grad.bases[0].ger(scale, &d, k, 1.0);
            }
        }
        for (a, b) in grad.colors.iter_mut().zip(&fg.colors) {
            *a += b * scale;
        }
    }
    obj.total = obj.photometric.total + obj.regularization;
    Ok((obj, grad))
}

/// Mean PSNR over every view of every frame.
pub fn training_psnr(model: &GemModel, set: &TrainingSet, render: &RenderConfig) -> Result<f64> {
    frames_psnr(model, &set.frames, set.background, render)
}

fn frames_psnr(model: &GemModel, frames: &[TrainingFrame], background: Vector3<f64>, render: &RenderConfig) -> Result<f64> {
    let per_frame: Vec<Result<Vec<f64>>> = frames
        .par_iter()
        .map(|f| {
            let cloud = model.evaluate(&f.coefficients)?;
            f.views
                .iter()
                .map(|v| {
                    let (img, _) = render_forward(&cloud, &v.camera, background, render)?;
                    psnr(&img, &v.target)
                })
                .collect()
        })
        .collect();
    let mut sum = 0.0;
    let mut n = 0usize;
    for r in per_frame {
        for p in r? {
            sum += p;
            n += 1;
        }
    }
    if n == 0 {
        return Err(invalid("training set has no views"));
    }
    Ok(sum / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LossRecord {
    pub step: usize,
    pub l1: f64,
    pub dssim: f64,
    pub total: f64,
    pub psnr: f64,
}

/// Training PSNR around one QR pass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Checkpoint {
    /// Steps completed when the pass ran.
    pub step: usize,
    pub psnr_before: f64,
    pub psnr_after: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefineOutcome {
    pub model: GemModel,
    /// Training coefficients expressed in the returned bases.
    pub coefficients: Vec<CoefficientVector>,
    pub history: Vec<LossRecord>,
    pub checkpoints: Vec<Checkpoint>,
    pub initial_psnr: f64,
}

impl RefineOutcome {
    pub fn final_psnr(&self) -> f64 {
        self.checkpoints.last().map_or(self.initial_psnr, |c| c.psnr_after)
    }
}

/// Writes `step,l1,dssim,total,psnr` rows.
pub fn write_history_csv(history: &[LossRecord], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "step,l1,dssim,total,psnr")?;
    for r in history {
        writeln!(out, "{},{},{},{},{}", r.step, r.l1, r.dssim, r.total, r.psnr)?;
    }
    Ok(())
}

pub fn refine_bases(
    model: &GemModel,
    train: &TrainingSet,
    cfg: &RefineConfig,
    hook: Option<&dyn PerceptualHook>,
) -> Result<RefineOutcome> {
    cfg.validate()?;
    if train.frames.is_empty() {
        return Err(invalid("training set has no frames"));
    }
    for (i, f) in train.frames.iter().enumerate() {
        model.check_coefficients(&f.coefficients)?;
        if f.views.is_empty() {
            return Err(invalid(format!("training frame {i} has no views")));
        }
    }
    let initial_psnr = training_psnr(model, train, &cfg.render)?;
    let mut model = model.clone();
    let mut frames = train.frames.clone();
    let mut history = Vec::with_capacity(cfg.steps);
    let mut checkpoints = Vec::new();
    if cfg.steps == 0 {
        return Ok(RefineOutcome {
            model,
            coefficients: frames.into_iter().map(|f| f.coefficients).collect(),
            history,
            checkpoints,
            initial_psnr,
        });
    }

    let mut mean_opt: Vec<Adam> = model.bases().iter().map(|b| Adam::new(b.mean.len(), cfg.adam)).collect();
    let mut basis_opt: Vec<Adam> = model.bases().iter().map(|b| Adam::new(b.basis.len(), cfg.adam)).collect();
    let mut color_opt = Adam::new(3 * model.texel_count(), cfg.adam);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;

    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch.min(frames.len()) {
            if cursor == order.len() {
                order = (0..frames.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let refs: Vec<&TrainingFrame> = batch.iter().map(|&i| &frames[i]).collect();
        let (obj, grad) = refine_objective(&model, &refs, train.background, cfg, hook)?;
        if !obj.total.is_finite() || !grad.is_finite() {
            return Err(GemError::NonFiniteLoss {
                step,
                detail: diagnostic(&model, &batch, &obj),
            });
        }
        history.push(LossRecord {
            step,
            l1: obj.photometric.l1,
            dssim: obj.photometric.dssim,
            total: obj.total,
            psnr: obj.psnr,
        });

        let (bases, colors) = model.parts_mut();
        for m in 0..4 {
            let lr = cfg.step_size * cfg.modality_lr[m];
            mean_opt[m].step(bases[m].mean.as_mut_slice(), grad.means[m].as_slice(), lr);
            basis_opt[m].step(bases[m].basis.as_mut_slice(), grad.bases[m].as_slice(), lr);
        }
        let mut flat: Vec<f64> = colors.iter().flat_map(|c| c.iter().copied()).collect();
        let dflat: Vec<f64> = grad.colors.iter().flat_map(|c| c.iter().copied()).collect();
        color_opt.step(&mut flat, &dflat, cfg.step_size * cfg.color_lr);
        for (c, v) in colors.iter_mut().zip(flat.chunks_exact(3)) {
            *c = Vector3::new(v[0], v[1], v[2]).map(|x| x.clamp(0.0, 1.0));
        }

        let done = step + 1;
        if done % cfg.orthogonalize_every == 0 || done == cfg.steps {
            let psnr_before = frames_psnr(&model, &frames, train.background, &cfg.render)?;
            reorthogonalize(&mut model, &mut frames)?;
            let psnr_after = frames_psnr(&model, &frames, train.background, &cfg.render)?;
            log::info!("step {done}: training PSNR {psnr_before:.3} dB before QR, {psnr_after:.3} dB after");
            checkpoints.push(Checkpoint {
                step: done,
                psnr_before,
                psnr_after,
            });
        }
    }

    let model = GemModel::new(model.layout().clone(), model.bases().clone(), model.colors().to_vec())?;
    Ok(RefineOutcome {
        model,
        coefficients: frames.into_iter().map(|f| f.coefficients).collect(),
        history,
        checkpoints,
        initial_psnr,
    })
}

/// QR of every basis; coefficients become `R k` and standard deviations
/// are carried through the same map.
pub fn reorthogonalize(model: &mut GemModel, frames: &mut [TrainingFrame]) -> Result<()> {
    let (bases, _) = model.parts_mut();
    for (m, b) in bases.iter_mut().enumerate() {
        if b.component_count() == 0 {
            continue;
        }
        let (q, r) = orthogonalize(&b.basis, b.modality.name())?;
        let var = DMatrix::from_diagonal(&b.stddev.map(|s| s * s));
        let cov = &r * var * r.transpose();
        b.stddev = DVector::from_fn(r.nrows(), |j, _| cov[(j, j)].max(0.0).sqrt());
        b.basis = q;
        for f in frames.iter_mut() {
            f.coefficients.blocks[m] = &r * &f.coefficients.blocks[m];
        }
    }
    Ok(())
}

fn diagnostic(model: &GemModel, batch: &[usize], obj: &Objective) -> String {
    let norms: Vec<String> = model
        .bases()
        .iter()
        .map(|b| format!("{}: |mean|max={:.3e} |basis|max={:.3e}", b.modality, b.mean.amax(), b.basis.amax()))
        .collect();
    format!(
        "frames {batch:?}, l1={} dssim={} reg={} total={}; {}",
        obj.photometric.l1,
        obj.photometric.dssim,
        obj.regularization,
        obj.total,
        norms.join(", ")
    )
}
