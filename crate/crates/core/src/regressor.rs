//! Feature-to-coefficient regression.
//!
//! A feature `f` is made relative to a neutral feature, `r = f - f_neutral`,
//! projected on a PCA basis of relative training features,
//! `kappa = B^T (r - mean)`, and mapped through a ReLU MLP whose output is
//! bounded by `k = 3 sigma * tanh(z)`, `sigma` being the GEM coefficient
//! standard deviations.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{put_f32s, put_u32, Reader};
use crate::eigenmodel::CoefficientVector;
use crate::error::{invalid, malformed, GemError, Result};
use crate::linalg::{pca_fit, spectral_norm};
use crate::optim::{Adam, AdamConfig};

/// Components of the relative-feature PCA.
pub const FEATURE_COMPONENTS: usize = 50;

/// Output bound in standard deviations.
pub const OUTPUT_SIGMAS: f64 = 3.0;

pub const REGRESSOR_MAGIC: &[u8; 4] = b"GEMR";
pub const REGRESSOR_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePca {
    pub neutral: DVector<f64>,
    pub mean: DVector<f64>,
    /// `featureDim x retained`, orthonormal columns.
    pub basis: DMatrix<f64>,
    /// Fewer than [`FEATURE_COMPONENTS`] directions carried variance.
    pub rank_truncated: bool,
}

impl FeaturePca {
    /// PCA of `features` (one row per sample) relative to row `neutral`.
    pub fn build(features: &DMatrix<f64>, neutral: usize) -> Result<Self> {
        let (n, dim) = features.shape();
        if n < FEATURE_COMPONENTS + 1 {
            return Err(invalid(format!(
                "feature PCA needs at least {} samples, got {n}",
                FEATURE_COMPONENTS + 1
            )));
        }
        if neutral >= n {
            return Err(invalid(format!("neutral row {neutral} out of range for {n} samples")));
        }
        let f_neutral = features.row(neutral).transpose();
        let mut relative = features.clone();
        for mut row in relative.row_iter_mut() {
            row -= f_neutral.transpose();
        }
        let want = FEATURE_COMPONENTS.min(dim);
        let fit = pca_fit(&relative, want)?;
        if fit.basis.ncols() == 0 {
            return Err(invalid("relative features have rank 0: every sample equals the neutral feature"));
        }
        let rank_truncated = fit.basis.ncols() < FEATURE_COMPONENTS;
        if rank_truncated {
            log::warn!(
                "feature PCA keeps {} of {FEATURE_COMPONENTS} components",
                fit.basis.ncols()
            );
        }
        Ok(Self {
            neutral: f_neutral,
            mean: fit.mean,
            basis: fit.basis,
            rank_truncated,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.neutral.len()
    }

    pub fn retained(&self) -> usize {
        self.basis.ncols()
    }

    /// `kappa`, zero-padded to [`FEATURE_COMPONENTS`] entries.
    pub fn project(&self, feature: &DVector<f64>) -> Result<DVector<f64>> {
        if feature.len() != self.feature_dim() {
            return Err(GemError::SizeMismatch {
                expected: format!("feature of dimension {}", self.feature_dim()),
                found: feature.len().to_string(),
            });
        }
        if !feature.iter().all(|v| v.is_finite()) {
            return Err(invalid("feature contains non-finite values"));
        }
        let centered = feature - &self.neutral - &self.mean;
        let mut kappa = DVector::zeros(FEATURE_COMPONENTS);
        kappa.rows_mut(0, self.retained()).copy_from(&self.basis.tr_mul(&centered));
        Ok(kappa)
    }

    /// Projections of every row of `features`, one column per sample.
    pub fn project_rows(&self, features: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(FEATURE_COMPONENTS, features.nrows());
        for (i, row) in features.row_iter().enumerate() {
            out.set_column(i, &self.project(&row.transpose())?);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `out x in`.
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

/// ReLU between layers, identity after the last.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// Uniform fan-in initialization, `U(-sqrt(6 / in), sqrt(6 / in))`, zero biases.
    pub fn new(sizes: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let bound = (6.0 / w[0] as f64).sqrt();
                Dense {
                    weight: DMatrix::from_fn(w[1], w[0], |_, _| rng.random_range(-bound..bound)),
                    bias: DVector::zeros(w[1]),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        Self {
            layers: sizes
                .windows(2)
                .map(|w| Dense {
                    weight: DMatrix::zeros(w[1], w[0]),
                    bias: DVector::zeros(w[1]),
                })
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.ncols())
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.nrows())
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Pre-activation outputs, one column per input column.
    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.forward_all(x).pop().expect("at least the input")
    }

    /// Layer activations: the input, each hidden ReLU output, the output.
    fn forward_all(&self, x: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let mut acts = vec![x.clone()];
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = &l.weight * acts.last().unwrap();
            for mut col in z.column_iter_mut() {
                col += &l.bias;
            }
            if i + 1 < self.layers.len() {
                z.apply(|v| *v = v.max(0.0));
            }
            acts.push(z);
        }
        acts
    }

    /// Mean squared error of `scale * tanh(MLP(x))` against `targets`
    /// (one column per sample) and its gradient per layer.
    pub fn bounded_mse(&self, x: &DMatrix<f64>, scale: &DVector<f64>, targets: &DMatrix<f64>) -> (f64, Vec<Dense>) {
        let acts = self.forward_all(x);
        let z = acts.last().unwrap();
        let count = (z.nrows() * z.ncols()).max(1) as f64;
        let mut loss = 0.0;
        let mut delta = DMatrix::zeros(z.nrows(), z.ncols());
        for c in 0..z.ncols() {
            for r in 0..z.nrows() {
                let t = z[(r, c)].tanh();
                let e = scale[r] * t - targets[(r, c)];
                loss += e * e;
                delta[(r, c)] = 2.0 * e * scale[r] * (1.0 - t * t) / count;
            }
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            let input = &acts[i];
            grads.push(Dense {
                weight: &delta * input.transpose(),
                bias: delta.column_sum(),
            });
            if i > 0 {
                let mut back = self.layers[i].weight.tr_mul(&delta);
                back.zip_apply(input, |d, a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
                delta = back;
            }
        }
        grads.reverse();
        (loss / count, grads)
    }

    /// Product of the layer spectral norms: a Lipschitz constant of the
    /// pre-activation output.
    pub fn lipschitz_bound(&self) -> f64 {
        self.layers.iter().map(|l| spectral_norm(&l.weight)).product()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegressorModel {
    pub pca: FeaturePca,
    pub mlp: Mlp,
    /// `3 sigma` per coefficient.
    pub output_scale: DVector<f64>,
    pub counts: [usize; 4],
}

impl RegressorModel {
    /// Untrained regressor with freshly initialized weights.
    pub fn new(pca: FeaturePca, sigma: &[f64], counts: [usize; 4], hidden: &[usize], seed: u64) -> Result<Self> {
        let k: usize = counts.iter().sum();
        if sigma.len() != k {
            return Err(GemError::SizeMismatch {
                expected: format!("{k} standard deviations"),
                found: sigma.len().to_string(),
            });
        }
        if let Some(s) = sigma.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
            return Err(invalid(format!("standard deviation {s} is not finite and non-negative")));
        }
        let mut sizes = vec![FEATURE_COMPONENTS];
        sizes.extend_from_slice(hidden);
        sizes.push(k);
        Ok(Self {
            pca,
            mlp: Mlp::new(&sizes, seed),
            output_scale: DVector::from_iterator(k, sigma.iter().map(|s| OUTPUT_SIGMAS * s)),
            counts,
        })
    }

    pub fn bound(&self) -> &DVector<f64> {
        &self.output_scale
    }

    /// `k = 3 sigma * tanh(MLP(kappa))`.
    pub fn regress_kappa(&self, kappa: &DVector<f64>) -> CoefficientVector {
        let z = self.mlp.forward(&DMatrix::from_column_slice(kappa.len(), 1, kappa.as_slice()));
        let flat: Vec<f64> = z.iter().zip(self.output_scale.iter()).map(|(z, s)| s * z.tanh()).collect();
        CoefficientVector::from_flat(&flat, self.counts).expect("output size matches counts")
    }

    pub fn regress(&self, feature: &DVector<f64>) -> Result<CoefficientVector> {
        Ok(self.regress_kappa(&self.pca.project(feature)?))
    }

    /// Lipschitz constant of `regress_kappa` in the Euclidean norm.
    pub fn lipschitz_bound(&self) -> f64 {
        self.mlp.lipschitz_bound() * self.output_scale.amax()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(REGRESSOR_MAGIC);
        put_u32(&mut out, REGRESSOR_VERSION);
        put_u32(&mut out, self.pca.feature_dim() as u32);
        put_u32(&mut out, self.pca.retained() as u32);
        put_u32(&mut out, self.pca.rank_truncated as u32);
        put_f32s(&mut out, self.pca.neutral.iter());
        put_f32s(&mut out, self.pca.mean.iter());
        for col in self.pca.basis.column_iter() {
            put_f32s(&mut out, col.iter());
        }
        for c in self.counts {
            put_u32(&mut out, c as u32);
        }
        put_u32(&mut out, self.mlp.layers.len() as u32);
        for l in &self.mlp.layers {
            put_u32(&mut out, l.weight.nrows() as u32);
            put_u32(&mut out, l.weight.ncols() as u32);
            for row in l.weight.row_iter() {
                put_f32s(&mut out, row.iter());
            }
            put_f32s(&mut out, l.bias.iter());
        }
        put_f32s(&mut out, self.output_scale.iter());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(REGRESSOR_MAGIC)?;
        r.version(REGRESSOR_VERSION)?;
        let dim = r.u32()? as usize;
        let retained = r.u32()? as usize;
        if retained > FEATURE_COMPONENTS.min(dim) {
            return Err(malformed("regressor", format!("{retained} PCA components for dimension {dim}")));
        }
        let rank_truncated = match r.u32()? {
            0 => false,
            1 => true,
            v => return Err(malformed("regressor", format!("flag {v}"))),
        };
        let neutral = DVector::from_vec(r.f32s(dim)?);
        let mean = DVector::from_vec(r.f32s(dim)?);
        let basis = DMatrix::from_vec(dim, retained, r.f32s(dim * retained)?);
        let mut counts = [0usize; 4];
        for c in &mut counts {
            *c = r.u32()? as usize;
        }
        let k: usize = counts.iter().sum();
        let n_layers = r.u32()? as usize;
        let mut layers = Vec::new();
        let mut expect_in = FEATURE_COMPONENTS;
        for i in 0..n_layers {
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            if cols != expect_in {
                return Err(malformed("regressor", format!("layer {i} takes {cols} inputs, expected {expect_in}")));
            }
            let weight = DMatrix::from_row_slice(rows, cols, &r.f32s(rows.saturating_mul(cols))?);
            let bias = DVector::from_vec(r.f32s(rows)?);
            layers.push(Dense { weight, bias });
            expect_in = rows;
        }
        if n_layers == 0 || expect_in != k {
            return Err(malformed("regressor", format!("network emits {expect_in} values for {k} coefficients")));
        }
        let output_scale = DVector::from_vec(r.f32s(k)?);
        r.finish()?;
        Ok(Self {
            pca: FeaturePca {
                neutral,
                mean,
                basis,
                rank_truncated,
            },
            mlp: Mlp { layers },
            output_scale,
            counts,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct RegressorConfig {
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub learning_rate: f64,
    pub schedule: Schedule,
    /// Samples per step; 0 uses every pair.
    pub batch: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256, 256],
            steps: 2000,
            learning_rate: 1e-3,
            schedule: Schedule::Cosine,
            batch: 0,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

/// Learning rate over the run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Schedule {
    Constant,
    /// Half-cosine decay from the base rate to zero at the last step.
    Cosine,
}

impl Schedule {
    pub fn rate(self, base: f64, step: usize, steps: usize) -> f64 {
        match self {
            Self::Constant => base,
            Self::Cosine => 0.5 * base * (1.0 + (std::f64::consts::PI * step as f64 / steps.max(1) as f64).cos()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub model: RegressorModel,
    /// Batch loss before each step.
    pub losses: Vec<f64>,
    /// Target entries clamped into the output bound.
    pub clamped_targets: usize,
}

/// Trains the MLP of a regressor whose PCA layer and bound are fixed.
pub fn train(
    pca: FeaturePca,
    sigma: &[f64],
    counts: [usize; 4],
    features: &DMatrix<f64>,
    targets: &[CoefficientVector],
    cfg: &RegressorConfig,
) -> Result<TrainOutcome> {
    if targets.is_empty() {
        return Err(invalid("training needs at least one pair"));
    }
    if features.nrows() != targets.len() {
        return Err(GemError::SizeMismatch {
            expected: format!("{} feature rows", targets.len()),
            found: features.nrows().to_string(),
        });
    }
    if !(cfg.learning_rate > 0.0 && cfg.learning_rate.is_finite()) {
        return Err(invalid(format!("learningRate must be positive, got {}", cfg.learning_rate)));
    }
    let mut model = RegressorModel::new(pca, sigma, counts, &cfg.hidden, cfg.seed)?;
    let kappas = model.pca.project_rows(features)?;
    let k: usize = counts.iter().sum();
    let mut t = DMatrix::zeros(k, targets.len());
    let mut clamped_targets = 0;
    for (j, target) in targets.iter().enumerate() {
        if target.counts() != counts {
            return Err(invalid(format!("pair {j}: blocks {:?}, expected {counts:?}", target.counts())));
        }
        for (i, v) in target.to_flat().into_iter().enumerate() {
            let b = model.output_scale[i];
            if !v.is_finite() {
                return Err(invalid(format!("pair {j}: non-finite target")));
            }
            let c = v.clamp(-b, b);
            if c != v {
                clamped_targets += 1;
            }
            t[(i, j)] = c;
        }
    }
    if clamped_targets > 0 {
        log::warn!("{clamped_targets} target coefficients clamped to the 3-sigma bound");
    }

    let n = targets.len();
    let batch = if cfg.batch == 0 { n } else { cfg.batch.min(n) };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut opts: Vec<(Adam, Adam)> = model
        .mlp
        .layers
        .iter()
        .map(|l| (Adam::new(l.weight.len(), cfg.adam), Adam::new(l.bias.len(), cfg.adam)))
        .collect();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (x, y) = if batch == n {
            (kappas.clone(), t.clone())
        } else {
            let mut cols = Vec::with_capacity(batch);
            while cols.len() < batch {
                if cursor == n {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                cols.push(order[cursor]);
                cursor += 1;
            }
            (kappas.select_columns(&cols), t.select_columns(&cols))
        };
        let (loss, grads) = model.mlp.bounded_mse(&x, &model.output_scale, &y);
        if !loss.is_finite() {
            return Err(GemError::NonFiniteLoss {
                step,
                detail: "regressor loss".into(),
            });
        }
        losses.push(loss);
        let lr = cfg.schedule.rate(cfg.learning_rate, step, cfg.steps);
        for ((layer, g), (ow, ob)) in model.mlp.layers.iter_mut().zip(&grads).zip(&mut opts) {
            ow.step(layer.weight.as_mut_slice(), g.weight.as_slice(), lr);
            ob.step(layer.bias.as_mut_slice(), g.bias.as_slice(), lr);
        }
    }
    Ok(TrainOutcome {
        model,
        losses,
        clamped_targets,
    })
}

/// Mean squared coefficient error of a regressor over pairs.
pub fn evaluate_mse(model: &RegressorModel, features: &DMatrix<f64>, targets: &[CoefficientVector]) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (row, target) in features.row_iter().zip(targets) {
        let k = model.regress(&row.transpose())?;
        for (a, b) in k.to_flat().iter().zip(target.to_flat()) {
            sum += (a - b) * (a - b);
            count += 1;
        }
    }
    Ok(sum / count.max(1) as f64)
}

/// Where the regression targets came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Provenance {
    /// Ground-truth coefficients of a synthetic sequence.
    GroundTruth,
    /// Training clouds projected onto the model.
    Projected,
    /// Analysis-by-synthesis fits to images.
    Fitted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Pair {
    /// Row of the feature table.
    pub feature: usize,
    /// Record of the coefficient table.
    pub coefficients: usize,
}

/// Links rows of a feature table to records of a coefficient table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct PairManifest {
    /// Paths relative to the manifest.
    pub features: String,
    pub coefficients: String,
    pub provenance: Provenance,
    pub neutral: usize,
    pub pairs: Vec<Pair>,
}

impl PairManifest {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// The full feature table, the paired feature rows, and their targets.
    pub fn resolve(&self, base: &Path) -> Result<(DMatrix<f64>, DMatrix<f64>, Vec<CoefficientVector>)> {
        let all = crate::io::load_features(&base.join(&self.features))?;
        let (ks, _) = crate::io::load_coefficients(&base.join(&self.coefficients))?;
        if self.neutral >= all.nrows() {
            return Err(invalid(format!("neutral row {} out of range", self.neutral)));
        }
        let mut rows = Vec::with_capacity(self.pairs.len());
        let mut targets = Vec::with_capacity(self.pairs.len());
        for p in &self.pairs {
            if p.feature >= all.nrows() || p.coefficients >= ks.len() {
                return Err(invalid(format!("pair {p:?} out of range")));
            }
            rows.push(p.feature);
            targets.push(ks[p.coefficients].clone());
        }
        let paired = all.select_rows(&rows);
        Ok((all, paired, targets))
    }
}
