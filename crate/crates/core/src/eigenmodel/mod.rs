//! Gaussian eigenmodels (GEM): a mean and an orthonormal linear basis per
//! attribute modality over a fixed texel layout, plus a static color per
//! texel.
//!
//! Each modality's attributes are flattened texel-major: texel `i` occupies
//! entries `dim*i .. dim*(i+1)`. A Gaussian cloud is reconstructed as
//! `x = mean + B k` per modality.

mod distill;
mod format;

pub use distill::{distill, ColorSource, DistillReport, ModalityReport};
pub use format::{basis_payload_bytes, serialized_size, GEM_MAGIC, GEM_VERSION};

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, GemError, Result};
use crate::gaussian::GaussianCloud;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Position,
    Rotation,
    Scale,
    Opacity,
}

impl Modality {
    /// Storage and serialization order.
    pub const ALL: [Modality; 4] = [Modality::Position, Modality::Rotation, Modality::Scale, Modality::Opacity];

    pub fn dim(self) -> usize {
        match self {
            Modality::Position => 3,
            Modality::Rotation => 4,
            Modality::Scale => 3,
            Modality::Opacity => 1,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Position => "position",
            Modality::Rotation => "rotation",
            Modality::Scale => "scale",
            Modality::Opacity => "opacity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Modality::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| invalid(format!("unknown modality {s:?} (expected position, rotation, scale or opacity)")))
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Which texels of a `width x height` UV grid carry a Gaussian.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct TexelLayout {
    pub tex_width: usize,
    pub tex_height: usize,
    /// Row-major indices of the active texels, ascending.
    pub active: Vec<usize>,
}

impl TexelLayout {
    pub fn full(tex_width: usize, tex_height: usize) -> Self {
        Self {
            tex_width,
            tex_height,
            active: (0..tex_width * tex_height).collect(),
        }
    }

    pub fn from_mask(tex_width: usize, tex_height: usize, mask: &[bool]) -> Result<Self> {
        if mask.len() != tex_width * tex_height {
            return Err(GemError::SizeMismatch {
                expected: format!("{} mask entries", tex_width * tex_height),
                found: mask.len().to_string(),
            });
        }
        Ok(Self {
            tex_width,
            tex_height,
            active: mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.tex_width * self.tex_height;
        if self.active.windows(2).any(|w| w[0] >= w[1]) || self.active.last().is_some_and(|&i| i >= n) {
            return Err(invalid("active texel indices must be ascending and inside the grid"));
        }
        Ok(())
    }

    pub fn texel_count(&self) -> usize {
        self.active.len()
    }

    pub fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.tex_width * self.tex_height];
        for &i in &self.active {
            m[i] = true;
        }
        m
    }
}

/// Mean, basis and per-component standard deviation for one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct EigenBasis {
    pub modality: Modality,
    /// Length `dim * T`.
    pub mean: DVector<f64>,
    /// `dim * T` rows by `M` columns; columns are the components.
    pub basis: DMatrix<f64>,
    /// Length `M`, non-negative.
    pub stddev: DVector<f64>,
}

impl EigenBasis {
    pub fn new(modality: Modality, mean: DVector<f64>, basis: DMatrix<f64>, stddev: DVector<f64>) -> Result<Self> {
        let b = Self {
            modality,
            mean,
            basis,
            stddev,
        };
        b.validate()?;
        Ok(b)
    }

    fn validate(&self) -> Result<()> {
        let name = self.modality.name();
        if self.mean.len() % self.modality.dim() != 0 {
            return Err(invalid(format!("{name} mean length {} not a multiple of {}", self.mean.len(), self.modality.dim())));
        }
        if self.basis.nrows() != self.mean.len() {
            return Err(GemError::SizeMismatch {
                expected: format!("{name} basis with {} rows", self.mean.len()),
                found: format!("{} rows", self.basis.nrows()),
            });
        }
        if self.stddev.len() != self.basis.ncols() {
            return Err(GemError::SizeMismatch {
                expected: format!("{} {name} stddevs", self.basis.ncols()),
                found: self.stddev.len().to_string(),
            });
        }
        if !self.mean.iter().chain(self.basis.iter()).all(|v| v.is_finite()) {
            return Err(invalid(format!("{name} basis has non-finite values")));
        }
        if !self.stddev.iter().all(|s| s.is_finite() && *s >= 0.0) {
            return Err(invalid(format!("{name} stddevs must be finite and non-negative")));
        }
        Ok(())
    }

    pub fn texel_count(&self) -> usize {
        self.mean.len() / self.modality.dim()
    }

    pub fn component_count(&self) -> usize {
        self.basis.ncols()
    }

    /// `mean + B k`.
    pub fn reconstruct(&self, k: &DVector<f64>) -> DVector<f64> {
        let mut x = self.mean.clone();
        if !k.is_empty() {
            x.gemv(1.0, &self.basis, k, 1.0);
        }
        x
    }

    /// Least-squares coefficients of `x - mean`.
    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        let m = self.component_count();
        if m == 0 {
            return DVector::zeros(0);
        }
        let rhs = self.basis.tr_mul(&(x - &self.mean));
        let gram = self.basis.tr_mul(&self.basis);
        match gram.clone().cholesky() {
            Some(c) => c.solve(&rhs),
            None => gram.pseudo_inverse(1e-12).map(|p| p * &rhs).unwrap_or(rhs),
        }
    }
}

/// One coefficient block per modality, in [`Modality::ALL`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientVector {
    pub blocks: [DVector<f64>; 4],
}

impl CoefficientVector {
    pub fn zeros(counts: [usize; 4]) -> Self {
        Self {
            blocks: counts.map(DVector::zeros),
        }
    }

    pub fn get(&self, m: Modality) -> &DVector<f64> {
        &self.blocks[m.index()]
    }

    pub fn get_mut(&mut self, m: Modality) -> &mut DVector<f64> {
        &mut self.blocks[m.index()]
    }

    pub fn counts(&self) -> [usize; 4] {
        [0, 1, 2, 3].map(|i| self.blocks[i].len())
    }

    pub fn len(&self) -> usize {
        self.blocks.iter().map(|b| b.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Blocks concatenated in modality order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.blocks.iter().flat_map(|b| b.iter().copied()).collect()
    }

    pub fn from_flat(flat: &[f64], counts: [usize; 4]) -> Result<Self> {
        let total: usize = counts.iter().sum();
        if flat.len() != total {
            return Err(GemError::SizeMismatch {
                expected: format!("{total} coefficients"),
                found: flat.len().to_string(),
            });
        }
        let mut offset = 0;
        let blocks = counts.map(|c| {
            let b = DVector::from_column_slice(&flat[offset..offset + c]);
            offset += c;
            b
        });
        Ok(Self { blocks })
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

/// A complete eigenmodel.
#[derive(Clone, Debug, PartialEq)]
pub struct GemModel {
    layout: TexelLayout,
    bases: [EigenBasis; 4],
    colors: Vec<Vector3<f64>>,
}

impl GemModel {
    pub fn new(layout: TexelLayout, bases: [EigenBasis; 4], colors: Vec<Vector3<f64>>) -> Result<Self> {
        layout.validate()?;
        let t = layout.texel_count();
        for (b, m) in bases.iter().zip(Modality::ALL) {
            if b.modality != m {
                return Err(invalid(format!("basis slot {m} holds a {} basis", b.modality)));
            }
            b.validate()?;
            if b.texel_count() != t || b.mean.len() != t * m.dim() {
                return Err(GemError::SizeMismatch {
                    expected: format!("{m} basis over {t} texels"),
                    found: format!("{} values", b.mean.len()),
                });
            }
        }
        if colors.len() != t {
            return Err(GemError::SizeMismatch {
                expected: format!("{t} colors"),
                found: colors.len().to_string(),
            });
        }
        if !colors.iter().all(|c| c.iter().all(|v| (0.0..=1.0).contains(v))) {
            return Err(invalid("texel colors must lie in [0, 1]"));
        }
        Ok(Self { layout, bases, colors })
    }

    pub fn layout(&self) -> &TexelLayout {
        &self.layout
    }

    pub fn texel_count(&self) -> usize {
        self.layout.texel_count()
    }

    pub fn basis(&self, m: Modality) -> &EigenBasis {
        &self.bases[m.index()]
    }

    pub fn bases(&self) -> &[EigenBasis; 4] {
        &self.bases
    }

    pub fn colors(&self) -> &[Vector3<f64>] {
        &self.colors
    }

    pub fn component_counts(&self) -> [usize; 4] {
        [0, 1, 2, 3].map(|i| self.bases[i].component_count())
    }

    pub fn zero_coefficients(&self) -> CoefficientVector {
        CoefficientVector::zeros(self.component_counts())
    }

    /// All stddevs concatenated in modality order.
    pub fn stddevs_flat(&self) -> Vec<f64> {
        self.bases.iter().flat_map(|b| b.stddev.iter().copied()).collect()
    }

    /// Replaces parts of the model; the result is revalidated.
    pub fn with_parts(&self, bases: [EigenBasis; 4], colors: Vec<Vector3<f64>>) -> Result<Self> {
        Self::new(self.layout.clone(), bases, colors)
    }

    /// Mutable access for optimizers; callers revalidate with [`GemModel::new`]
    /// or keep the invariants themselves.
    pub(crate) fn parts_mut(&mut self) -> (&mut [EigenBasis; 4], &mut Vec<Vector3<f64>>) {
        (&mut self.bases, &mut self.colors)
    }

    pub fn check_coefficients(&self, k: &CoefficientVector) -> Result<()> {
        if k.counts() != self.component_counts() {
            return Err(GemError::ContractViolation(format!(
                "coefficient blocks {:?} do not match model components {:?}",
                k.counts(),
                self.component_counts()
            )));
        }
        if !k.is_finite() {
            return Err(invalid("non-finite coefficients"));
        }
        Ok(())
    }

    /// Per-modality attribute vectors `mean + B k`, before any normalization.
    pub fn evaluate_raw(&self, k: &CoefficientVector) -> Result<[DVector<f64>; 4]> {
        self.check_coefficients(k)?;
        Ok([0, 1, 2, 3].map(|i| self.bases[i].reconstruct(&k.blocks[i])))
    }

    /// The Gaussian cloud for coefficients `k`. Quaternions are renormalized.
    pub fn evaluate(&self, k: &CoefficientVector) -> Result<GaussianCloud> {
        let raw = self.evaluate_raw(k)?;
        attributes_to_cloud(&raw, &self.colors)
    }

    /// Least-squares coefficients of `cloud`, after aligning each quaternion's
    /// sign with the model's mean rotation.
    pub fn project(&self, cloud: &GaussianCloud) -> Result<CoefficientVector> {
        if cloud.len() != self.texel_count() {
            return Err(GemError::SizeMismatch {
                expected: format!("{} Gaussians", self.texel_count()),
                found: cloud.len().to_string(),
            });
        }
        let mut attrs = cloud_attributes(cloud);
        align_quaternions(&mut attrs[Modality::Rotation.index()], &self.basis(Modality::Rotation).mean);
        Ok(CoefficientVector {
            blocks: [0, 1, 2, 3].map(|i| self.bases[i].project(&attrs[i])),
        })
    }

    pub fn orthonormality_error(&self) -> f64 {
        self.bases
            .iter()
            .map(|b| crate::linalg::orthonormality_error(&b.basis))
            .fold(0.0, f64::max)
    }
}

/// Flattened per-modality attribute vectors of a cloud.
pub fn cloud_attributes(cloud: &GaussianCloud) -> [DVector<f64>; 4] {
    let n = cloud.len();
    let mut pos = DVector::zeros(3 * n);
    let mut rot = DVector::zeros(4 * n);
    let mut scale = DVector::zeros(3 * n);
    let mut opacity = DVector::zeros(n);
    for i in 0..n {
        pos.fixed_rows_mut::<3>(3 * i).copy_from(&cloud.positions()[i]);
        rot.fixed_rows_mut::<4>(4 * i).copy_from(&cloud.rotations()[i]);
        scale.fixed_rows_mut::<3>(3 * i).copy_from(&cloud.log_scales()[i]);
        opacity[i] = cloud.opacity_logits()[i];
    }
    [pos, rot, scale, opacity]
}

pub(crate) fn attributes_to_cloud(raw: &[DVector<f64>; 4], colors: &[Vector3<f64>]) -> Result<GaussianCloud> {
    let n = colors.len();
    let mut cloud = GaussianCloud::default();
    for i in 0..n {
        cloud.push(
            raw[0].fixed_rows::<3>(3 * i).into_owned(),
            raw[1].fixed_rows::<4>(4 * i).into_owned(),
            raw[2].fixed_rows::<3>(3 * i).into_owned(),
            raw[3][i],
            colors[i],
        )?;
    }
    Ok(cloud)
}

/// Flips each texel quaternion in `rot` to have a non-negative dot product
/// with the matching quaternion in `reference`.
pub(crate) fn align_quaternions(rot: &mut DVector<f64>, reference: &DVector<f64>) {
    for i in 0..rot.len() / 4 {
        let dot = rot.fixed_rows::<4>(4 * i).dot(&reference.fixed_rows::<4>(4 * i));
        if dot < 0.0 {
            rot.fixed_rows_mut::<4>(4 * i).neg_mut();
        }
    }
}
