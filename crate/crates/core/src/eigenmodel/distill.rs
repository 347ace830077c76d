use nalgebra::{DMatrix, DVector, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{align_quaternions, cloud_attributes, EigenBasis, GemModel, Modality, TexelLayout};
use crate::error::{invalid, GemError, Result};
use crate::gaussian::GaussianCloud;
use crate::linalg::{complete_basis, pca_fit_columns};

/// Where the static texel colors come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum ColorSource {
    /// Per-texel average over all frames.
    #[default]
    Average,
    Frame(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ModalityReport {
    pub modality: Modality,
    pub requested: usize,
    /// Components backed by data; the rest are zero-variance padding.
    pub fitted: usize,
    pub rank_truncated: bool,
    pub stddev: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DistillReport {
    pub frames: usize,
    pub texels: usize,
    pub modalities: Vec<ModalityReport>,
}

/// Builds a model from a sequence of clouds that share `layout`.
///
/// Each modality gets up to `components[m]` components from PCA. When the
/// data has fewer usable directions (few frames, or low rank) the basis is
/// padded to the requested size with an orthonormal completion whose
/// standard deviations are zero, so the model always has the requested
/// shape.
pub fn distill(
    sequence: &[GaussianCloud],
    layout: &TexelLayout,
    components: [usize; 4],
    color_source: ColorSource,
) -> Result<(GemModel, DistillReport)> {
    layout.validate()?;
    let t = layout.texel_count();
    let n = sequence.len();
    if n == 0 {
        return Err(invalid("cannot distill an empty sequence"));
    }
    if let Some((i, c)) = sequence.iter().enumerate().find(|(_, c)| c.len() != t) {
        return Err(GemError::SizeMismatch {
            expected: format!("{t} Gaussians per frame"),
            found: format!("{} in frame {i}", c.len()),
        });
    }
    for m in Modality::ALL {
        if components[m.index()] > m.dim() * t {
            return Err(invalid(format!(
                "{} {m} components requested but the modality has dimension {}",
                components[m.index()],
                m.dim() * t
            )));
        }
    }

    let attrs: Vec<[DVector<f64>; 4]> = sequence.par_iter().map(cloud_attributes).collect();
    let fits: Vec<Result<(EigenBasis, ModalityReport)>> = Modality::ALL
        .par_iter()
        .map(|&m| {
            let d = m.dim() * t;
            let mut data = DMatrix::zeros(d, n);
            for (j, a) in attrs.iter().enumerate() {
                data.set_column(j, &a[m.index()]);
            }
            if m == Modality::Rotation {
                let reference = data.column(0).into_owned();
                for j in 0..n {
                    let mut col = data.column(j).into_owned();
                    align_quaternions(&mut col, &reference);
                    data.set_column(j, &col);
                }
            }
            fit_modality(m, data, components[m.index()])
        })
        .collect();

    let mut bases = Vec::with_capacity(4);
    let mut reports = Vec::with_capacity(4);
    for f in fits {
        let (b, r) = f?;
        bases.push(b);
        reports.push(r);
    }

    let colors = match color_source {
        ColorSource::Average => (0..t)
            .map(|i| {
                let sum: Vector3<f64> = sequence.iter().map(|c| c.colors()[i]).sum();
                (sum / n as f64).map(|v| v.clamp(0.0, 1.0))
            })
            .collect(),
        ColorSource::Frame(f) => sequence
            .get(f)
            .ok_or_else(|| invalid(format!("color frame {f} out of range ({n} frames)")))?
            .colors()
            .to_vec(),
    };

    let model = GemModel::new(layout.clone(), bases.try_into().expect("four modalities"), colors)?;
    Ok((
        model,
        DistillReport {
            frames: n,
            texels: t,
            modalities: reports,
        },
    ))
}

fn fit_modality(m: Modality, data: DMatrix<f64>, requested: usize) -> Result<(EigenBasis, ModalityReport)> {
    let (d, n) = data.shape();
    let (mean, fitted_basis, fitted_sd, truncated) = if n >= 2 {
        let usable = requested.min(n - 1).min(d);
        let fit = pca_fit_columns(data, usable)?;
        (fit.mean, fit.basis, fit.stddev, fit.rank_truncated || usable < requested)
    } else {
        (data.column(0).into_owned(), DMatrix::zeros(d, 0), DVector::zeros(0), requested > 0)
    };
    let fitted = fitted_basis.ncols();
    let basis = complete_basis(&fitted_basis, requested);
    let mut stddev = DVector::zeros(requested);
    stddev.rows_mut(0, fitted).copy_from(&fitted_sd);
    let report = ModalityReport {
        modality: m,
        requested,
        fitted,
        rank_truncated: truncated,
        stddev: stddev.iter().copied().collect(),
    };
    Ok((EigenBasis::new(m, mean, basis, stddev)?, report))
}
