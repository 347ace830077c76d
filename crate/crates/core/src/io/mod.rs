//! File formats: PLY clouds, OBJ meshes, and the flat binary coefficient
//! and feature tables.
//!
//! ```text
//! coeffs.bin:   "GEMK" | u32 version=1 | u32 frames | u32 M[4] | f32 k[frames][sum M]
//! features.bin: u32 N | u32 dim | f32 f[N][dim]
//! ```

mod obj;
mod ply;

use std::path::Path;

use nalgebra::{DMatrix, DVector};

pub use obj::{decode_obj, encode_obj, load_obj, save_obj};
pub use ply::{decode_ply, encode_ply, load_ply, save_ply};

use crate::binio::{put_f32s, put_u32, Reader};
use crate::eigenmodel::CoefficientVector;
use crate::error::{invalid, malformed, Result};

pub const COEFFS_MAGIC: &[u8; 4] = b"GEMK";
pub const COEFFS_VERSION: u32 = 1;

/// Encodes per-frame coefficient vectors that share one block layout.
pub fn encode_coefficients(frames: &[CoefficientVector], counts: [usize; 4]) -> Result<Vec<u8>> {
    if let Some(i) = frames.iter().position(|k| k.counts() != counts) {
        return Err(invalid(format!(
            "frame {i} has blocks {:?}, expected {counts:?}",
            frames[i].counts()
        )));
    }
    let total: usize = counts.iter().sum();
    let mut out = Vec::with_capacity(28 + frames.len() * total * 4);
    out.extend_from_slice(COEFFS_MAGIC);
    put_u32(&mut out, COEFFS_VERSION);
    put_u32(&mut out, frames.len() as u32);
    for c in counts {
        put_u32(&mut out, c as u32);
    }
    for k in frames {
        put_f32s(&mut out, &k.to_flat());
    }
    Ok(out)
}

pub fn decode_coefficients(bytes: &[u8]) -> Result<(Vec<CoefficientVector>, [usize; 4])> {
    let mut r = Reader::new(bytes);
    r.magic(COEFFS_MAGIC)?;
    r.version(COEFFS_VERSION)?;
    let frames = r.u32()? as usize;
    let mut counts = [0usize; 4];
    for c in &mut counts {
        *c = r.u32()? as usize;
    }
    let total: usize = counts.iter().sum();
    let flat = r.f32s(
        frames
            .checked_mul(total)
            .ok_or_else(|| malformed("coefficients", "size overflow"))?,
    )?;
    r.finish()?;
    let ks = if total == 0 {
        vec![CoefficientVector::zeros(counts); frames]
    } else {
        flat.chunks_exact(total)
            .map(|c| CoefficientVector::from_flat(c, counts))
            .collect::<Result<_>>()?
    };
    Ok((ks, counts))
}

pub fn save_coefficients(frames: &[CoefficientVector], counts: [usize; 4], path: &Path) -> Result<()> {
    std::fs::write(path, encode_coefficients(frames, counts)?)?;
    Ok(())
}

pub fn load_coefficients(path: &Path) -> Result<(Vec<CoefficientVector>, [usize; 4])> {
    decode_coefficients(&std::fs::read(path)?)
}

/// Feature table, one row per sample.
pub fn encode_features(features: &DMatrix<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + features.len() * 4);
    put_u32(&mut out, features.nrows() as u32);
    put_u32(&mut out, features.ncols() as u32);
    for row in features.row_iter() {
        put_f32s(&mut out, row.iter());
    }
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<DMatrix<f64>> {
    let mut r = Reader::new(bytes);
    let n = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let data = r.f32s(n.checked_mul(dim).ok_or_else(|| malformed("features", "size overflow"))?)?;
    r.finish()?;
    Ok(DMatrix::from_row_slice(n, dim, &data))
}

pub fn save_features(features: &DMatrix<f64>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_features(features))?;
    Ok(())
}

pub fn load_features(path: &Path) -> Result<DMatrix<f64>> {
    decode_features(&std::fs::read(path)?)
}

/// Row `i` of a feature table.
pub fn feature_row(features: &DMatrix<f64>, i: usize) -> DVector<f64> {
    features.row(i).transpose()
}
