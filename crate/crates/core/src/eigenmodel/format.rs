//! GEM1 binary format, little-endian:
//!
//! ```text
//! "GEM1" | u32 version=1 | u32 texWidth | u32 texHeight | u32 T
//! mask: ceil(W*H/8) bytes, row-major, LSB-first
//! per modality (position, rotation, scale, opacity):
//!     u32 dim | u32 M | f32 mean[dim*T] | f32 stddev[M] | f32 basis[M][dim*T]
//! f32 color[T][3]
//! ```

use std::path::Path;

use nalgebra::{DMatrix, DVector, Vector3};

use super::{EigenBasis, GemModel, Modality, TexelLayout};
use crate::binio::{put_f32s, put_u32, Reader};
use crate::error::{malformed, Result};

pub const GEM_MAGIC: &[u8; 4] = b"GEM1";
pub const GEM_VERSION: u32 = 1;

/// Bytes taken by the basis matrices alone.
pub fn basis_payload_bytes(texels: usize, components: [usize; 4]) -> usize {
    Modality::ALL
        .iter()
        .zip(components)
        .map(|(m, c)| c * m.dim() * texels * 4)
        .sum()
}

/// Exact encoded size of a model.
pub fn serialized_size(tex_width: usize, tex_height: usize, texels: usize, components: [usize; 4]) -> usize {
    let header = 4 + 4 * 4;
    let mask = (tex_width * tex_height).div_ceil(8);
    let per_modality: usize = Modality::ALL
        .iter()
        .zip(components)
        .map(|(m, c)| 8 + m.dim() * texels * 4 + c * 4)
        .sum();
    header + mask + per_modality + basis_payload_bytes(texels, components) + 3 * texels * 4
}

impl GemModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let layout = self.layout();
        let t = self.texel_count();
        let mut out = Vec::with_capacity(serialized_size(
            layout.tex_width,
            layout.tex_height,
            t,
            self.component_counts(),
        ));
        out.extend_from_slice(GEM_MAGIC);
        put_u32(&mut out, GEM_VERSION);
        put_u32(&mut out, layout.tex_width as u32);
        put_u32(&mut out, layout.tex_height as u32);
        put_u32(&mut out, t as u32);
        let mut mask = vec![0u8; (layout.tex_width * layout.tex_height).div_ceil(8)];
        for &i in &layout.active {
            mask[i / 8] |= 1 << (i % 8);
        }
        out.extend_from_slice(&mask);
        for b in self.bases() {
            put_u32(&mut out, b.modality.dim() as u32);
            put_u32(&mut out, b.component_count() as u32);
            put_f32s(&mut out, b.mean.iter());
            put_f32s(&mut out, b.stddev.iter());
            // Column-major storage: each column is one row of the on-disk matrix.
            put_f32s(&mut out, b.basis.iter());
        }
        for c in self.colors() {
            put_f32s(&mut out, c.iter());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(GEM_MAGIC)?;
        r.version(GEM_VERSION)?;
        let w = r.u32()? as usize;
        let h = r.u32()? as usize;
        let t = r.u32()? as usize;
        let cells = w.checked_mul(h).ok_or_else(|| malformed("GEM header", "texture size overflows"))?;
        let mask_bytes = r.take(cells.div_ceil(8))?;
        let mask: Vec<bool> = (0..cells).map(|i| mask_bytes[i / 8] >> (i % 8) & 1 == 1).collect();
        let layout = TexelLayout::from_mask(w, h, &mask)?;
        if layout.texel_count() != t {
            return Err(malformed(
                "GEM mask",
                format!("{} active texels but header says {t}", layout.texel_count()),
            ));
        }
        let mut bases = Vec::with_capacity(4);
        for m in Modality::ALL {
            let dim = r.u32()? as usize;
            if dim != m.dim() {
                return Err(malformed("GEM basis", format!("{m} has dim {dim}, expected {}", m.dim())));
            }
            let comps = r.u32()? as usize;
            let len = dim * t;
            let mean = DVector::from_vec(r.f32s(len)?);
            let stddev = DVector::from_vec(r.f32s(comps)?);
            let data = r.f32s(comps.checked_mul(len).ok_or_else(|| malformed("GEM basis", "size overflows"))?)?;
            let basis = DMatrix::from_vec(len, comps, data);
            bases.push(EigenBasis::new(m, mean, basis, stddev)?);
        }
        let color_data = r.f32s(3 * t)?;
        r.finish()?;
        let colors = color_data.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect();
        let bases: [EigenBasis; 4] = bases.try_into().expect("four modalities");
        GemModel::new(layout, bases, colors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
