//! Tile-based software splatting.
//!
//! The forward pass projects every Gaussian, sorts the visible ones by
//! camera-space depth (ties broken by index), bins them into 16x16 tiles by
//! their 3-sigma extent and composites each pixel front to back. The
//! backward pass walks the same per-pixel lists again and chains the pixel
//! gradient through compositing, the 2D Gaussian, the projection, the 3D
//! covariance and the activations.
//!
//! Both passes are parallel over tiles. Every pixel is owned by exactly one
//! tile and the backward pass merges per-tile gradient buffers in tile order,
//! so results do not depend on the thread count.

mod backward;
mod forward;

pub use backward::{render_backward, RenderGradients};
pub use forward::render_forward;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::gaussian::ProjectionParams;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct RenderConfig {
    pub tile_size: usize,
    pub projection: ProjectionParams,
    /// Upper clamp on per-splat alpha.
    pub alpha_max: f64,
    /// Compositing stops once transmittance falls below this.
    pub transmittance_min: f64,
    /// Splats only reach pixels within this many standard deviations
    /// (Mahalanobis distance).
    pub extent_sigmas: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            tile_size: 16,
            projection: ProjectionParams::default(),
            alpha_max: 0.999,
            transmittance_min: 1e-4,
            extent_sigmas: 3.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RenderStats {
    /// Gaussians at or in front of the near plane.
    pub culled: usize,
    /// Gaussians whose projected covariance was singular or non-finite.
    pub skipped_singular: usize,
    pub max_splats_per_tile: usize,
}

/// A projected, visible Gaussian.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Splat {
    pub center: Vector2<f64>,
    pub conic: Matrix2<f64>,
    pub opacity: f64,
    pub color: Vector3<f64>,
    pub depth: f64,
}

/// Quantities the backward pass needs to chain 2D gradients back to the
/// stored Gaussian parameters.
#[derive(Clone, Copy, Debug)]
pub(crate) struct SplatGeometry {
    pub cam_point: Vector3<f64>,
    pub jacobian: Matrix2x3<f64>,
    pub cov3: Matrix3<f64>,
    pub rotation: Matrix3<f64>,
    pub unit_quat: Vector4<f64>,
    pub quat_norm: f64,
    pub scale_sq: Vector3<f64>,
    pub opacity_logit: f64,
}

/// Depth-sorted, tile-binned splats plus the per-pixel state the backward
/// pass needs. Produced by [`render_forward`].
#[derive(Clone, Debug)]
pub struct SortedSplatList {
    pub(crate) camera: Camera,
    pub(crate) config: RenderConfig,
    pub(crate) background: Vector3<f64>,
    pub(crate) gaussian_count: usize,
    pub(crate) splats: Vec<Option<Splat>>,
    pub(crate) geometry: Vec<Option<SplatGeometry>>,
    /// Visible Gaussian indices, front to back.
    pub(crate) order: Vec<u32>,
    pub(crate) tiles_x: usize,
    pub(crate) tiles_y: usize,
    /// Tile `t` owns `tile_entries[tile_offsets[t]..tile_offsets[t + 1]]`.
    pub(crate) tile_offsets: Vec<usize>,
    pub(crate) tile_entries: Vec<u32>,
    /// Per pixel: composited color without the background term.
    pub(crate) accum: Vec<f64>,
    pub(crate) final_transmittance: Vec<f64>,
    /// Per pixel: number of tile entries visited before compositing stopped.
    pub(crate) visited: Vec<u32>,
    pub(crate) stats: RenderStats,
}

impl SortedSplatList {
    pub fn stats(&self) -> RenderStats {
        self.stats
    }

    pub fn camera(&self) -> &Camera {
        &self.camera
    }

    pub fn gaussian_count(&self) -> usize {
        self.gaussian_count
    }

    /// Visible Gaussian indices in compositing order.
    pub fn depth_order(&self) -> &[u32] {
        &self.order
    }

    /// Remaining transmittance at pixel `(x, y)` after compositing.
    pub fn final_transmittance(&self, x: usize, y: usize) -> f64 {
        self.final_transmittance[y * self.camera.width + x]
    }

    /// Per-pixel compositing weights `alpha_i T_i` in front-to-back order.
    pub fn pixel_weights(&self, x: usize, y: usize) -> Vec<(u32, f64)> {
        let entries = self.pixel_entries(x, y);
        let pixel = pixel_center(x, y);
        let mut out = Vec::new();
        let mut t = 1.0;
        for &g in entries {
            let Some(alpha) = self.alpha_at(g, &pixel) else { continue };
            out.push((g, alpha * t));
            t *= 1.0 - alpha;
        }
        out
    }

    /// The tile entries a pixel visited during compositing.
    pub(crate) fn pixel_entries(&self, x: usize, y: usize) -> &[u32] {
        let ts = self.config.tile_size;
        let tile = (y / ts) * self.tiles_x + x / ts;
        let start = self.tile_offsets[tile];
        let n = self.visited[y * self.camera.width + x] as usize;
        &self.tile_entries[start..start + n]
    }

    /// Clamped alpha of Gaussian `g` at `pixel`, `None` outside its extent.
    pub(crate) fn alpha_at(&self, g: u32, pixel: &Vector2<f64>) -> Option<f64> {
        let s = self.splats[g as usize].as_ref()?;
        let (_, power) = splat_power(s, pixel, self.config.extent_sigmas)?;
        Some((s.opacity * power.exp()).min(self.config.alpha_max))
    }
}

pub(crate) fn pixel_center(x: usize, y: usize) -> Vector2<f64> {
    Vector2::new(x as f64 + 0.5, y as f64 + 0.5)
}

/// Offset from the splat center and `-1/2 d^T Q d`, or `None` when the pixel
/// lies beyond the splat's extent.
#[inline]
pub(crate) fn splat_power(s: &Splat, pixel: &Vector2<f64>, extent_sigmas: f64) -> Option<(Vector2<f64>, f64)> {
    let d = pixel - s.center;
    let q = &s.conic;
    let m2 = q[(0, 0)] * d.x * d.x + 2.0 * q[(0, 1)] * d.x * d.y + q[(1, 1)] * d.y * d.y;
    if m2 > extent_sigmas * extent_sigmas {
        None
    } else {
        Some((d, -0.5 * m2))
    }
}
