use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;

use super::{pixel_center, splat_power, RenderConfig, RenderStats, SortedSplatList, Splat, SplatGeometry};
use crate::camera::Camera;
use crate::error::{invalid, Result};
use crate::gaussian::{conic, covariance3d, project_covariance, sigmoid, GaussianCloud, Projection};
use crate::image::ImageBuffer;

enum Prepared {
    Visible(Splat, SplatGeometry),
    Culled,
    Singular,
}

fn prepare(cloud: &GaussianCloud, i: usize, cam: &Camera, cfg: &RenderConfig) -> Prepared {
    let q = cloud.rotations()[i];
    let s = cloud.log_scales()[i];
    let Ok(cov3) = covariance3d(&q, &s) else {
        return Prepared::Singular;
    };
    let proj = match project_covariance(&cov3, &cloud.positions()[i], cam, &cfg.projection) {
        Projection::Visible(p) => p,
        Projection::Culled => return Prepared::Culled,
    };
    let Some(conic) = conic(&proj.cov) else {
        return Prepared::Singular;
    };
    if !proj.center.iter().all(|v| v.is_finite()) || !conic.iter().all(|v| v.is_finite()) {
        return Prepared::Singular;
    }
    let norm = q.norm();
    let unit = q / norm;
    let logit = cloud.opacity_logits()[i];
    Prepared::Visible(
        Splat {
            center: proj.center,
            conic,
            opacity: sigmoid(logit),
            color: cloud.colors()[i],
            depth: proj.depth,
        },
        SplatGeometry {
            cam_point: proj.cam_point,
            jacobian: proj.jacobian,
            cov3: *cov3.matrix(),
            rotation: crate::gaussian::unit_quat_to_rotation(&unit),
            unit_quat: unit,
            quat_norm: norm,
            scale_sq: s.map(|v| (2.0 * v).exp()),
            opacity_logit: logit,
        },
    )
}

/// Inclusive pixel range `[lo, hi]` whose centers fall within `half` of `c`,
/// clipped to `[0, n)`.
fn pixel_span(c: f64, half: f64, n: usize) -> Option<(usize, usize)> {
    let lo = (c - half - 0.5).ceil();
    let hi = (c + half - 0.5).floor();
    if !(lo <= hi) || hi < 0.0 || lo > (n - 1) as f64 {
        return None;
    }
    Some((lo.max(0.0) as usize, hi.min((n - 1) as f64) as usize))
}

/// Renders `cloud` from `cam` over `background`.
///
/// Returns the image and the sorted splat state needed by
/// [`render_backward`](super::render_backward).
pub fn render_forward(
    cloud: &GaussianCloud,
    cam: &Camera,
    background: Vector3<f64>,
    cfg: &RenderConfig,
) -> Result<(ImageBuffer, SortedSplatList)> {
    if cfg.tile_size == 0 {
        return Err(invalid("tile size must be positive"));
    }
    if !background.iter().all(|v| v.is_finite()) {
        return Err(invalid("non-finite background"));
    }
    let n = cloud.len();
    let prepared: Vec<Prepared> = (0..n).into_par_iter().map(|i| prepare(cloud, i, cam, cfg)).collect();

    let mut stats = RenderStats::default();
    let mut splats = Vec::with_capacity(n);
    let mut geometry = Vec::with_capacity(n);
    for p in prepared {
        match p {
            Prepared::Visible(s, g) => {
                splats.push(Some(s));
                geometry.push(Some(g));
            }
            Prepared::Culled => {
                stats.culled += 1;
                splats.push(None);
                geometry.push(None);
            }
            Prepared::Singular => {
                stats.skipped_singular += 1;
                splats.push(None);
                geometry.push(None);
            }
        }
    }

    let mut order: Vec<u32> = (0..n as u32).filter(|&i| splats[i as usize].is_some()).collect();
    // Stable: equal depths keep index order.
    order.sort_by(|&a, &b| {
        let da = splats[a as usize].as_ref().map_or(0.0, |s| s.depth);
        let db = splats[b as usize].as_ref().map_or(0.0, |s| s.depth);
        da.total_cmp(&db)
    });

    let (w, h, ts) = (cam.width, cam.height, cfg.tile_size);
    let tiles_x = w.div_ceil(ts);
    let tiles_y = h.div_ceil(ts);
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for &g in &order {
        let s = splats[g as usize].as_ref().expect("ordered splats are visible");
        // Axis-aligned bounds of the extent ellipse: k sqrt(cov_xx) where
        // cov = conic^-1, so cov_xx = conic_yy / det(conic).
        let q = &s.conic;
        let det = q[(0, 0)] * q[(1, 1)] - q[(0, 1)] * q[(1, 0)];
        let k = cfg.extent_sigmas;
        let hx = k * (q[(1, 1)] / det).sqrt() * (1.0 + 1e-9) + 1e-9;
        let hy = k * (q[(0, 0)] / det).sqrt() * (1.0 + 1e-9) + 1e-9;
        let (Some((x0, x1)), Some((y0, y1))) = (pixel_span(s.center.x, hx, w), pixel_span(s.center.y, hy, h)) else {
            continue;
        };
        for ty in y0 / ts..=y1 / ts {
            for tx in x0 / ts..=x1 / ts {
                bins[ty * tiles_x + tx].push(g);
            }
        }
    }
    stats.max_splats_per_tile = bins.iter().map(Vec::len).max().unwrap_or(0);
    let mut tile_offsets = Vec::with_capacity(bins.len() + 1);
    tile_offsets.push(0);
    for b in &bins {
        tile_offsets.push(tile_offsets.last().unwrap() + b.len());
    }
    let tile_entries: Vec<u32> = bins.into_iter().flatten().collect();

    struct PixelOut {
        index: usize,
        accum: Vector3<f64>,
        transmittance: f64,
        visited: u32,
    }

    let per_tile: Vec<Vec<PixelOut>> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|tile| {
            let entries = &tile_entries[tile_offsets[tile]..tile_offsets[tile + 1]];
            let (tx, ty) = (tile % tiles_x, tile / tiles_x);
            let mut out = Vec::with_capacity(ts * ts);
            for y in ty * ts..((ty + 1) * ts).min(h) {
                for x in tx * ts..((tx + 1) * ts).min(w) {
                    let pixel = pixel_center(x, y);
                    let (accum, transmittance, visited) = composite(entries, &splats, &pixel, cfg);
                    out.push(PixelOut {
                        index: y * w + x,
                        accum,
                        transmittance,
                        visited,
                    });
                }
            }
            out
        })
        .collect();

    let mut image = ImageBuffer::filled(w, h, background);
    let mut accum = vec![0.0; w * h * 3];
    let mut final_transmittance = vec![1.0; w * h];
    let mut visited = vec![0u32; w * h];
    {
        let data = image.data_mut();
        for p in per_tile.into_iter().flatten() {
            let color = p.accum + background * p.transmittance;
            data[p.index * 3..p.index * 3 + 3].copy_from_slice(color.as_slice());
            accum[p.index * 3..p.index * 3 + 3].copy_from_slice(p.accum.as_slice());
            final_transmittance[p.index] = p.transmittance;
            visited[p.index] = p.visited;
        }
    }

    let list = SortedSplatList {
        camera: cam.clone(),
        config: *cfg,
        background,
        gaussian_count: n,
        splats,
        geometry,
        order,
        tiles_x,
        tiles_y,
        tile_offsets,
        tile_entries,
        accum,
        final_transmittance,
        visited,
        stats,
    };
    Ok((image, list))
}

/// Front-to-back compositing of one pixel. Returns the accumulated color
/// (background excluded), the final transmittance and the number of entries
/// up to and including the last one that contributed.
#[inline]
fn composite(
    entries: &[u32],
    splats: &[Option<Splat>],
    pixel: &Vector2<f64>,
    cfg: &RenderConfig,
) -> (Vector3<f64>, f64, u32) {
    let mut c = Vector3::zeros();
    let mut t = 1.0;
    let mut visited = 0;
    for (k, &g) in entries.iter().enumerate() {
        let s = splats[g as usize].as_ref().expect("binned splats are visible");
        let Some((_, power)) = splat_power(s, pixel, cfg.extent_sigmas) else {
            continue;
        };
        let alpha = (s.opacity * power.exp()).min(cfg.alpha_max);
        c += s.color * (alpha * t);
        t *= 1.0 - alpha;
        visited = k as u32 + 1;
        if t < cfg.transmittance_min {
            break;
        }
    }
    (c, t, visited)
}
