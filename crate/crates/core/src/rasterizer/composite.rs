use rayon::prelude::*;

use super::project::{project_backward, project_gaussians, Grad2d, Projected, Splat};
use super::{Camera, RasterGrads, RasterSettings};
use crate::error::{Error, Result};
use crate::gaussian_cloud::GaussianCloud;
use crate::math::Vec3;

/// State kept from the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct RenderCache {
    pub projected: Projected,
    pub settings: RasterSettings,
    tiles_x: usize,
    tiles_y: usize,
    /// Gaussian indices, grouped by tile and sorted front to back.
    tile_lists: Vec<u32>,
    tile_ranges: Vec<(usize, usize)>,
    final_t: Vec<f64>,
    /// Number of list entries each pixel walked through.
    n_walked: Vec<u32>,
}

impl RenderCache {
    /// Total (tile, gaussian) pairs after binning.
    pub fn pair_count(&self) -> usize {
        self.tile_lists.len()
    }
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    /// Row-major, interleaved RGB.
    pub rgb: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Expected depth `Σ z_i w_i / max(alpha, ε)`; zero where nothing was hit.
    pub depth: Vec<f64>,
    pub cache: RenderCache,
}

const DEPTH_EPS: f64 = 1e-10;

/// `(alpha, g, dx, dy)` of a splat at a pixel center, or `None` when the
/// fragment is below `alpha_min`.
#[inline]
fn fragment_alpha(s: &Splat, px: f64, py: f64, st: &RasterSettings) -> Option<(f64, f64, f64, f64)> {
    let dx = s.mean[0] - px;
    let dy = s.mean[1] - py;
    let [a, b, c] = s.conic;
    let m = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
    if m > s.m_cut {
        return None;
    }
    let g = (-0.5 * m).exp();
    let alpha = (s.opacity * g).min(st.alpha_cap);
    (alpha >= st.alpha_min).then_some((alpha, g, dx, dy))
}

/// Inclusive pixel range whose centers lie within `radius` of `mean`.
fn pixel_span(mean: f64, radius: f64, size: usize) -> Option<(usize, usize)> {
    let lo = (mean - radius - 0.5).ceil().max(0.0);
    let hi = (mean + radius - 0.5).floor().min(size as f64 - 1.0);
    (lo <= hi).then_some((lo as usize, hi as usize))
}

fn bin_tiles(
    p: &Projected,
    width: usize,
    height: usize,
    ts: usize,
) -> (usize, usize, Vec<u32>, Vec<(usize, usize)>) {
    let tiles_x = width.div_ceil(ts);
    let tiles_y = height.div_ceil(ts);
    let mut keys: Vec<(u32, f64, u32)> = Vec::new();
    for (i, s) in p.splats.iter().enumerate() {
        if !s.visible {
            continue;
        }
        let (Some((x0, x1)), Some((y0, y1))) = (
            pixel_span(s.mean[0], s.radius, width),
            pixel_span(s.mean[1], s.radius, height),
        ) else {
            continue;
        };
        for ty in y0 / ts..=y1 / ts {
            for tx in x0 / ts..=x1 / ts {
                keys.push(((ty * tiles_x + tx) as u32, s.depth, i as u32));
            }
        }
    }
    keys.par_sort_unstable_by(|a, b| {
        a.0.cmp(&b.0)
            .then(a.1.total_cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut ranges = vec![(0usize, 0usize); tiles_x * tiles_y];
    let mut start = 0;
    while start < keys.len() {
        let t = keys[start].0;
        let mut end = start;
        while end < keys.len() && keys[end].0 == t {
            end += 1;
        }
        ranges[t as usize] = (start, end);
        start = end;
    }
    let lists = keys.into_iter().map(|k| k.2).collect();
    (tiles_x, tiles_y, lists, ranges)
}

fn tile_pixels(t: usize, tiles_x: usize, ts: usize, width: usize, height: usize) -> (usize, usize, usize, usize) {
    let (tx, ty) = (t % tiles_x, t / tiles_x);
    let x0 = tx * ts;
    let y0 = ty * ts;
    (x0, y0, (x0 + ts).min(width), (y0 + ts).min(height))
}

/// Renders the cloud; `directions[i]` is the unit vector used for SH lookup.
pub fn rasterize_forward(
    cloud: &GaussianCloud,
    camera: &Camera,
    directions: &[Vec3],
    settings: &RasterSettings,
) -> Result<RenderOutput> {
    camera.validate()?;
    if settings.tile_size == 0 {
        return Err(Error::Config("tile_size must be positive".into()));
    }
    let projected = project_gaussians(cloud, camera, directions, settings)?;
    let (width, height, ts) = (camera.width, camera.height, settings.tile_size);
    let (tiles_x, tiles_y, tile_lists, tile_ranges) = bin_tiles(&projected, width, height, ts);

    struct TileOut {
        px: Vec<(usize, [f64; 3], f64, f64, f64, u32)>,
    }
    let tiles: Vec<TileOut> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|t| {
            let (x0, y0, x1, y1) = tile_pixels(t, tiles_x, ts, width, height);
            let list = &tile_lists[tile_ranges[t].0..tile_ranges[t].1];
            let mut px = Vec::with_capacity((x1 - x0) * (y1 - y0));
            for y in y0..y1 {
                for x in x0..x1 {
                    let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                    let mut t_acc = 1.0;
                    let mut c = [0.0; 3];
                    let mut d = 0.0;
                    let mut walked = 0u32;
                    for (j, &gi) in list.iter().enumerate() {
                        let s = &projected.splats[gi as usize];
                        let Some((alpha, ..)) = fragment_alpha(s, fx, fy, settings) else {
                            continue;
                        };
                        let w = alpha * t_acc;
                        for k in 0..3 {
                            c[k] += s.color[k] * w;
                        }
                        d += s.depth * w;
                        t_acc *= 1.0 - alpha;
                        walked = j as u32 + 1;
                        if t_acc < settings.min_transmittance {
                            break;
                        }
                    }
                    px.push((y * width + x, c, d, t_acc, 1.0 - t_acc, walked));
                }
            }
            TileOut { px }
        })
        .collect();

    let n = width * height;
    let mut rgb = vec![0.0; n * 3];
    let mut alpha = vec![0.0; n];
    let mut depth = vec![0.0; n];
    let mut final_t = vec![1.0; n];
    let mut n_walked = vec![0u32; n];
    for tile in tiles {
        for (i, c, d, t, a, w) in tile.px {
            for k in 0..3 {
                rgb[i * 3 + k] = c[k] + t * settings.background[k];
            }
            alpha[i] = a;
            depth[i] = d / a.max(DEPTH_EPS);
            final_t[i] = t;
            n_walked[i] = w;
        }
    }
    Ok(RenderOutput {
        width,
        height,
        rgb,
        alpha,
        depth,
        cache: RenderCache {
            projected,
            settings: settings.clone(),
            tiles_x,
            tiles_y,
            tile_lists,
            tile_ranges,
            final_t,
            n_walked,
        },
    })
}

/// Gradients of a loss given `d_rgb` (and optionally `d_alpha`) on the output.
pub fn rasterize_backward(
    cloud: &GaussianCloud,
    camera: &Camera,
    directions: &[Vec3],
    out: &RenderOutput,
    d_rgb: &[f64],
    d_alpha: Option<&[f64]>,
) -> Result<RasterGrads> {
    let n_px = out.width * out.height;
    if d_rgb.len() != n_px * 3 {
        return Err(Error::Dimension(format!(
            "d_rgb has {} values, expected {}",
            d_rgb.len(),
            n_px * 3
        )));
    }
    if let Some(da) = d_alpha {
        if da.len() != n_px {
            return Err(Error::Dimension(format!("d_alpha has {} values, expected {n_px}", da.len())));
        }
    }
    if directions.len() != cloud.len() || out.cache.projected.len() != cloud.len() {
        return Err(Error::Dimension("cloud changed between forward and backward".into()));
    }
    let cache = &out.cache;
    let st = &cache.settings;
    let ts = st.tile_size;
    let bg = st.background;
    let splats = &cache.projected.splats;

    let per_tile: Vec<Vec<Grad2d>> = (0..cache.tiles_x * cache.tiles_y)
        .into_par_iter()
        .map(|t| {
            let (x0, y0, x1, y1) = tile_pixels(t, cache.tiles_x, ts, out.width, out.height);
            let (r0, r1) = cache.tile_ranges[t];
            let list = &cache.tile_lists[r0..r1];
            let mut grads = vec![Grad2d::default(); list.len()];
            for y in y0..y1 {
                for x in x0..x1 {
                    let pix = y * out.width + x;
                    let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                    let dc = [d_rgb[pix * 3], d_rgb[pix * 3 + 1], d_rgb[pix * 3 + 2]];
                    let da = d_alpha.map_or(0.0, |a| a[pix]);
                    let t_final = cache.final_t[pix];
                    let mut t_acc = t_final;
                    let mut acc = bg;
                    for j in (0..cache.n_walked[pix] as usize).rev() {
                        let s = &splats[list[j] as usize];
                        let Some((alpha, g, dx, dy)) = fragment_alpha(s, fx, fy, st) else {
                            continue;
                        };
                        t_acc /= 1.0 - alpha;
                        let w = alpha * t_acc;
                        let gr = &mut grads[j];
                        let mut d_alpha_i = 0.0;
                        for k in 0..3 {
                            gr.color[k] += w * dc[k];
                            d_alpha_i += (s.color[k] - acc[k]) * dc[k];
                            acc[k] = s.color[k] * alpha + (1.0 - alpha) * acc[k];
                        }
                        d_alpha_i *= t_acc;
                        d_alpha_i += da * t_final / (1.0 - alpha);
                        if s.opacity * g >= st.alpha_cap {
                            continue;
                        }
                        gr.opacity += d_alpha_i * g;
                        let dm = -0.5 * s.opacity * g * d_alpha_i;
                        let [ca, cb, cc] = s.conic;
                        gr.conic[0] += dm * dx * dx;
                        gr.conic[1] += dm * 2.0 * dx * dy;
                        gr.conic[2] += dm * dy * dy;
                        gr.mean[0] += dm * 2.0 * (ca * dx + cb * dy);
                        gr.mean[1] += dm * 2.0 * (cb * dx + cc * dy);
                    }
                }
            }
            grads
        })
        .collect();

    let n = cloud.len();
    let mut g2d = vec![Grad2d::default(); n];
    for (t, grads) in per_tile.iter().enumerate() {
        let (r0, _) = cache.tile_ranges[t];
        for (j, g) in grads.iter().enumerate() {
            g2d[cache.tile_lists[r0 + j] as usize].add(g);
        }
    }

    let stride = cloud.sh_stride();
    let mut grads = RasterGrads::zeros(n, stride);
    let results: Vec<_> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut sh = vec![0.0; stride];
            if !splats[i].visible || g2d[i] == Grad2d::default() {
                return None;
            }
            let g3 = project_backward(cloud, i, camera, &directions[i], &splats[i], &g2d[i], &mut sh);
            Some((g3, sh))
        })
        .collect();
    for (i, r) in results.into_iter().enumerate() {
        let Some((g3, sh)) = r else { continue };
        grads.centers[i] = g3.center;
        grads.rotations[i] = g3.rotation;
        grads.log_scales[i] = g3.log_scale;
        grads.opacity_logits[i] = g3.opacity_logit;
        grads.directions[i] = g3.direction;
        grads.sh[i * stride..(i + 1) * stride].copy_from_slice(&sh);
        grads.means2d[i] = g2d[i].mean;
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_span_respects_centers() {
        assert_eq!(pixel_span(10.0, 1.0, 100), Some((9, 10)));
        assert_eq!(pixel_span(-5.0, 1.0, 100), None);
        assert_eq!(pixel_span(99.9, 3.0, 100), Some((97, 99)));
    }
}
