//! Photometric losses with analytic gradients, and image metrics.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const PSNR_CAP: f64 = 100.0;

/// Row-major interleaved image with values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Dimension(format!(
                "{} values for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn filled(width: usize, height: usize, channels: usize, v: f64) -> Self {
        Self { width, height, channels, data: vec![v; width * height * channels] }
    }

    pub fn load_rgb_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Ok(Self {
            width: w as usize,
            height: h as usize,
            channels: 3,
            data: img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        })
    }

    pub fn load_mask_png(path: &Path) -> Result<Vec<bool>> {
        let img = image::open(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
            .to_luma8();
        Ok(img.into_raw().into_iter().map(|v| v >= 128).collect())
    }

    fn plane(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(self.channels).copied().collect()
    }

    fn same_shape(&self, other: &Image) -> Result<()> {
        if (self.width, self.height, self.channels) != (other.width, other.height, other.channels) {
            return Err(Error::Dimension(format!(
                "image shapes differ: {}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )));
        }
        Ok(())
    }
}

/// Mean absolute error and its subgradient (`sign(0) = 0`).
pub fn loss_l1(pred: &Image, gt: &Image) -> Result<(f64, Vec<f64>)> {
    pred.same_shape(gt)?;
    let n = pred.data.len() as f64;
    let mut sum = 0.0;
    let grad = pred
        .data
        .iter()
        .zip(&gt.data)
        .map(|(&p, &g)| {
            let d = p - g;
            sum += d.abs();
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok((sum / n, grad))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut g = [0.0; SSIM_WINDOW];
    for (i, v) in g.iter_mut().enumerate() {
        let x = i as f64 - half;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Separable valid correlation: `h × w` → `(h−10) × (w−10)`.
fn filter_valid(x: &[f64], w: usize, h: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let k = SSIM_WINDOW;
    let (ow, oh) = (w + 1 - k, h + 1 - k);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for ox in 0..ow {
            tmp[y * ow + ox] = (0..k).map(|i| g[i] * x[y * w + ox + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = (0..k).map(|i| g[i] * tmp[(oy + i) * ow + ox]).sum();
        }
    }
    out
}

/// Adjoint of `filter_valid`.
fn filter_valid_t(y: &[f64], w: usize, h: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let k = SSIM_WINDOW;
    let (ow, oh) = (w + 1 - k, h + 1 - k);
    let mut tmp = vec![0.0; ow * h];
    for oy in 0..oh {
        for i in 0..k {
            for ox in 0..ow {
                tmp[(oy + i) * ow + ox] += g[i] * y[oy * ow + ox];
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for yy in 0..h {
        for ox in 0..ow {
            let v = tmp[yy * ow + ox];
            for i in 0..k {
                out[yy * w + ox + i] += g[i] * v;
            }
        }
    }
    out
}

struct SsimPlane {
    mean: f64,
    grad: Option<Vec<f64>>,
}

fn ssim_plane(x: &[f64], y: &[f64], w: usize, h: usize, with_grad: bool) -> SsimPlane {
    let g = gaussian_window();
    let mul = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mx = filter_valid(x, w, h, &g);
    let my = filter_valid(y, w, h, &g);
    let exx = filter_valid(&mul(x, x), w, h, &g);
    let eyy = filter_valid(&mul(y, y), w, h, &g);
    let exy = filter_valid(&mul(x, y), w, h, &g);
    let m = mx.len();
    let mut total = 0.0;
    let (mut gm, mut gxx, mut gxy) = if with_grad {
        (vec![0.0; m], vec![0.0; m], vec![0.0; m])
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };
    for p in 0..m {
        let (ux, uy) = (mx[p], my[p]);
        let a1 = 2.0 * ux * uy + SSIM_C1;
        let a2 = 2.0 * (exy[p] - ux * uy) + SSIM_C2;
        let b1 = ux * ux + uy * uy + SSIM_C1;
        let b2 = (exx[p] - ux * ux) + (eyy[p] - uy * uy) + SSIM_C2;
        let s = a1 * a2 / (b1 * b2);
        total += s;
        if with_grad {
            gm[p] = s * (2.0 * uy / a1 - 2.0 * uy / a2 - 2.0 * ux / b1 + 2.0 * ux / b2);
            gxy[p] = s * 2.0 / a2;
            gxx[p] = -s / b2;
        }
    }
    let mean = total / m as f64;
    let grad = with_grad.then(|| {
        let scale = 1.0 / m as f64;
        let tm = filter_valid_t(&gm, w, h, &g);
        let txy = filter_valid_t(&gxy, w, h, &g);
        let txx = filter_valid_t(&gxx, w, h, &g);
        (0..w * h)
            .map(|q| scale * (tm[q] + y[q] * txy[q] + 2.0 * x[q] * txx[q]))
            .collect()
    });
    SsimPlane { mean, grad }
}

fn ssim_impl(pred: &Image, gt: &Image, with_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    pred.same_shape(gt)?;
    if pred.width < SSIM_WINDOW || pred.height < SSIM_WINDOW {
        return Err(Error::Dimension(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}x{}",
            pred.width, pred.height
        )));
    }
    let ch = pred.channels;
    let planes: Vec<SsimPlane> = (0..ch)
        .into_par_iter()
        .map(|c| ssim_plane(&pred.plane(c), &gt.plane(c), pred.width, pred.height, with_grad))
        .collect();
    let mean = planes.iter().map(|p| p.mean).sum::<f64>() / ch as f64;
    let grad = with_grad.then(|| {
        let mut out = vec![0.0; pred.data.len()];
        for (c, p) in planes.iter().enumerate() {
            for (q, v) in p.grad.as_ref().unwrap().iter().enumerate() {
                out[q * ch + c] = v / ch as f64;
            }
        }
        out
    });
    Ok((mean, grad))
}

/// Mean SSIM over all valid window positions and channels.
pub fn metric_ssim(pred: &Image, gt: &Image) -> Result<f64> {
    Ok(ssim_impl(pred, gt, false)?.0)
}

/// `1 − SSIM` and its gradient w.r.t. `pred`.
pub fn loss_ssim(pred: &Image, gt: &Image) -> Result<(f64, Vec<f64>)> {
    let (s, g) = ssim_impl(pred, gt, true)?;
    Ok((1.0 - s, g.unwrap().into_iter().map(|v| -v).collect()))
}

/// `10 log10(1 / MSE)`, or `cap` for identical images.
pub fn metric_psnr(pred: &Image, gt: &Image, cap: f64) -> Result<f64> {
    pred.same_shape(gt)?;
    let mse = pred.data.iter().zip(&gt.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        / pred.data.len() as f64;
    if mse <= 0.0 {
        return Ok(cap);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(cap))
}

/// External perceptual term (for example a learned image similarity).
pub trait PerceptualLoss: Send + Sync {
    /// Value and gradient w.r.t. `pred`.
    fn evaluate(&self, pred: &Image, gt: &Image) -> Result<(f64, Vec<f64>)>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub l1: f64,
    pub ssim: f64,
    pub lpips: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { l1: 0.6, ssim: 0.4, lpips: 0.4 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("l1", self.l1), ("ssim", self.ssim), ("lpips", self.lpips)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub l1: f64,
    pub ssim: f64,
    pub perceptual: f64,
    pub grad: Vec<f64>,
}

/// Weighted sum of L1, SSIM and the optional perceptual term.
pub fn total_loss(
    pred: &Image,
    gt: &Image,
    weights: &LossWeights,
    perceptual: Option<&dyn PerceptualLoss>,
) -> Result<LossReport> {
    let (l1, g1) = loss_l1(pred, gt)?;
    let (ls, gs) = loss_ssim(pred, gt)?;
    let mut grad: Vec<f64> = g1
        .iter()
        .zip(&gs)
        .map(|(a, b)| weights.l1 * a + weights.ssim * b)
        .collect();
    let mut lp = 0.0;
    if let Some(hook) = perceptual {
        let (v, g) = hook.evaluate(pred, gt)?;
        if g.len() != grad.len() {
            return Err(Error::Dimension("perceptual gradient has wrong size".into()));
        }
        lp = v;
        for (o, gv) in grad.iter_mut().zip(g) {
            *o += weights.lpips * gv;
        }
    }
    Ok(LossReport {
        total: weights.l1 * l1 + weights.ssim * ls + weights.lpips * lp,
        l1,
        ssim: ls,
        perceptual: lp,
        grad,
    })
}
