//! Differentiable tile-based Gaussian splatting on the CPU.
//!
//! Colors are evaluated from per-Gaussian SH coefficients with directions
//! supplied by the caller, so static and deforming Gaussians can use
//! different direction fields in the same render.

mod composite;
mod project;
pub mod sh;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Mat3, RigidTransform, Vec3};

pub use composite::{rasterize_backward, rasterize_forward, RenderCache, RenderOutput};
pub use project::{project_gaussians, Projected};

/// Pinhole camera, OpenCV axes (x right, y down, z forward).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub id: String,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub world_to_camera: RigidTransform,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl Camera {
    /// Camera at `eye` looking at `target`, with `up` mapped to image-up.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        id: &str,
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Self {
        let z = (target - eye).normalize();
        let x = z.cross(&up).normalize();
        let y = z.cross(&x);
        let rot = Mat3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Self {
            id: id.to_string(),
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            world_to_camera: RigidTransform::new(rot, -(rot * eye)),
            width,
            height,
            near: 0.01,
            far: 1000.0,
        }
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        self.world_to_camera.inverse().translation
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::validation("camera", format!("{}: focal lengths must be positive", self.id)));
        }
        if !(self.near < self.far) || self.near <= 0.0 {
            return Err(Error::validation("camera", format!("{}: need 0 < near < far", self.id)));
        }
        if !self.world_to_camera.is_valid(1e-6) {
            return Err(Error::validation("camera", format!("{}: rotation is not orthonormal", self.id)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::validation("camera", format!("{}: empty image", self.id)));
        }
        Ok(())
    }

    /// Projects a world point to pixel coordinates and view depth.
    pub fn project_point(&self, p: &Vec3) -> (f64, f64, f64) {
        let c = self.world_to_camera.apply(p);
        (self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy, c.z)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RasterSettings {
    pub tile_size: usize,
    pub background: [f64; 3],
    /// Added to the diagonal of every 2D covariance (px²).
    pub low_pass: f64,
    pub alpha_cap: f64,
    pub alpha_min: f64,
    pub min_transmittance: f64,
}

impl Default for RasterSettings {
    fn default() -> Self {
        Self {
            tile_size: 16,
            background: [0.0; 3],
            low_pass: 0.3,
            alpha_cap: 0.99,
            alpha_min: 1.0 / 255.0,
            min_transmittance: 1e-4,
        }
    }
}

/// Per-Gaussian gradients of a scalar loss.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterGrads {
    pub centers: Vec<Vec3>,
    /// W.r.t. the raw (unnormalized) quaternion.
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<Vec3>,
    pub opacity_logits: Vec<f64>,
    pub sh: Vec<f64>,
    /// W.r.t. the caller-supplied SH direction.
    pub directions: Vec<Vec3>,
    /// Gradient w.r.t. the projected pixel mean.
    pub means2d: Vec<[f64; 2]>,
}

impl RasterGrads {
    pub fn zeros(n: usize, sh_stride: usize) -> Self {
        Self {
            centers: vec![Vec3::zeros(); n],
            rotations: vec![[0.0; 4]; n],
            log_scales: vec![Vec3::zeros(); n],
            opacity_logits: vec![0.0; n],
            sh: vec![0.0; n * sh_stride],
            directions: vec![Vec3::zeros(); n],
            means2d: vec![[0.0; 2]; n],
        }
    }
}

/// Binary silhouette: `alpha > 0.5` and `depth < threshold`.
pub fn render_mask(depth: &[f64], alpha: &[f64], threshold: f64) -> Vec<bool> {
    depth
        .iter()
        .zip(alpha)
        .map(|(&d, &a)| a > 0.5 && d < threshold)
        .collect()
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_rgb_png(path: &Path, width: usize, height: usize, rgb: &[f64]) -> Result<()> {
    let buf: Vec<u8> = rgb.iter().map(|&v| to_u8(v)).collect();
    image::save_buffer(path, &buf, width as u32, height as u32, image::ColorType::Rgb8)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

pub fn save_mask_png(path: &Path, width: usize, height: usize, mask: &[bool]) -> Result<()> {
    let buf: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    image::save_buffer(path, &buf, width as u32, height as u32, image::ColorType::L8)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// Depth as 16-bit millimeters, saturating at 65.535 m.
pub fn save_depth_png(path: &Path, width: usize, height: usize, depth: &[f64]) -> Result<()> {
    let buf: Vec<u16> = depth
        .iter()
        .map(|&d| (d * 1000.0).round().clamp(0.0, u16::MAX as f64) as u16)
        .collect();
    let img = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(width as u32, height as u32, buf)
        .ok_or_else(|| Error::Image("depth buffer size mismatch".into()))?;
    img.save(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn look_at_puts_target_on_axis() {
        let cam = Camera::look_at("c", Vec3::new(3.0, 1.0, 2.0), Vec3::zeros(), Vec3::y(), 100.0, 64, 48);
        let (u, v, z) = cam.project_point(&Vec3::zeros());
        assert!((u - 32.0).abs() < 1e-9 && (v - 24.0).abs() < 1e-9);
        assert!(z > 0.0);
        assert!((cam.center() - Vec3::new(3.0, 1.0, 2.0)).norm() < 1e-12);
        // world up projects upward in the image
        let (_, v_up, _) = cam.project_point(&Vec3::new(0.0, 0.1, 0.0));
        assert!(v_up < 24.0);
        cam.validate().unwrap();
    }

    #[test]
    fn mask_threshold() {
        let m = render_mask(&[1.0, 1.0, 20.0, 0.0], &[0.9, 0.2, 0.9, 0.0], 10.0);
        assert_eq!(m, vec![true, false, false, false]);
        assert!(render_mask(&[1.0], &[1.0], 0.0).iter().all(|&b| !b));
    }
}
