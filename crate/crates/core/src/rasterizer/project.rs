use rayon::prelude::*;

use super::sh::{sh_basis, sh_basis_jacobian, MAX_SH_DEGREE};
use super::{Camera, RasterSettings};
use crate::error::{Error, Result};
use crate::gaussian_cloud::GaussianCloud;
use crate::math::{
    quat_normalize, quat_normalize_vjp, quat_to_mat, quat_to_mat_vjp, sigmoid, Mat3, Vec3,
};
use nalgebra::{Matrix2, Matrix2x3};

/// Screen-space footprint of one Gaussian.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Splat {
    pub visible: bool,
    pub mean: [f64; 2],
    /// Upper triangle `(a, b, c)` of the 2D covariance, low-pass included.
    pub cov: [f64; 3],
    /// Inverse covariance `(A, B, C)`; `m = A dx² + 2 B dx dy + C dy²`.
    pub conic: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    pub color: [f64; 3],
    /// Channels whose SH value was clamped at zero.
    pub clamped: [bool; 3],
    /// Half-extent in pixels beyond which alpha < alpha_min.
    pub radius: f64,
    /// Mahalanobis distance past which alpha < alpha_min, padded slightly.
    pub m_cut: f64,
    pub cam: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projected {
    pub splats: Vec<Splat>,
}

impl Projected {
    pub fn len(&self) -> usize {
        self.splats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splats.is_empty()
    }

    /// Indices of Gaussians that were culled.
    pub fn culled(&self) -> Vec<usize> {
        (0..self.splats.len()).filter(|&i| !self.splats[i].visible).collect()
    }
}

/// Projects every Gaussian with the caller's SH directions.
pub fn project_gaussians(
    cloud: &GaussianCloud,
    camera: &Camera,
    directions: &[Vec3],
    settings: &RasterSettings,
) -> Result<Projected> {
    if directions.len() != cloud.len() {
        return Err(Error::Dimension(format!(
            "{} directions for {} gaussians",
            directions.len(),
            cloud.len()
        )));
    }
    if cloud.sh_degree > MAX_SH_DEGREE {
        return Err(Error::Dimension(format!("SH degree {} > 3", cloud.sh_degree)));
    }
    let splats = (0..cloud.len())
        .into_par_iter()
        .map(|i| project_one(cloud, i, camera, &directions[i], settings))
        .collect();
    Ok(Projected { splats })
}

fn covariance_3d(q_raw: &[f64; 4], log_s: &Vec3) -> (Mat3, Mat3, Vec3) {
    let r = quat_to_mat(&quat_normalize(q_raw));
    let s = log_s.map(f64::exp);
    let m = r * Mat3::from_diagonal(&s);
    (m * m.transpose(), r, s)
}

fn jacobian(camera: &Camera, p: &Vec3) -> Matrix2x3<f64> {
    let (x, y, z) = (p.x, p.y, p.z);
    Matrix2x3::new(
        camera.fx / z,
        0.0,
        -camera.fx * x / (z * z),
        0.0,
        camera.fy / z,
        -camera.fy * y / (z * z),
    )
}

fn project_one(
    cloud: &GaussianCloud,
    i: usize,
    camera: &Camera,
    dir: &Vec3,
    settings: &RasterSettings,
) -> Splat {
    let cam = camera.world_to_camera.apply(&cloud.centers[i]);
    let splat = Splat {
        cam,
        depth: cam.z,
        ..Default::default()
    };
    if !(cam.z > camera.near && cam.z < camera.far) {
        return splat;
    }
    let mean = [
        camera.fx * cam.x / cam.z + camera.cx,
        camera.fy * cam.y / cam.z + camera.cy,
    ];
    let (w, h) = (camera.width as f64, camera.height as f64);
    // guard band: one and a half image sizes around the frame
    if mean[0] < -1.5 * w || mean[0] > 2.5 * w || mean[1] < -1.5 * h || mean[1] > 2.5 * h {
        return splat;
    }
    let opacity = sigmoid(cloud.opacity_logits[i]);
    if opacity < settings.alpha_min {
        return splat;
    }
    let (sigma, _, _) = covariance_3d(&cloud.rotations[i], &cloud.log_scales[i]);
    let t = jacobian(camera, &cam) * camera.world_to_camera.rotation;
    let cov = t * sigma * t.transpose() + Matrix2::identity() * settings.low_pass;
    let (a, b, c) = (cov[(0, 0)], cov[(0, 1)], cov[(1, 1)]);
    let det = a * c - b * b;
    if !(det > 0.0) {
        return splat;
    }
    let conic = [c / det, -b / det, a / det];
    let mid = 0.5 * (a + c);
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    // o·exp(-m/2) >= alpha_min  <=>  m <= 2 ln(o / alpha_min)
    let m_max = 2.0 * (opacity / settings.alpha_min).ln();
    let radius = (m_max * lambda_max).sqrt() * 1.0001 + 1e-9;

    let k = cloud.sh_per_channel();
    let coeffs = cloud.sh_row(i);
    let mut basis = [0.0; 16];
    sh_basis(cloud.sh_degree, dir, &mut basis);
    let mut color = [0.0; 3];
    let mut clamped = [false; 3];
    for ch in 0..3 {
        let v = 0.5
            + coeffs[ch * k..(ch + 1) * k]
                .iter()
                .zip(&basis[..k])
                .map(|(a, b)| a * b)
                .sum::<f64>();
        clamped[ch] = v < 0.0;
        color[ch] = v.max(0.0);
    }
    Splat {
        visible: true,
        mean,
        cov: [a, b, c],
        conic,
        depth: cam.z,
        opacity,
        color,
        clamped,
        radius,
        m_cut: m_max * (1.0 + 1e-9) + 1e-12,
        cam,
    }
}

/// Screen-space gradients accumulated by the compositing backward.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub(crate) struct Grad2d {
    pub mean: [f64; 2],
    pub conic: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
}

impl Grad2d {
    pub fn add(&mut self, o: &Grad2d) {
        for k in 0..2 {
            self.mean[k] += o.mean[k];
        }
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.opacity += o.opacity;
    }
}

pub(crate) struct Grad3d {
    pub center: Vec3,
    pub rotation: [f64; 4],
    pub log_scale: Vec3,
    pub opacity_logit: f64,
    pub direction: Vec3,
}

/// Chains screen-space gradients back to the Gaussian's 3D attributes and
/// writes SH coefficient gradients into `sh_grad`.
pub(crate) fn project_backward(
    cloud: &GaussianCloud,
    i: usize,
    camera: &Camera,
    dir: &Vec3,
    splat: &Splat,
    g: &Grad2d,
    sh_grad: &mut [f64],
) -> Grad3d {
    let k = cloud.sh_per_channel();
    let deg = cloud.sh_degree;

    // color -> SH coefficients and direction
    let mut basis = [0.0; 16];
    let mut jac = [[0.0; 3]; 16];
    sh_basis(deg, dir, &mut basis);
    sh_basis_jacobian(deg, dir, &mut jac);
    let coeffs = cloud.sh_row(i);
    let mut g_dir = Vec3::zeros();
    for ch in 0..3 {
        if splat.clamped[ch] {
            continue;
        }
        let gc = g.color[ch];
        for j in 0..k {
            sh_grad[ch * k + j] = gc * basis[j];
            let w = gc * coeffs[ch * k + j];
            g_dir += Vec3::new(jac[j][0], jac[j][1], jac[j][2]) * w;
        }
    }

    let o = splat.opacity;
    let g_logit = g.opacity * o * (1.0 - o);

    // conic -> covariance
    let [a, b, c] = splat.cov;
    let det = a * c - b * b;
    let det2 = det * det;
    let [ga_, gb_, gc_] = g.conic;
    let g_a = ga_ * (-c * c / det2) + gb_ * (b * c / det2) + gc_ * (-b * b / det2);
    let g_b = ga_ * (2.0 * b * c / det2)
        + gb_ * (-1.0 / det - 2.0 * b * b / det2)
        + gc_ * (2.0 * a * b / det2);
    let g_c = ga_ * (-b * b / det2) + gb_ * (a * b / det2) + gc_ * (-a * a / det2);
    let g_cov = Matrix2::new(g_a, 0.5 * g_b, 0.5 * g_b, g_c);

    let w = camera.world_to_camera.rotation;
    let p = splat.cam;
    let jm = jacobian(camera, &p);
    let t = jm * w;
    let (sigma, r, s) = covariance_3d(&cloud.rotations[i], &cloud.log_scales[i]);

    // cov = T Σ Tᵀ
    let g_sigma = t.transpose() * g_cov * t;
    let g_t = 2.0 * g_cov * t * sigma;
    let g_j = g_t * w.transpose();

    let (x, y, z) = (p.x, p.y, p.z);
    let (fx, fy) = (camera.fx, camera.fy);
    let z2 = z * z;
    let z3 = z2 * z;
    let mut g_cam = Vec3::new(
        g_j[(0, 2)] * (-fx / z2),
        g_j[(1, 2)] * (-fy / z2),
        g_j[(0, 0)] * (-fx / z2)
            + g_j[(0, 2)] * (2.0 * fx * x / z3)
            + g_j[(1, 1)] * (-fy / z2)
            + g_j[(1, 2)] * (2.0 * fy * y / z3),
    );
    g_cam.x += g.mean[0] * fx / z;
    g_cam.y += g.mean[1] * fy / z;
    g_cam.z += -g.mean[0] * fx * x / z2 - g.mean[1] * fy * y / z2;
    let g_center = w.transpose() * g_cam;

    // Σ = M Mᵀ, M = R diag(s)
    let m = r * Mat3::from_diagonal(&s);
    let g_m = 2.0 * g_sigma * m;
    let g_r = g_m * Mat3::from_diagonal(&s);
    let g_s = Vec3::new(
        g_m.column(0).dot(&r.column(0)),
        g_m.column(1).dot(&r.column(1)),
        g_m.column(2).dot(&r.column(2)),
    );
    let q_raw = cloud.rotations[i];
    let q = quat_normalize(&q_raw);
    let g_q = quat_to_mat_vjp(&q, &g_r);
    Grad3d {
        center: g_center,
        rotation: quat_normalize_vjp(&q_raw, &g_q),
        log_scale: g_s.component_mul(&s),
        opacity_logit: g_logit,
        direction: g_dir,
    }
}
