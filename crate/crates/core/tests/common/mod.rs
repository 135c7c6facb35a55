//! Independent reference implementations used by the integration tests.
//!
//! Nothing here calls into the code paths it is used to check: skinning is
//! redone with 4×4 homogeneous matrices, compositing uses one global depth
//! sort per image, and nearest faces are found by exhaustive scans.

#![allow(dead_code)]

use gsavatar_core::body_model::{BodyModel, PoseParams};
use gsavatar_core::gaussian_cloud::{GaussianCloud, ParentId};
use gsavatar_core::math::{Mat3, Vec3};
use gsavatar_core::rasterizer::{Camera, RasterSettings};
use nalgebra::{Matrix4, Vector4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Rodrigues' formula, written out.
pub fn rodrigues(aa: &Vec3) -> Mat3 {
    let theta = aa.norm();
    if theta < 1e-15 {
        return Mat3::identity();
    }
    let k = aa / theta;
    let kx = Mat3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
    Mat3::identity() + kx * theta.sin() + kx * kx * (1.0 - theta.cos())
}

fn homogeneous(r: &Mat3, t: &Vec3) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(t);
    m
}

/// Linear blend skinning with homogeneous joint matrices, no shape offsets.
pub fn lbs_vertices(model: &BodyModel, pose: &PoseParams) -> Vec<Vec3> {
    let nv = model.template_vertices.len();
    let nj = model.kinematic_parents.len();
    let rest: Vec<Vec3> = (0..nj)
        .map(|j| {
            (0..nv).fold(Vec3::zeros(), |acc, v| {
                acc + model.template_vertices[v] * model.joint_regressor[j * nv + v]
            })
        })
        .collect();
    let mut world: Vec<Option<Matrix4<f64>>> = vec![None; nj];
    // parents may be listed after children; resolve by repeated sweeps
    while world.iter().any(|w| w.is_none()) {
        for j in 0..nj {
            if world[j].is_some() {
                continue;
            }
            let local_t = match model.kinematic_parents[j] {
                None => rest[j],
                Some(p) => rest[j] - rest[p],
            };
            let local = homogeneous(&rodrigues(&pose.rotations[j]), &local_t);
            world[j] = match model.kinematic_parents[j] {
                None => Some(local),
                Some(p) => world[p].map(|wp| wp * local),
            };
        }
    }
    let skin: Vec<Matrix4<f64>> = (0..nj)
        .map(|j| world[j].unwrap() * homogeneous(&Mat3::identity(), &(-rest[j])))
        .collect();
    let root = homogeneous(&Mat3::identity(), &pose.translation);
    (0..nv)
        .map(|v| {
            let mut m = Matrix4::zeros();
            for (j, s) in skin.iter().enumerate() {
                m += s * model.skinning_weights[v * nj + j];
            }
            let p = model.template_vertices[v];
            let h = root * m * Vector4::new(p.x, p.y, p.z, 1.0);
            Vec3::new(h.x, h.y, h.z)
        })
        .collect()
}

/// Random axis-angle pose with joint angles up to `max_angle`.
pub fn random_pose(rng: &mut ChaCha8Rng, joints: usize, max_angle: f64) -> PoseParams {
    PoseParams {
        rotations: (0..joints)
            .map(|_| random_unit(rng) * rng.random_range(0.0..max_angle))
            .collect(),
        translation: Vec3::new(
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.3..0.3),
            rng.random_range(-0.3..0.3),
        ),
    }
}

pub fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Squared point-triangle distance by minimizing over the triangle
/// parameterization: interior stationary point when it lies inside, otherwise
/// the closest point on the three edges.
pub fn oracle_point_triangle_sq(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    let seg = |u: &Vec3, v: &Vec3| {
        let d = v - u;
        let t = if d.norm_squared() > 0.0 { ((p - u).dot(&d) / d.norm_squared()).clamp(0.0, 1.0) } else { 0.0 };
        (u + d * t - p).norm_squared()
    };
    let e0 = b - a;
    let e1 = c - a;
    let m = nalgebra::Matrix2::new(e0.dot(&e0), e0.dot(&e1), e0.dot(&e1), e1.dot(&e1));
    let rhs = nalgebra::Vector2::new((p - a).dot(&e0), (p - a).dot(&e1));
    let mut best = seg(a, b).min(seg(b, c)).min(seg(c, a));
    if let Some(inv) = m.try_inverse() {
        let st = inv * rhs;
        if st.x >= 0.0 && st.y >= 0.0 && st.x + st.y <= 1.0 {
            best = best.min((a + e0 * st.x + e1 * st.y - p).norm_squared());
        }
    }
    best
}

/// Nearest face by exhaustive scan with `dist_sq`; ties go to the lower index.
pub fn brute_force_parents(
    cloud: &GaussianCloud,
    tris: &[[Vec3; 3]],
    tau: f64,
    dist_sq: impl Fn(&Vec3, &Vec3, &Vec3, &Vec3) -> f64,
) -> Vec<ParentId> {
    (0..cloud.len())
        .map(|i| {
            if !cloud.parents[i].is_human() {
                return ParentId::Background;
            }
            let mut best = (f64::INFINITY, 0usize);
            for (f, [a, b, c]) in tris.iter().enumerate() {
                let d = dist_sq(&cloud.centers[i], a, b, c);
                if d < best.0 {
                    best = (d, f);
                }
            }
            if best.0 <= tau * tau {
                ParentId::Face(best.1 as u32)
            } else {
                ParentId::Background
            }
        })
        .collect()
}

/// Real SH basis up to degree 3 in the usual 3D-GS sign convention.
fn sh_basis_ref(deg: usize, d: &Vec3) -> Vec<f64> {
    let (x, y, z) = (d.x, d.y, d.z);
    let mut b = vec![0.282_094_791_773_878_14];
    if deg >= 1 {
        let c1 = 0.488_602_511_902_919_9;
        b.extend([-c1 * y, c1 * z, -c1 * x]);
    }
    if deg >= 2 {
        b.extend([
            1.092_548_430_592_079_2 * x * y,
            -1.092_548_430_592_079_2 * y * z,
            0.315_391_565_252_520_05 * (2.0 * z * z - x * x - y * y),
            -1.092_548_430_592_079_2 * x * z,
            0.546_274_215_296_039_6 * (x * x - y * y),
        ]);
    }
    if deg >= 3 {
        b.extend([
            -0.590_043_589_926_643_5 * y * (3.0 * x * x - y * y),
            2.890_611_442_640_554 * x * y * z,
            -0.457_045_799_464_465_8 * y * (4.0 * z * z - x * x - y * y),
            0.373_176_332_590_115_4 * z * (2.0 * z * z - 3.0 * x * x - 3.0 * y * y),
            -0.457_045_799_464_465_8 * x * (4.0 * z * z - x * x - y * y),
            1.445_305_721_320_277 * z * (x * x - y * y),
            -0.590_043_589_926_643_5 * x * (x * x - 3.0 * y * y),
        ]);
    }
    b
}

struct RefSplat {
    mean: (f64, f64),
    conic: (f64, f64, f64),
    depth: f64,
    opacity: f64,
    color: [f64; 3],
}

/// Per-pixel compositing over every Gaussian after one global depth sort.
/// Expects all Gaussians in front of the camera; no tiling, no extent test.
pub fn brute_force_render(
    cloud: &GaussianCloud,
    camera: &Camera,
    dirs: &[Vec3],
    st: &RasterSettings,
) -> (Vec<f64>, Vec<f64>) {
    let mut splats = Vec::new();
    for i in 0..cloud.len() {
        let pc = camera.world_to_camera.rotation * cloud.centers[i] + camera.world_to_camera.translation;
        if pc.z <= camera.near || pc.z >= camera.far {
            continue;
        }
        let opacity = 1.0 / (1.0 + (-cloud.opacity_logits[i]).exp());
        if opacity < st.alpha_min {
            continue;
        }
        let q = cloud.rotations[i];
        let qn = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        let uq = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
            q[0] / qn,
            q[1] / qn,
            q[2] / qn,
            q[3] / qn,
        ));
        let r = uq.to_rotation_matrix().into_inner();
        let s2 = Mat3::from_diagonal(&cloud.log_scales[i].map(|v| (2.0 * v).exp()));
        let sigma = r * s2 * r.transpose();
        let j = nalgebra::Matrix2x3::new(
            camera.fx / pc.z,
            0.0,
            -camera.fx * pc.x / (pc.z * pc.z),
            0.0,
            camera.fy / pc.z,
            -camera.fy * pc.y / (pc.z * pc.z),
        );
        let t = j * camera.world_to_camera.rotation;
        let cov = t * sigma * t.transpose() + nalgebra::Matrix2::identity() * st.low_pass;
        let Some(inv) = cov.try_inverse() else { continue };
        let k = (cloud.sh_degree + 1) * (cloud.sh_degree + 1);
        let basis = sh_basis_ref(cloud.sh_degree, &dirs[i]);
        let row = &cloud.sh[i * 3 * k..(i + 1) * 3 * k];
        let color = std::array::from_fn(|ch| {
            (0.5 + (0..k).map(|m| row[ch * k + m] * basis[m]).sum::<f64>()).max(0.0)
        });
        splats.push(RefSplat {
            mean: (camera.fx * pc.x / pc.z + camera.cx, camera.fy * pc.y / pc.z + camera.cy),
            conic: (inv[(0, 0)], inv[(0, 1)], inv[(1, 1)]),
            depth: pc.z,
            opacity,
            color,
        });
    }
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth));
    let (w, h) = (camera.width, camera.height);
    let mut rgb = vec![0.0; w * h * 3];
    let mut alpha = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut trans = 1.0;
            let mut c = [0.0; 3];
            for s in &splats {
                let (dx, dy) = (s.mean.0 - px, s.mean.1 - py);
                let m = s.conic.0 * dx * dx + 2.0 * s.conic.1 * dx * dy + s.conic.2 * dy * dy;
                let a = (s.opacity * (-0.5 * m).exp()).min(st.alpha_cap);
                if a < st.alpha_min {
                    continue;
                }
                for ch in 0..3 {
                    c[ch] += s.color[ch] * a * trans;
                }
                trans *= 1.0 - a;
                if trans < st.min_transmittance {
                    break;
                }
            }
            let p = y * w + x;
            for ch in 0..3 {
                rgb[3 * p + ch] = c[ch] + trans * st.background[ch];
            }
            alpha[p] = 1.0 - trans;
        }
    }
    (rgb, alpha)
}

/// Central difference of `f` at `x[k]`.
pub fn central_diff(x: &mut [f64], k: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let x0 = x[k];
    x[k] = x0 + h;
    let fp = f(x);
    x[k] = x0 - h;
    let fm = f(x);
    x[k] = x0;
    (fp - fm) / (2.0 * h)
}

/// The acceptance tolerance for gradient checks.
pub fn grad_close(analytic: f64, numeric: f64) -> bool {
    let abs = (analytic - numeric).abs();
    abs <= 1e-6 || abs <= 1e-2 * analytic.abs().max(numeric.abs())
}

/// Prints a one-line verdict straight to stdout (bypassing the test
/// harness capture) and returns `ok`.
pub fn verdict(name: &str, ok: bool, detail: &str) -> bool {
    use std::io::Write;
    let line = format!("[{}] {name}: {detail}\n", if ok { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    ok
}
