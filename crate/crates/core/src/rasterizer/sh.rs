//! Real spherical harmonics up to degree 3, with the Jacobian of every basis
//! function w.r.t. the (unit) direction.

use crate::math::Vec3;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
pub const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

pub const MAX_SH_DEGREE: usize = 3;

/// Basis values for `k = (degree+1)²` coefficients.
pub fn sh_basis(degree: usize, d: &Vec3, out: &mut [f64]) {
    let (x, y, z) = (d.x, d.y, d.z);
    out[0] = SH_C0;
    if degree < 1 {
        return;
    }
    out[1] = -SH_C1 * y;
    out[2] = SH_C1 * z;
    out[3] = -SH_C1 * x;
    if degree < 2 {
        return;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    out[4] = SH_C2[0] * x * y;
    out[5] = SH_C2[1] * y * z;
    out[6] = SH_C2[2] * (2.0 * zz - xx - yy);
    out[7] = SH_C2[3] * x * z;
    out[8] = SH_C2[4] * (xx - yy);
    if degree < 3 {
        return;
    }
    out[9] = SH_C3[0] * y * (3.0 * xx - yy);
    out[10] = SH_C3[1] * x * y * z;
    out[11] = SH_C3[2] * y * (4.0 * zz - xx - yy);
    out[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
    out[13] = SH_C3[4] * x * (4.0 * zz - xx - yy);
    out[14] = SH_C3[5] * z * (xx - yy);
    out[15] = SH_C3[6] * x * (xx - 3.0 * yy);
}

/// `d basis_k / d (x, y, z)` for every coefficient.
pub fn sh_basis_jacobian(degree: usize, d: &Vec3, out: &mut [[f64; 3]]) {
    let (x, y, z) = (d.x, d.y, d.z);
    out[0] = [0.0; 3];
    if degree < 1 {
        return;
    }
    out[1] = [0.0, -SH_C1, 0.0];
    out[2] = [0.0, 0.0, SH_C1];
    out[3] = [-SH_C1, 0.0, 0.0];
    if degree < 2 {
        return;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    out[4] = [SH_C2[0] * y, SH_C2[0] * x, 0.0];
    out[5] = [0.0, SH_C2[1] * z, SH_C2[1] * y];
    out[6] = [-2.0 * SH_C2[2] * x, -2.0 * SH_C2[2] * y, 4.0 * SH_C2[2] * z];
    out[7] = [SH_C2[3] * z, 0.0, SH_C2[3] * x];
    out[8] = [2.0 * SH_C2[4] * x, -2.0 * SH_C2[4] * y, 0.0];
    if degree < 3 {
        return;
    }
    out[9] = [SH_C3[0] * 6.0 * x * y, SH_C3[0] * (3.0 * xx - 3.0 * yy), 0.0];
    out[10] = [SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y];
    out[11] = [
        -2.0 * SH_C3[2] * x * y,
        SH_C3[2] * (4.0 * zz - xx - 3.0 * yy),
        8.0 * SH_C3[2] * y * z,
    ];
    out[12] = [
        -6.0 * SH_C3[3] * x * z,
        -6.0 * SH_C3[3] * y * z,
        SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
    ];
    out[13] = [
        SH_C3[4] * (4.0 * zz - 3.0 * xx - yy),
        -2.0 * SH_C3[4] * x * y,
        8.0 * SH_C3[4] * x * z,
    ];
    out[14] = [2.0 * SH_C3[5] * x * z, -2.0 * SH_C3[5] * y * z, SH_C3[5] * (xx - yy)];
    out[15] = [
        SH_C3[6] * (3.0 * xx - 3.0 * yy),
        -6.0 * SH_C3[6] * x * y,
        0.0,
    ];
}

/// RGB before clamping: `Σ_k sh[c][k] basis_k + 0.5`.
pub fn eval_color_unclamped(degree: usize, coeffs: &[f64], d: &Vec3) -> [f64; 3] {
    let k = (degree + 1) * (degree + 1);
    let mut basis = [0.0; 16];
    sh_basis(degree, d, &mut basis);
    let mut rgb = [0.5; 3];
    for (c, out) in rgb.iter_mut().enumerate() {
        *out += coeffs[c * k..(c + 1) * k]
            .iter()
            .zip(&basis[..k])
            .map(|(a, b)| a * b)
            .sum::<f64>();
    }
    rgb
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobian_matches_finite_differences() {
        let d = Vec3::new(0.3, -0.5, 0.81);
        let mut jac = [[0.0; 3]; 16];
        sh_basis_jacobian(3, &d, &mut jac);
        let h = 1e-6;
        for axis in 0..3 {
            let mut p = d;
            let mut m = d;
            p[axis] += h;
            m[axis] -= h;
            let mut bp = [0.0; 16];
            let mut bm = [0.0; 16];
            sh_basis(3, &p, &mut bp);
            sh_basis(3, &m, &mut bm);
            for k in 0..16 {
                let fd = (bp[k] - bm[k]) / (2.0 * h);
                assert!((fd - jac[k][axis]).abs() < 1e-8, "k={k} axis={axis}");
            }
        }
    }

    #[test]
    fn zero_coefficients_are_mid_gray() {
        let rgb = eval_color_unclamped(3, &[0.0; 48], &Vec3::new(0.0, 0.0, 1.0));
        assert_eq!(rgb, [0.5; 3]);
    }
}
