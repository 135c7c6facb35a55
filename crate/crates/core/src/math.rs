//! Small geometry kernel shared by every stage: rigid transforms,
//! quaternions stored as `[w, x, y, z]`, axis-angle conversion and the
//! vector-Jacobian products needed by the backward passes.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
/// Quaternion as `[w, x, y, z]`.
pub type Quat = [f64; 4];

pub const QUAT_IDENTITY: Quat = [1.0, 0.0, 0.0, 0.0];

/// A proper rigid motion `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    #[inline]
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`, i.e. apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn rotation_quat(&self) -> Quat {
        mat_to_quat(&self.rotation)
    }

    /// Checks `RᵀR = I` and `det R = +1` within `tol`.
    pub fn is_valid(&self, tol: f64) -> bool {
        is_rotation(&self.rotation, tol) && self.translation.iter().all(|v| v.is_finite())
    }
}

pub fn is_rotation(r: &Mat3, tol: f64) -> bool {
    let e = r.transpose() * r - Mat3::identity();
    e.iter().all(|v| v.abs() <= tol) && (r.determinant() - 1.0).abs() <= tol
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Rodrigues' formula for an axis-angle vector (direction = axis, norm = angle).
pub fn axis_angle_to_mat(aa: &Vec3) -> Mat3 {
    let theta = aa.norm();
    if theta < 1e-12 {
        // first-order term keeps the map smooth through zero
        return Mat3::identity() + skew(aa);
    }
    let k = skew(&(aa / theta));
    Mat3::identity() + k * theta.sin() + k * k * (1.0 - theta.cos())
}

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn quat_from_axis_angle(axis_unit: &Vec3, angle: f64) -> Quat {
    let (s, c) = (0.5 * angle).sin_cos();
    [c, s * axis_unit.x, s * axis_unit.y, s * axis_unit.z]
}

#[inline]
pub fn quat_mul(a: &Quat, b: &Quat) -> Quat {
    let [aw, ax, ay, az] = *a;
    let [bw, bx, by, bz] = *b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

#[inline]
pub fn quat_conj(q: &Quat) -> Quat {
    [q[0], -q[1], -q[2], -q[3]]
}

#[inline]
pub fn quat_norm(q: &Quat) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

pub fn quat_normalize(q: &Quat) -> Quat {
    let n = quat_norm(q);
    if n < 1e-300 {
        return QUAT_IDENTITY;
    }
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

#[inline]
pub fn quat_dot(a: &Quat, b: &Quat) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3]
}

/// Rotation matrix of a unit quaternion.
pub fn quat_to_mat(q: &Quat) -> Mat3 {
    let [w, x, y, z] = *q;
    Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Quaternion of a rotation matrix, with non-negative `w`.
pub fn mat_to_quat(r: &Mat3) -> Quat {
    let uq = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r));
    let q = uq.quaternion();
    let out = [q.w, q.i, q.j, q.k];
    if out[0] < 0.0 {
        [-out[0], -out[1], -out[2], -out[3]]
    } else {
        out
    }
}

/// Gradient of `L(quat_to_mat(q))` w.r.t. the (unit) quaternion entries,
/// given `g = dL/dR`. Treats `q` as an unconstrained 4-vector.
pub fn quat_to_mat_vjp(q: &Quat, g: &Mat3) -> Quat {
    let [w, x, y, z] = *q;
    let g = |r: usize, c: usize| g[(r, c)];
    [
        2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1)),
        2.0 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2)
            + z * g(2, 0)
            + w * g(2, 1)
            - 2.0 * x * g(2, 2)),
        2.0 * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
            - w * g(2, 0)
            + z * g(2, 1)
            - 2.0 * y * g(2, 2)),
        2.0 * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1)),
    ]
}

/// Backward of `q / |q|`.
pub fn quat_normalize_vjp(raw: &Quat, g_unit: &Quat) -> Quat {
    let n = quat_norm(raw);
    let u = [raw[0] / n, raw[1] / n, raw[2] / n, raw[3] / n];
    let d = quat_dot(&u, g_unit);
    [
        (g_unit[0] - u[0] * d) / n,
        (g_unit[1] - u[1] * d) / n,
        (g_unit[2] - u[2] * d) / n,
        (g_unit[3] - u[3] * d) / n,
    ]
}

/// For `c = a ⊗ b`, returns `(dL/da, dL/db)` given `dL/dc`.
pub fn quat_mul_vjp(a: &Quat, b: &Quat, g: &Quat) -> (Quat, Quat) {
    // c = L(a) b = R(b) a, with L, R the left/right multiplication matrices.
    let [aw, ax, ay, az] = *a;
    let [bw, bx, by, bz] = *b;
    let ga = [
        bw * g[0] + bx * g[1] + by * g[2] + bz * g[3],
        -bx * g[0] + bw * g[1] - bz * g[2] + by * g[3],
        -by * g[0] + bz * g[1] + bw * g[2] - bx * g[3],
        -bz * g[0] - by * g[1] + bx * g[2] + bw * g[3],
    ];
    let gb = [
        aw * g[0] + ax * g[1] + ay * g[2] + az * g[3],
        -ax * g[0] + aw * g[1] + az * g[2] - ay * g[3],
        -ay * g[0] - az * g[1] + aw * g[2] + ax * g[3],
        -az * g[0] + ay * g[1] - ax * g[2] + aw * g[3],
    ];
    (ga, gb)
}

/// `(v, dL/dq)` for `v = R(q) x` with unit `q`, given `dL/dv`.
pub fn quat_rotate_vjp(q: &Quat, x: &Vec3, g: &Vec3) -> Quat {
    // dL/dR = g xᵀ
    quat_to_mat_vjp(q, &(g * x.transpose()))
}

/// Unit vector with a fallback for near-zero input.
pub fn normalize_or(v: &Vec3, fallback: Vec3) -> (Vec3, bool) {
    let n = v.norm();
    if n < 1e-12 {
        (fallback, false)
    } else {
        (v / n, true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn fd_quat<F: Fn(&Quat) -> f64>(f: F, q: &Quat) -> Quat {
        let h = 1e-6;
        let mut out = [0.0; 4];
        for k in 0..4 {
            let mut a = *q;
            let mut b = *q;
            a[k] += h;
            b[k] -= h;
            out[k] = (f(&a) - f(&b)) / (2.0 * h);
        }
        out
    }

    #[test]
    fn quat_mat_roundtrip() {
        let r = axis_angle_to_mat(&Vec3::new(0.3, -1.2, 0.7));
        let q = mat_to_quat(&r);
        assert_abs_diff_eq!(quat_to_mat(&q), r, epsilon = 1e-12);
        assert!(is_rotation(&r, 1e-12));
    }

    #[test]
    fn quat_mul_matches_matrix_product() {
        let a = mat_to_quat(&axis_angle_to_mat(&Vec3::new(0.1, 0.2, 0.3)));
        let b = mat_to_quat(&axis_angle_to_mat(&Vec3::new(-0.5, 0.4, 0.9)));
        let lhs = quat_to_mat(&quat_mul(&a, &b));
        let rhs = quat_to_mat(&a) * quat_to_mat(&b);
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-12);
    }

    #[test]
    fn rigid_inverse_and_compose() {
        let t = RigidTransform::new(
            axis_angle_to_mat(&Vec3::new(0.4, 0.1, -0.2)),
            Vec3::new(1.0, 2.0, 3.0),
        );
        let p = Vec3::new(-0.3, 0.5, 2.0);
        assert_abs_diff_eq!(t.inverse().apply(&t.apply(&p)), p, epsilon = 1e-12);
        let id = t.compose(&t.inverse());
        assert!(id.is_valid(1e-12));
        assert_abs_diff_eq!(id.translation, Vec3::zeros(), epsilon = 1e-12);
    }

    #[test]
    fn vjps_match_finite_differences() {
        let q = quat_normalize(&[0.8, 0.1, -0.4, 0.3]);
        let g = Mat3::new(0.3, -0.2, 0.5, 1.0, 0.1, -0.7, 0.2, 0.4, -0.9);
        let f = |q: &Quat| quat_to_mat(q).component_mul(&g).sum();
        let an = quat_to_mat_vjp(&q, &g);
        let num = fd_quat(f, &q);
        for k in 0..4 {
            assert!((an[k] - num[k]).abs() < 1e-7, "{k}: {} vs {}", an[k], num[k]);
        }

        let raw = [1.3, -0.2, 0.5, 0.1];
        let gu = [0.2, 0.7, -0.3, 0.5];
        let f = |q: &Quat| quat_dot(&quat_normalize(q), &gu);
        let an = quat_normalize_vjp(&raw, &gu);
        let num = fd_quat(f, &raw);
        for k in 0..4 {
            assert!((an[k] - num[k]).abs() < 1e-7);
        }

        let a = [0.3, 0.2, -0.6, 0.1];
        let b = [0.9, -0.1, 0.2, 0.4];
        let gc = [0.5, -0.25, 0.75, 0.1];
        let (ga, gb) = quat_mul_vjp(&a, &b, &gc);
        let na = fd_quat(|x| quat_dot(&quat_mul(x, &b), &gc), &a);
        let nb = fd_quat(|x| quat_dot(&quat_mul(&a, x), &gc), &b);
        for k in 0..4 {
            assert!((ga[k] - na[k]).abs() < 1e-7);
            assert!((gb[k] - nb[k]).abs() < 1e-7);
        }
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(1e9), 1.0);
        assert_eq!(sigmoid(-1e9), 0.0);
        assert!((sigmoid(logit(0.1)) - 0.1).abs() < 1e-15);
    }
}
