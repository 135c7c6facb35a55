//! Residual deformation network: a 13-layer MLP over joint-relative
//! positions, producing a bounded translation and axis-angle rotation per
//! Gaussian.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::math::{quat_from_axis_angle, quat_to_mat, sigmoid, Quat, RigidTransform, Vec3, QUAT_IDENTITY};

pub const LAYER_COUNT: usize = 13;
/// 1-based layers whose input is `[previous hidden ‖ network input]`.
pub const SKIP_LAYERS: [usize; 2] = [5, 9];
pub const OUTPUT_DIM: usize = 7;
/// Axis norms below this give an identity rotation.
pub const MIN_AXIS_NORM: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum OutputBounds {
    /// `t = t_max (2σ(x) − 1)`, `angle = theta_max (2σ(x) − 1)`.
    Bounded { t_max: f64, theta_max: f64 },
    /// `t = t_scale x`, `angle = theta_scale x`.
    Unbounded { t_scale: f64, theta_scale: f64 },
}

impl Default for OutputBounds {
    fn default() -> Self {
        OutputBounds::Bounded {
            t_max: 0.10,
            theta_max: 30f64.to_radians(),
        }
    }
}

impl OutputBounds {
    pub fn unbounded_default() -> Self {
        OutputBounds::Unbounded {
            t_scale: 0.01,
            theta_scale: std::f64::consts::FRAC_1_PI,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b) = match *self {
            OutputBounds::Bounded { t_max, theta_max } => (t_max, theta_max),
            OutputBounds::Unbounded { t_scale, theta_scale } => (t_scale, theta_scale),
        };
        if a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!("output bounds must be positive: {self:?}")))
        }
    }

    /// Maps a raw channel to a value and its derivative.
    fn map(&self, x: f64, translation: bool) -> (f64, f64) {
        match *self {
            OutputBounds::Bounded { t_max, theta_max } => {
                let s = if translation { t_max } else { theta_max };
                let sg = sigmoid(x);
                (s * (2.0 * sg - 1.0), 2.0 * s * sg * (1.0 - sg))
            }
            OutputBounds::Unbounded { t_scale, theta_scale } => {
                let s = if translation { t_scale } else { theta_scale };
                (s * x, s)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DrmNetwork {
    pub input_dim: usize,
    pub hidden: usize,
    /// `weights[l]` is `out × in`.
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
    pub bounds: OutputBounds,
}

#[derive(Debug, Clone)]
pub struct DrmCache {
    /// Input of every layer (after concatenation), `N × in_l`.
    inputs: Vec<DMatrix<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DrmGrads {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
    pub input: DMatrix<f64>,
}

fn is_skip(l: usize) -> bool {
    SKIP_LAYERS.contains(&(l + 1))
}

impl DrmNetwork {
    /// Layer `(in, out)` dimensions.
    pub fn layer_dims(input_dim: usize, hidden: usize) -> Vec<(usize, usize)> {
        (0..LAYER_COUNT)
            .map(|l| {
                let inp = if l == 0 {
                    input_dim
                } else if is_skip(l) {
                    hidden + input_dim
                } else {
                    hidden
                };
                let out = if l + 1 == LAYER_COUNT { OUTPUT_DIM } else { hidden };
                (inp, out)
            })
            .collect()
    }

    pub fn zeros(input_dim: usize, hidden: usize, bounds: OutputBounds) -> Self {
        let dims = Self::layer_dims(input_dim, hidden);
        Self {
            input_dim,
            hidden,
            weights: dims.iter().map(|&(i, o)| DMatrix::zeros(o, i)).collect(),
            biases: dims.iter().map(|&(_, o)| DVector::zeros(o)).collect(),
            bounds,
        }
    }

    /// Uniform fan-in initialization for the hidden layers; the output layer
    /// starts at zero so the residual is the identity.
    pub fn new(joints: usize, hidden: usize, bounds: OutputBounds, seed: u64) -> Self {
        let mut net = Self::zeros(3 * joints, hidden, bounds);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for w in net.weights.iter_mut().take(LAYER_COUNT - 1) {
            let bound = (6.0 / w.ncols() as f64).sqrt();
            for v in w.iter_mut() {
                *v = rng.random_range(-bound..bound);
            }
        }
        net
    }

    pub fn joint_count(&self) -> usize {
        self.input_dim / 3
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        let dims = Self::layer_dims(self.input_dim, self.hidden);
        if self.weights.len() != LAYER_COUNT || self.biases.len() != LAYER_COUNT {
            return Err(Error::validation("drm", format!("expected {LAYER_COUNT} layers")));
        }
        for (l, &(i, o)) in dims.iter().enumerate() {
            if self.weights[l].shape() != (o, i) || self.biases[l].len() != o {
                return Err(Error::validation(
                    format!("drm layer {}", l + 1),
                    format!("expected {o}x{i} weights, got {:?}", self.weights[l].shape()),
                ));
            }
        }
        self.bounds.validate()
    }

    /// Raw `N × 7` outputs and the activations needed for the backward pass.
    pub fn forward(&self, enc: &DMatrix<f64>) -> Result<(DMatrix<f64>, DrmCache)> {
        if enc.ncols() != self.input_dim {
            return Err(Error::Dimension(format!(
                "encoding width {} != network input {}",
                enc.ncols(),
                self.input_dim
            )));
        }
        let n = enc.nrows();
        let mut inputs = Vec::with_capacity(LAYER_COUNT);
        let mut pre = Vec::with_capacity(LAYER_COUNT - 1);
        let mut h = enc.clone();
        for l in 0..LAYER_COUNT {
            let x = if l > 0 && is_skip(l) {
                let mut cat = DMatrix::zeros(n, self.hidden + self.input_dim);
                cat.columns_mut(0, self.hidden).copy_from(&h);
                cat.columns_mut(self.hidden, self.input_dim).copy_from(enc);
                cat
            } else {
                h
            };
            let mut z = &x * self.weights[l].transpose();
            for mut row in z.row_iter_mut() {
                row += self.biases[l].transpose();
            }
            inputs.push(x);
            if l + 1 == LAYER_COUNT {
                return Ok((z, DrmCache { inputs, pre }));
            }
            h = z.map(|v| v.max(0.0));
            pre.push(z);
        }
        unreachable!()
    }

    /// Gradients of all parameters and of the encoding given `dL/draw`.
    pub fn backward(&self, cache: &DrmCache, d_out: &DMatrix<f64>) -> Result<DrmGrads> {
        self.backward_with(cache, d_out, true)
    }

    /// As `backward`; with `params == false` only the encoding gradient is
    /// computed and the parameter gradients are left empty.
    pub fn backward_with(&self, cache: &DrmCache, d_out: &DMatrix<f64>, params: bool) -> Result<DrmGrads> {
        let n = cache.inputs[0].nrows();
        if d_out.shape() != (n, OUTPUT_DIM) {
            return Err(Error::Dimension(format!(
                "upstream gradient {:?} does not match batch {n}x{OUTPUT_DIM}",
                d_out.shape()
            )));
        }
        let mut gw = vec![DMatrix::zeros(0, 0); LAYER_COUNT];
        let mut gb = vec![DVector::zeros(0); LAYER_COUNT];
        let mut g_input = DMatrix::zeros(n, self.input_dim);
        let mut dz = d_out.clone();
        for l in (0..LAYER_COUNT).rev() {
            if params {
                gw[l] = dz.transpose() * &cache.inputs[l];
                gb[l] = dz.row_sum().transpose();
            }
            let dx = &dz * &self.weights[l];
            let dh = if l == 0 {
                g_input += dx;
                break;
            } else if is_skip(l) {
                g_input += dx.columns(self.hidden, self.input_dim);
                dx.columns(0, self.hidden).into_owned()
            } else {
                dx
            };
            let z = &cache.pre[l - 1];
            dz = dh.zip_map(z, |g, zv| if zv > 0.0 { g } else { 0.0 });
        }
        Ok(DrmGrads {
            weights: gw,
            biases: gb,
            input: g_input,
        })
    }

    pub(crate) fn write_container(&self, prefix: &str, c: &mut Container) {
        let (mode, a, b) = match self.bounds {
            OutputBounds::Bounded { t_max, theta_max } => (0.0, t_max, theta_max),
            OutputBounds::Unbounded { t_scale, theta_scale } => (1.0, t_scale, theta_scale),
        };
        c.push_f64(
            &format!("{prefix}meta"),
            &[5],
            vec![self.input_dim as f64, self.hidden as f64, mode, a, b],
        );
        for l in 0..LAYER_COUNT {
            let w = &self.weights[l];
            // row-major on disk
            c.push_f64(
                &format!("{prefix}w{l}"),
                &[w.nrows(), w.ncols()],
                w.transpose().as_slice().to_vec(),
            );
            c.push_f64(&format!("{prefix}b{l}"), &[self.biases[l].len()], self.biases[l].as_slice().to_vec());
        }
    }

    pub(crate) fn read_container(prefix: &str, c: &Container) -> Result<Self> {
        let (_, meta) = c.f64_array(&format!("{prefix}meta"))?;
        if meta.len() != 5 {
            return Err(Error::Format("drm meta must have 5 entries".into()));
        }
        let bounds = if meta[2] == 0.0 {
            OutputBounds::Bounded { t_max: meta[3], theta_max: meta[4] }
        } else {
            OutputBounds::Unbounded { t_scale: meta[3], theta_scale: meta[4] }
        };
        let mut net = Self::zeros(meta[0] as usize, meta[1] as usize, bounds);
        for l in 0..LAYER_COUNT {
            let (shape, w) = c.f64_array(&format!("{prefix}w{l}"))?;
            let (o, i) = net.weights[l].shape();
            if shape != [o, i] {
                return Err(Error::validation(format!("{prefix}w{l}"), format!("expected {o}x{i}, got {shape:?}")));
            }
            net.weights[l] = DMatrix::from_row_slice(o, i, &w);
            let (_, b) = c.f64_array(&format!("{prefix}b{l}"))?;
            if b.len() != o {
                return Err(Error::validation(format!("{prefix}b{l}"), format!("expected {o} entries")));
            }
            net.biases[l] = DVector::from_vec(b);
        }
        net.validate()?;
        Ok(net)
    }
}

/// Row `i` holds `P_i − J_j` for every joint `j`, concatenated.
pub fn encode_joint_distances(positions: &[Vec3], joints: &[Vec3]) -> DMatrix<f64> {
    let j = joints.len();
    DMatrix::from_fn(positions.len(), 3 * j, |i, c| positions[i][c % 3] - joints[c / 3][c % 3])
}

/// Residual translation and rotation quaternion for one raw output row.
pub fn postprocess_row(raw: &[f64; 7], bounds: &OutputBounds) -> (Vec3, Quat) {
    let t = Vec3::new(bounds.map(raw[0], true).0, bounds.map(raw[1], true).0, bounds.map(raw[2], true).0);
    let angle = bounds.map(raw[3], false).0;
    let v = Vec3::new(raw[4], raw[5], raw[6]);
    let norm = v.norm();
    if norm < MIN_AXIS_NORM {
        return (t, QUAT_IDENTITY);
    }
    (t, quat_from_axis_angle(&(v / norm), angle))
}

/// Backward of `postprocess_row` given gradients on translation and quaternion.
pub fn postprocess_row_backward(raw: &[f64; 7], bounds: &OutputBounds, g_t: &Vec3, g_q: &Quat) -> [f64; 7] {
    let mut g = [0.0; 7];
    for k in 0..3 {
        g[k] = g_t[k] * bounds.map(raw[k], true).1;
    }
    let v = Vec3::new(raw[4], raw[5], raw[6]);
    let norm = v.norm();
    if norm < MIN_AXIS_NORM {
        return g;
    }
    let a = v / norm;
    let (angle, d_angle) = bounds.map(raw[3], false);
    let (s, c) = (0.5 * angle).sin_cos();
    // q = (cos θ/2, sin θ/2 · a)
    let g_theta = -0.5 * s * g_q[0] + 0.5 * c * (a.x * g_q[1] + a.y * g_q[2] + a.z * g_q[3]);
    g[3] = g_theta * d_angle;
    let g_a = Vec3::new(g_q[1], g_q[2], g_q[3]) * s;
    let g_v = (g_a - a * a.dot(&g_a)) / norm;
    g[4] = g_v.x;
    g[5] = g_v.y;
    g[6] = g_v.z;
    g
}

fn row7(raw: &DMatrix<f64>, i: usize) -> [f64; 7] {
    std::array::from_fn(|k| raw[(i, k)])
}

/// Per-row residuals as `(translation, quaternion)`.
pub fn residual_quats(raw: &DMatrix<f64>, bounds: &OutputBounds) -> Vec<(Vec3, Quat)> {
    (0..raw.nrows()).map(|i| postprocess_row(&row7(raw, i), bounds)).collect()
}

/// Per-row residual rigid transforms.
pub fn postprocess_output(raw: &DMatrix<f64>, bounds: &OutputBounds) -> Vec<RigidTransform> {
    residual_quats(raw, bounds)
        .into_iter()
        .map(|(t, q)| RigidTransform::new(quat_to_mat(&q), t))
        .collect()
}

/// `dL/draw` from per-row gradients on translation and quaternion.
pub fn postprocess_backward(
    raw: &DMatrix<f64>,
    bounds: &OutputBounds,
    g_t: &[Vec3],
    g_q: &[Quat],
) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(raw.nrows(), OUTPUT_DIM);
    for i in 0..raw.nrows() {
        let g = postprocess_row_backward(&row7(raw, i), bounds, &g_t[i], &g_q[i]);
        for k in 0..OUTPUT_DIM {
            out[(i, k)] = g[k];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::axis_angle_to_mat;

    #[test]
    fn layer_chain_includes_skips() {
        let dims = DrmNetwork::layer_dims(6, 16);
        assert_eq!(dims.len(), 13);
        assert_eq!(dims[0], (6, 16));
        assert_eq!(dims[4], (22, 16));
        assert_eq!(dims[8], (22, 16));
        assert_eq!(dims[5], (16, 16));
        assert_eq!(dims[12], (16, 7));
    }

    #[test]
    fn fresh_network_is_identity_residual() {
        let net = DrmNetwork::new(2, 16, OutputBounds::default(), 3);
        let enc = encode_joint_distances(&[Vec3::new(0.1, 0.2, 0.3)], &[Vec3::zeros(), Vec3::y()]);
        let (raw, _) = net.forward(&enc).unwrap();
        assert!(raw.iter().all(|&v| v == 0.0));
        let r = postprocess_output(&raw, &net.bounds);
        assert_eq!(r[0], RigidTransform::identity());
    }

    #[test]
    fn bounded_saturates() {
        let b = OutputBounds::default();
        for x in [1e9, -1e9, 40.0, -40.0] {
            let (t, q) = postprocess_row(&[x, x, x, x, 1.0, 0.0, 0.0], &b);
            assert!(t.amax() <= 0.10);
            let angle = 2.0 * q[0].clamp(-1.0, 1.0).acos();
            assert!(angle <= 30f64.to_radians() + 1e-12);
        }
    }

    #[test]
    fn unbounded_rotation_about_z() {
        let r = postprocess_output(
            &DMatrix::from_row_slice(1, 7, &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 2.0]),
            &OutputBounds::unbounded_default(),
        );
        let expect = axis_angle_to_mat(&Vec3::new(0.0, 0.0, std::f64::consts::FRAC_1_PI));
        assert!((r[0].rotation - expect).abs().max() < 1e-12);
        assert_eq!(r[0].translation, Vec3::zeros());
    }

    #[test]
    fn encoding_blocks() {
        let p = [Vec3::new(1.0, 2.0, 3.0)];
        let e = encode_joint_distances(&p, &[Vec3::zeros(), Vec3::new(1.0, 2.0, 3.0)]);
        assert_eq!(e.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn container_roundtrip() {
        let net = DrmNetwork::new(3, 8, OutputBounds::unbounded_default(), 11);
        let mut c = Container::new();
        net.write_container("drm/", &mut c);
        let back = DrmNetwork::read_container("drm/", &c).unwrap();
        assert_eq!(back, net);
    }
}
