//! Skinned parametric body mesh: storage, linear blend skinning and the
//! per-face geometry (centroid, normal, orthonormal frame) consumed by the
//! deformation stage.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{ArrayData, Container};
use crate::error::{Error, Result};
use crate::math::{axis_angle_to_mat, Mat3, Vec3};

pub const BODY_MAGIC: &[u8; 8] = b"GSABODY1";

/// Faces with area below this (m²) are treated as degenerate.
pub const DEGENERATE_AREA: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct BodyModel {
    pub template_vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
    /// `V × J`, row-major.
    pub skinning_weights: Vec<f64>,
    /// `J × V`, row-major.
    pub joint_regressor: Vec<f64>,
    /// Parent joint of each joint, `None` for the root.
    pub kinematic_parents: Vec<Option<usize>>,
    /// `V × 3 × B`, row-major. Empty when `shape_count == 0`.
    pub shape_blendshapes: Vec<f64>,
    pub shape_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseParams {
    /// Per-joint local rotation, axis-angle (radians).
    pub rotations: Vec<Vec3>,
    /// Global root translation (meters).
    pub translation: Vec3,
}

impl PoseParams {
    /// The canonical T-pose: all-zero rotations and no translation.
    pub fn canonical(joints: usize) -> Self {
        Self {
            rotations: vec![Vec3::zeros(); joints],
            translation: Vec3::zeros(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.rotations.iter().all(|r| r.iter().all(|v| v.is_finite()))
            && self.translation.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    pub betas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosedBody {
    pub vertices: Vec<Vec3>,
    pub joints: Vec<Vec3>,
    pub face_centers: Vec<Vec3>,
    pub face_normals: Vec<Vec3>,
    pub face_rotations: Vec<Mat3>,
    /// Faces whose area fell below [`DEGENERATE_AREA`]; their normal and
    /// frame come from the rest shape instead.
    pub degenerate_faces: Vec<usize>,
}

impl PosedBody {
    pub fn face_count(&self) -> usize {
        self.face_centers.len()
    }

    pub fn face_vertices(&self, faces: &[[u32; 3]], f: usize) -> [Vec3; 3] {
        let [a, b, c] = faces[f];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }
}

/// Centroid, unit normal and orthonormal frame (x = first edge, z = normal,
/// y = z × x) of a triangle, or `None` if it is degenerate.
pub fn face_frame(v0: &Vec3, v1: &Vec3, v2: &Vec3) -> (Vec3, Option<(Vec3, Mat3)>) {
    let center = (v0 + v1 + v2) / 3.0;
    let e1 = v1 - v0;
    let e2 = v2 - v0;
    let n = e1.cross(&e2);
    let area = 0.5 * n.norm();
    if area < DEGENERATE_AREA || e1.norm() < 1e-300 {
        return (center, None);
    }
    let z = n / n.norm();
    let x = e1 / e1.norm();
    let y = z.cross(&x);
    (center, Some((z, Mat3::from_columns(&[x, y, z]))))
}

/// Frame around a given normal when the triangle itself is unusable.
fn fallback_frame(normal: &Vec3) -> Mat3 {
    let helper = if normal.x.abs() < 0.9 {
        Vec3::x()
    } else {
        Vec3::y()
    };
    let x = (helper - normal * normal.dot(&helper)).normalize();
    let y = normal.cross(&x);
    Mat3::from_columns(&[x, y, *normal])
}

impl BodyModel {
    pub fn vertex_count(&self) -> usize {
        self.template_vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn joint_count(&self) -> usize {
        self.kinematic_parents.len()
    }

    #[inline]
    pub fn weight(&self, v: usize, j: usize) -> f64 {
        self.skinning_weights[v * self.joint_count() + j]
    }

    /// Checks every structural invariant and reports the first offending array.
    pub fn validate(&self) -> Result<()> {
        let v = self.vertex_count();
        let j = self.joint_count();
        if j == 0 {
            return Err(Error::validation("kinematic_parents", "no joints"));
        }
        if self.skinning_weights.len() != v * j {
            return Err(Error::validation(
                "skinning_weights",
                format!("expected {v}x{j} entries, got {}", self.skinning_weights.len()),
            ));
        }
        if self.joint_regressor.len() != j * v {
            return Err(Error::validation(
                "joint_regressor",
                format!("expected {j}x{v} entries, got {}", self.joint_regressor.len()),
            ));
        }
        if self.shape_blendshapes.len() != v * 3 * self.shape_count {
            return Err(Error::validation(
                "shape_blendshapes",
                format!(
                    "expected {v}x3x{} entries, got {}",
                    self.shape_count,
                    self.shape_blendshapes.len()
                ),
            ));
        }
        if let Some(bad) = self.template_vertices.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::validation("template_vertices", format!("vertex {bad} not finite")));
        }
        for (vi, row) in self.skinning_weights.chunks_exact(j).enumerate() {
            if row.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
                return Err(Error::validation(
                    "skinning_weights",
                    format!("vertex {vi} has a negative or non-finite weight"),
                ));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::validation(
                    "skinning_weights",
                    format!("vertex {vi} weights sum to {s}"),
                ));
            }
        }
        for (fi, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&i| i as usize >= v) {
                return Err(Error::validation(
                    "faces",
                    format!("face {fi} references a vertex >= {v}"),
                ));
            }
        }
        let roots = self.kinematic_parents.iter().filter(|p| p.is_none()).count();
        if roots != 1 {
            return Err(Error::validation(
                "kinematic_parents",
                format!("expected exactly one root, found {roots}"),
            ));
        }
        if self.kinematic_parents.iter().flatten().any(|&p| p >= j) {
            return Err(Error::validation("kinematic_parents", "parent index out of range"));
        }
        self.topological_order()?;
        Ok(())
    }

    /// Joint order in which every parent precedes its children.
    pub fn topological_order(&self) -> Result<Vec<usize>> {
        let j = self.joint_count();
        let mut children = vec![Vec::new(); j];
        let mut order = Vec::with_capacity(j);
        for (c, p) in self.kinematic_parents.iter().enumerate() {
            match p {
                Some(p) => children[*p].push(c),
                None => order.push(c),
            }
        }
        let mut head = 0;
        while head < order.len() {
            let cur = order[head];
            order.extend_from_slice(&children[cur]);
            head += 1;
        }
        if order.len() != j {
            return Err(Error::validation("kinematic_parents", "kinematic tree has a cycle"));
        }
        Ok(order)
    }

    /// Template with shape blendshapes applied.
    pub fn shaped_vertices(&self, shape: &ShapeParams) -> Result<Vec<Vec3>> {
        if shape.betas.len() != self.shape_count && !(shape.betas.is_empty()) {
            return Err(Error::Dimension(format!(
                "shape has {} coefficients, model expects {}",
                shape.betas.len(),
                self.shape_count
            )));
        }
        let b = self.shape_count;
        let mut out = self.template_vertices.clone();
        if !shape.betas.is_empty() {
            for (vi, p) in out.iter_mut().enumerate() {
                for c in 0..3 {
                    let base = (vi * 3 + c) * b;
                    p[c] += (0..b)
                        .map(|k| self.shape_blendshapes[base + k] * shape.betas[k])
                        .sum::<f64>();
                }
            }
        }
        Ok(out)
    }

    pub fn regress_joints(&self, vertices: &[Vec3]) -> Vec<Vec3> {
        let v = self.vertex_count();
        (0..self.joint_count())
            .map(|j| {
                let row = &self.joint_regressor[j * v..(j + 1) * v];
                row.iter()
                    .zip(vertices)
                    .filter(|(w, _)| **w != 0.0)
                    .fold(Vec3::zeros(), |acc, (w, p)| acc + p * *w)
            })
            .collect()
    }

    /// World transforms of every joint for a pose: `(rotation, translation)`
    /// of the chain `G_j` and the rest joint locations.
    pub fn joint_transforms(
        &self,
        rest_joints: &[Vec3],
        pose: &PoseParams,
    ) -> Result<Vec<(Mat3, Vec3)>> {
        let order = self.topological_order()?;
        let mut g = vec![(Mat3::identity(), Vec3::zeros()); self.joint_count()];
        for j in order {
            let local = axis_angle_to_mat(&pose.rotations[j]);
            g[j] = match self.kinematic_parents[j] {
                None => (local, rest_joints[j]),
                Some(p) => {
                    let (rp, tp) = g[p];
                    (rp * local, rp * (rest_joints[j] - rest_joints[p]) + tp)
                }
            };
        }
        Ok(g)
    }
}

/// Linear blend skinning of the shaped template followed by per-face
/// geometry extraction.
pub fn pose_body(model: &BodyModel, shape: &ShapeParams, pose: &PoseParams) -> Result<PosedBody> {
    let j = model.joint_count();
    if pose.rotations.len() != j {
        return Err(Error::Dimension(format!(
            "pose has {} joint rotations, model has {j} joints",
            pose.rotations.len()
        )));
    }
    if !pose.is_finite() {
        return Err(Error::Dimension("pose contains non-finite values".into()));
    }
    let shaped = model.shaped_vertices(shape)?;
    let rest_joints = model.regress_joints(&shaped);
    let g = model.joint_transforms(&rest_joints, pose)?;
    // skinning transforms A_j(x) = G_j.rot (x - J_j) + G_j.trans
    let skin: Vec<(Mat3, Vec3)> = g
        .iter()
        .zip(&rest_joints)
        .map(|((r, t), jr)| (*r, t - r * jr))
        .collect();

    let vertices: Vec<Vec3> = shaped
        .iter()
        .enumerate()
        .map(|(vi, p)| {
            let mut r = Mat3::zeros();
            let mut t = Vec3::zeros();
            for (ji, (rj, tj)) in skin.iter().enumerate() {
                let w = model.weight(vi, ji);
                if w != 0.0 {
                    r += rj * w;
                    t += tj * w;
                }
            }
            r * p + t + pose.translation
        })
        .collect();
    let joints = g.iter().map(|(_, t)| t + pose.translation).collect();

    let mut body = PosedBody {
        vertices,
        joints,
        face_centers: Vec::with_capacity(model.face_count()),
        face_normals: Vec::with_capacity(model.face_count()),
        face_rotations: Vec::with_capacity(model.face_count()),
        degenerate_faces: Vec::new(),
    };
    let mut rest_normals: Option<Vec<Vec3>> = None;
    for (fi, f) in model.faces.iter().enumerate() {
        let [a, b, c] = f.map(|i| body.vertices[i as usize]);
        let (center, frame) = face_frame(&a, &b, &c);
        body.face_centers.push(center);
        match frame {
            Some((n, r)) => {
                body.face_normals.push(n);
                body.face_rotations.push(r);
            }
            None => {
                let rest = rest_normals.get_or_insert_with(|| rest_face_normals(model, &shaped));
                body.face_normals.push(rest[fi]);
                body.face_rotations.push(fallback_frame(&rest[fi]));
                body.degenerate_faces.push(fi);
            }
        }
    }
    Ok(body)
}

fn rest_face_normals(model: &BodyModel, shaped: &[Vec3]) -> Vec<Vec3> {
    model
        .faces
        .iter()
        .map(|f| {
            let [a, b, c] = f.map(|i| shaped[i as usize]);
            face_frame(&a, &b, &c).1.map(|(n, _)| n).unwrap_or_else(Vec3::z)
        })
        .collect()
}

/// Loads and validates a body model container.
pub fn load_body_model(path: &Path) -> Result<BodyModel> {
    let c = Container::read(path, BODY_MAGIC)?;
    body_from_container(&c)
}

pub fn save_body_model(model: &BodyModel, path: &Path) -> Result<()> {
    body_to_container(model, "").write(path, BODY_MAGIC)
}

/// Serializes the model arrays, each name prefixed with `prefix`.
pub fn body_to_container(model: &BodyModel, prefix: &str) -> Container {
    let mut c = Container::new();
    body_into_container(model, prefix, &mut c);
    c
}

pub(crate) fn body_into_container(model: &BodyModel, prefix: &str, c: &mut Container) {
    let v = model.vertex_count();
    let j = model.joint_count();
    let name = |s: &str| format!("{prefix}{s}");
    c.push_f64(
        &name("template_vertices"),
        &[v, 3],
        model.template_vertices.iter().flat_map(|p| [p.x, p.y, p.z]).collect(),
    );
    c.push(
        &name("faces"),
        &[model.face_count(), 3],
        ArrayData::U32(model.faces.iter().flatten().copied().collect()),
    );
    c.push_f64(&name("skinning_weights"), &[v, j], model.skinning_weights.clone());
    c.push_f64(&name("joint_regressor"), &[j, v], model.joint_regressor.clone());
    c.push(
        &name("kinematic_parents"),
        &[j],
        ArrayData::I64(
            model
                .kinematic_parents
                .iter()
                .map(|p| p.map_or(-1, |p| p as i64))
                .collect(),
        ),
    );
    if model.shape_count > 0 {
        c.push_f64(
            &name("shape_blendshapes"),
            &[v, 3, model.shape_count],
            model.shape_blendshapes.clone(),
        );
    }
}

pub(crate) fn body_from_container_prefixed(c: &Container, prefix: &str) -> Result<BodyModel> {
    let name = |s: &str| format!("{prefix}{s}");
    let check_shape = |array: &str, shape: &[usize], ndim: usize, last: Option<usize>| {
        if shape.len() != ndim || last.is_some_and(|l| shape[ndim - 1] != l) {
            return Err(Error::validation(array, format!("unexpected shape {shape:?}")));
        }
        Ok(())
    };
    let (vs, verts) = c.f64_array(&name("template_vertices"))?;
    check_shape("template_vertices", &vs, 2, Some(3))?;
    let nv = vs[0];
    let faces_arr = c.require(&name("faces"))?;
    let fshape: Vec<usize> = faces_arr.shape.iter().map(|&d| d as usize).collect();
    check_shape("faces", &fshape, 2, Some(3))?;
    let (_, faces_flat) = c.i64_array(&name("faces"))?;
    if faces_flat.iter().any(|&i| i < 0 || i > u32::MAX as i64) {
        return Err(Error::validation("faces", "negative or oversized vertex index"));
    }
    let (ps, parents) = c.i64_array(&name("kinematic_parents"))?;
    check_shape("kinematic_parents", &ps, 1, None)?;
    let nj = ps[0];
    let (ws, weights) = c.f64_array(&name("skinning_weights"))?;
    if ws != [nv, nj] {
        return Err(Error::validation(
            "skinning_weights",
            format!("shape {ws:?} inconsistent with V={nv}, J={nj}"),
        ));
    }
    let (rs, regressor) = c.f64_array(&name("joint_regressor"))?;
    if rs != [nj, nv] {
        return Err(Error::validation(
            "joint_regressor",
            format!("shape {rs:?} inconsistent with J={nj}, V={nv}"),
        ));
    }
    let (shape_count, blend) = match c.get(&name("shape_blendshapes")) {
        Some(_) => {
            let (bs, b) = c.f64_array(&name("shape_blendshapes"))?;
            if bs.len() != 3 || bs[0] != nv || bs[1] != 3 {
                return Err(Error::validation(
                    "shape_blendshapes",
                    format!("shape {bs:?} inconsistent with V={nv}"),
                ));
            }
            (bs[2], b)
        }
        None => (0, Vec::new()),
    };
    let kinematic_parents = parents
        .iter()
        .map(|&p| {
            if p < 0 {
                Ok(None)
            } else if (p as usize) < nj {
                Ok(Some(p as usize))
            } else {
                Err(Error::validation("kinematic_parents", format!("parent {p} out of range")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let model = BodyModel {
        template_vertices: verts.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect(),
        faces: faces_flat
            .chunks_exact(3)
            .map(|c| [c[0] as u32, c[1] as u32, c[2] as u32])
            .collect(),
        skinning_weights: weights,
        joint_regressor: regressor,
        kinematic_parents,
        shape_blendshapes: blend,
        shape_count,
    };
    model.validate()?;
    Ok(model)
}

fn body_from_container(c: &Container) -> Result<BodyModel> {
    body_from_container_prefixed(c, "")
}

/// Rings along each tube of the synthetic figure.
pub const SYNTHETIC_RINGS: usize = 4;

/// Vertex and face counts of [`make_synthetic_body`]:
/// every joint owns one capped tube with `SYNTHETIC_RINGS` rings of
/// `segments` vertices plus two cap centers, so
/// `V = J (R S + 2)` and `F = 2 J R S`.
pub fn synthetic_body_counts(joints: usize, segments: usize) -> (usize, usize) {
    let r = SYNTHETIC_RINGS;
    (joints * (r * segments + 2), 2 * joints * r * segments)
}

struct Limb {
    origin: Vec3,
    dir: Vec3,
    length: f64,
    radius: f64,
}

/// Deterministic articulated tube figure standing on the origin.
///
/// Joint 0 is the pelvis and owns the torso tube. Further joints are
/// dealt onto five chains (head, left leg, right leg, left arm, right arm
/// on the first round; legs, arms and head afterwards), each new joint
/// continuing its chain. With `joints = 2` the figure is a straight
/// two-bone cylinder. Each tube blends smoothly into its parent joint over
/// its first half; the root tube is rigidly bound. One shape coefficient
/// inflates every tube radially by 2 cm per unit.
pub fn make_synthetic_body(joints: usize, segments: usize) -> BodyModel {
    assert!(joints >= 2, "synthetic body needs at least two joints");
    assert!(segments >= 3, "synthetic body needs at least three segments");

    // (start, dir, length, radius) for the first joint of each chain
    let chains = [
        (Vec3::new(0.0, 0.55, 0.0), Vec3::y(), 0.25, 0.11),
        (Vec3::new(-0.09, 0.0, 0.0), -Vec3::y(), 0.40, 0.08),
        (Vec3::new(0.09, 0.0, 0.0), -Vec3::y(), 0.40, 0.08),
        (Vec3::new(-0.12, 0.48, 0.0), -Vec3::x(), 0.30, 0.065),
        (Vec3::new(0.12, 0.48, 0.0), Vec3::x(), 0.30, 0.065),
    ];
    let later_rounds = [1usize, 2, 3, 4, 0];

    let mut parents: Vec<Option<usize>> = vec![None];
    let mut limbs = vec![Limb {
        origin: Vec3::zeros(),
        dir: Vec3::y(),
        length: 0.55,
        radius: 0.14,
    }];
    let mut chain_tail: [Option<usize>; 5] = [None; 5];
    for j in 1..joints {
        let k = j - 1;
        let chain = if k < 5 { k } else { later_rounds[(k - 5) % 5] };
        let (start, dir, length, radius) = chains[chain];
        let (origin, parent) = match chain_tail[chain] {
            None => (start, 0),
            Some(t) => (limbs[t].origin + limbs[t].dir * limbs[t].length, t),
        };
        parents.push(Some(parent));
        limbs.push(Limb {
            origin,
            dir,
            length,
            radius: radius * if chain_tail[chain].is_some() { 0.9 } else { 1.0 },
        });
        chain_tail[chain] = Some(j);
    }

    let s = segments;
    let r = SYNTHETIC_RINGS;
    let per_tube = r * s + 2;
    let (nv, nf) = synthetic_body_counts(joints, segments);
    let mut verts = Vec::with_capacity(nv);
    let mut blend = Vec::with_capacity(nv * 3);
    let mut weights = vec![0.0; nv * joints];
    let mut regressor = vec![0.0; joints * nv];
    let mut faces = Vec::with_capacity(nf);

    let smoothstep = |e0: f64, e1: f64, x: f64| {
        let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
        t * t * (3.0 - 2.0 * t)
    };

    for (j, limb) in limbs.iter().enumerate() {
        let base = j * per_tube;
        let a = limb.dir;
        let helper = if a.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
        let u = helper.cross(&a).normalize();
        let v = a.cross(&u);
        let mut push_vertex = |p: Vec3, radial: Vec3, h: f64, verts: &mut Vec<Vec3>| {
            let vi = verts.len();
            verts.push(p);
            blend.extend_from_slice(&[radial.x * 0.02, radial.y * 0.02, radial.z * 0.02]);
            match parents[j] {
                Some(p) => {
                    let wp = 0.5 * (1.0 - smoothstep(0.0, 0.5, h));
                    weights[vi * joints + p] = wp;
                    weights[vi * joints + j] = 1.0 - wp;
                }
                None => weights[vi * joints + j] = 1.0,
            }
        };
        for k in 0..r {
            let h = k as f64 / (r - 1) as f64;
            for si in 0..s {
                let phi = 2.0 * std::f64::consts::PI * si as f64 / s as f64;
                let radial = u * phi.cos() + v * phi.sin();
                let p = limb.origin + a * (limb.length * h) + radial * limb.radius;
                push_vertex(p, radial, h, &mut verts);
            }
        }
        push_vertex(limb.origin, Vec3::zeros(), 0.0, &mut verts);
        push_vertex(limb.origin + a * limb.length, Vec3::zeros(), 1.0, &mut verts);

        for si in 0..s {
            regressor[j * nv + base + si] = 1.0 / s as f64;
        }
        let idx = |k: usize, si: usize| (base + k * s + (si % s)) as u32;
        let c0 = (base + r * s) as u32;
        let c1 = c0 + 1;
        for k in 0..r - 1 {
            for si in 0..s {
                faces.push([idx(k, si), idx(k, si + 1), idx(k + 1, si)]);
                faces.push([idx(k, si + 1), idx(k + 1, si + 1), idx(k + 1, si)]);
            }
        }
        for si in 0..s {
            faces.push([c0, idx(0, si + 1), idx(0, si)]);
            faces.push([c1, idx(r - 1, si), idx(r - 1, si + 1)]);
        }
    }
    debug_assert_eq!(verts.len(), nv);
    debug_assert_eq!(faces.len(), nf);

    BodyModel {
        template_vertices: verts,
        faces,
        skinning_weights: weights,
        joint_regressor: regressor,
        kinematic_parents: parents,
        shape_blendshapes: blend,
        shape_count: 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::is_rotation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng, joints: usize, amp: f64) -> PoseParams {
        PoseParams {
            rotations: (0..joints)
                .map(|_| {
                    Vec3::new(
                        rng.random_range(-amp..amp),
                        rng.random_range(-amp..amp),
                        rng.random_range(-amp..amp),
                    )
                })
                .collect(),
            translation: Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ),
        }
    }

    #[test]
    fn two_joint_cylinder_is_valid() {
        let m = make_synthetic_body(2, 8);
        m.validate().unwrap();
        assert_eq!(m.joint_count(), 2);
        for row in m.skinning_weights.chunks_exact(2) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(m, make_synthetic_body(2, 8));
    }

    #[test]
    fn counts_match_enumeration() {
        let m = make_synthetic_body(8, 16);
        let (v, f) = synthetic_body_counts(8, 16);
        assert_eq!((m.vertex_count(), m.face_count()), (v, f));
        // every vertex is referenced by some face, no duplicated faces
        let mut used = vec![false; m.vertex_count()];
        for f in &m.faces {
            for &i in f {
                used[i as usize] = true;
            }
        }
        assert!(used.iter().all(|&u| u));
        let mut sorted: Vec<[u32; 3]> = m
            .faces
            .iter()
            .map(|f| {
                let mut s = *f;
                s.sort();
                s
            })
            .collect();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), f);
    }

    #[test]
    fn canonical_pose_is_identity() {
        let m = make_synthetic_body(8, 12);
        let shape = ShapeParams { betas: vec![0.5] };
        let posed = pose_body(&m, &shape, &PoseParams::canonical(8)).unwrap();
        let shaped = m.shaped_vertices(&shape).unwrap();
        for (a, b) in posed.vertices.iter().zip(&shaped) {
            assert!((a - b).norm() < 1e-12);
        }
        assert!(posed.degenerate_faces.is_empty());
    }

    #[test]
    fn root_rotation_is_rigid_motion() {
        let m = make_synthetic_body(8, 12);
        let shape = ShapeParams::default();
        let canon = pose_body(&m, &shape, &PoseParams::canonical(8)).unwrap();
        let mut pose = PoseParams::canonical(8);
        pose.rotations[0] = Vec3::new(0.3, -1.1, 0.4);
        pose.translation = Vec3::new(0.2, 0.5, -1.0);
        let posed = pose_body(&m, &shape, &pose).unwrap();
        let r0 = axis_angle_to_mat(&pose.rotations[0]);
        // root joint sits at the origin, so the motion is x -> R0 x + t
        for (a, b) in posed.vertices.iter().zip(&canon.vertices) {
            assert!((a - (r0 * b + pose.translation)).norm() < 1e-9);
        }
        for (a, b) in posed.joints.iter().zip(&canon.joints) {
            assert!((a - (r0 * b + pose.translation)).norm() < 1e-9);
        }
        for (a, b) in posed.face_normals.iter().zip(&canon.face_normals) {
            assert!((a - r0 * b).norm() < 1e-9);
        }
    }

    #[test]
    fn face_geometry_invariants_under_random_poses() {
        let m = make_synthetic_body(8, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let pose = random_pose(&mut rng, 8, 1.0);
            let posed = pose_body(&m, &ShapeParams::default(), &pose).unwrap();
            for (n, r) in posed.face_normals.iter().zip(&posed.face_rotations) {
                assert!((n.norm() - 1.0).abs() < 1e-6);
                assert!(is_rotation(r, 1e-6));
                assert!((r.column(2) - n).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn unrotated_child_keeps_rest_position() {
        let m = make_synthetic_body(8, 8);
        let rest = m.regress_joints(&m.template_vertices);
        let mut pose = PoseParams::canonical(8);
        // rotate the head chain only; legs keep their rest joints
        pose.rotations[1] = Vec3::new(0.5, 0.0, 0.2);
        let posed = pose_body(&m, &ShapeParams::default(), &pose).unwrap();
        for j in [2, 3, 6, 7] {
            assert!((posed.joints[j] - rest[j]).norm() < 1e-12, "joint {j}");
        }
    }

    #[test]
    fn degenerate_face_is_flagged() {
        let mut m = make_synthetic_body(2, 4);
        let [a, _, _] = m.faces[0];
        m.faces[0] = [a, a, a];
        let posed = pose_body(&m, &ShapeParams::default(), &PoseParams::canonical(2)).unwrap();
        assert_eq!(posed.degenerate_faces, vec![0]);
        assert!((posed.face_normals[0].norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn validation_catches_bad_weights_and_cycles() {
        let mut m = make_synthetic_body(2, 4);
        m.skinning_weights[0] = 0.8;
        m.skinning_weights[1] = 0.0;
        assert!(matches!(m.validate(), Err(Error::Validation { .. })));

        let mut m = make_synthetic_body(3, 4);
        m.kinematic_parents = vec![None, Some(2), Some(1)];
        assert!(m.validate().is_err());
    }

    #[test]
    fn pose_length_mismatch_is_an_error() {
        let m = make_synthetic_body(2, 4);
        assert!(pose_body(&m, &ShapeParams::default(), &PoseParams::canonical(3)).is_err());
    }
}
