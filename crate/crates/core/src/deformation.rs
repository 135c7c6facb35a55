//! Per-face rigid deformation of Gaussians, residual application, SH
//! direction fields and parent reassignment.
//!
//! A per-Gaussian residual `(R_r, t_r)` acts locally: the center moves by
//! `t_r` and the orientation is pre-multiplied by `R_r`, i.e. the Gaussian
//! rotates about its own center.

use std::collections::HashMap;

use nalgebra::Matrix3;
use rayon::prelude::*;

use crate::body_model::PosedBody;
use crate::error::{Error, Result};
use crate::gaussian_cloud::{GaussianCloud, ParentId};
use crate::math::{normalize_or, quat_conj, quat_mul, Mat3, RigidTransform, Vec3};

/// One rigid transform per body face, plus faces whose fit fell back.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceTransformSet {
    pub transforms: Vec<RigidTransform>,
    pub degenerate: Vec<usize>,
}

impl FaceTransformSet {
    pub fn identity(face_count: usize) -> Self {
        Self {
            transforms: vec![RigidTransform::identity(); face_count],
            degenerate: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.transforms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }
}

/// Least-squares rigid transform mapping `src` onto `dst` (centroid-subtracted
/// SVD with reflection correction).
pub fn kabsch(src: &[Vec3], dst: &[Vec3]) -> RigidTransform {
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vec3>() / n;
    let cd = dst.iter().sum::<Vec3>() / n;
    let mut h = Matrix3::zeros();
    for (p, q) in src.iter().zip(dst) {
        h += (p - cs) * (q - cd).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let d = (v_t.transpose() * u.transpose()).determinant().signum();
    let fix = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d));
    let r = v_t.transpose() * fix * u.transpose();
    RigidTransform::new(r, cd - r * cs)
}

fn face_points(body: &PosedBody, faces: &[[u32; 3]], f: usize) -> [Vec3; 4] {
    let [a, b, c] = body.face_vertices(faces, f);
    [a, b, c, body.face_centers[f] + body.face_normals[f]]
}

/// Per-face rigid alignment from the canonical mesh to a posed mesh.
pub fn compute_pvd(faces: &[[u32; 3]], canonical: &PosedBody, posed: &PosedBody) -> Result<FaceTransformSet> {
    let f = faces.len();
    if canonical.face_count() != f || posed.face_count() != f {
        return Err(Error::Dimension(format!(
            "face count mismatch: {} faces, canonical {}, posed {}",
            f,
            canonical.face_count(),
            posed.face_count()
        )));
    }
    let mut bad = vec![false; f];
    for &i in canonical.degenerate_faces.iter().chain(&posed.degenerate_faces) {
        bad[i] = true;
    }
    let transforms = (0..f)
        .into_par_iter()
        .map(|i| {
            if bad[i] {
                RigidTransform::new(
                    Mat3::identity(),
                    posed.face_centers[i] - canonical.face_centers[i],
                )
            } else {
                kabsch(&face_points(canonical, faces, i), &face_points(posed, faces, i))
            }
        })
        .collect();
    Ok(FaceTransformSet {
        transforms,
        degenerate: (0..f).filter(|&i| bad[i]).collect(),
    })
}

fn parent_face(cloud: &GaussianCloud, i: usize, f: usize) -> Result<Option<usize>> {
    match cloud.parents[i] {
        ParentId::Background => Ok(None),
        ParentId::Face(k) if (k as usize) < f => Ok(Some(k as usize)),
        ParentId::Face(k) => Err(Error::Contract(format!(
            "gaussian {i} has parent face {k}, body has {f} faces"
        ))),
    }
}

/// Moves human Gaussians by their parent face's transform. Background
/// Gaussians are left untouched.
pub fn pose_gaussians(cloud: &GaussianCloud, t_set: &FaceTransformSet) -> Result<GaussianCloud> {
    let mut out = cloud.clone();
    let quats: Vec<_> = t_set.transforms.iter().map(|t| t.rotation_quat()).collect();
    for i in 0..cloud.len() {
        if let Some(k) = parent_face(cloud, i, t_set.len())? {
            out.centers[i] = t_set.transforms[k].apply(&cloud.centers[i]);
            out.rotations[i] = quat_mul(&quats[k], &cloud.rotations[i]);
        }
    }
    Ok(out)
}

fn check_residuals(cloud: &GaussianCloud, r_set: &[RigidTransform]) -> Result<Vec<usize>> {
    let human = cloud.human_indices();
    if human.len() != r_set.len() {
        return Err(Error::Dimension(format!(
            "{} residuals for {} human gaussians",
            r_set.len(),
            human.len()
        )));
    }
    Ok(human)
}

/// Applies per-Gaussian residuals, `r_set[k]` belonging to the k-th human
/// Gaussian.
pub fn apply_residuals(cloud: &GaussianCloud, r_set: &[RigidTransform]) -> Result<GaussianCloud> {
    let human = check_residuals(cloud, r_set)?;
    let mut out = cloud.clone();
    for (r, &i) in r_set.iter().zip(&human) {
        out.centers[i] = cloud.centers[i] + r.translation;
        out.rotations[i] = quat_mul(&r.rotation_quat(), &cloud.rotations[i]);
    }
    Ok(out)
}

/// Inverse of `apply_residuals` followed by the inverse face transforms.
pub fn unpose_gaussians(
    cloud: &GaussianCloud,
    t_set: &FaceTransformSet,
    r_set: &[RigidTransform],
) -> Result<GaussianCloud> {
    let human = check_residuals(cloud, r_set)?;
    let mut out = cloud.clone();
    let inv: Vec<_> = t_set.transforms.iter().map(|t| t.inverse()).collect();
    let quats: Vec<_> = t_set.transforms.iter().map(|t| t.rotation_quat()).collect();
    for (r, &i) in r_set.iter().zip(&human) {
        let k = parent_face(cloud, i, t_set.len())?.expect("human gaussian");
        let p = cloud.centers[i] - r.translation;
        let q = quat_mul(&quat_conj(&r.rotation_quat()), &cloud.rotations[i]);
        out.centers[i] = inv[k].apply(&p);
        out.rotations[i] = quat_mul(&quat_conj(&quats[k]), &q);
    }
    Ok(out)
}

/// Unit vectors from each Gaussian toward the camera center, and the indices
/// that fell back to +z because the center coincided with the camera.
pub fn relative_sh_directions(cloud: &GaussianCloud, camera_center: &Vec3) -> (Vec<Vec3>, Vec<usize>) {
    let mut flagged = Vec::new();
    let dirs = cloud
        .centers
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let (d, ok) = normalize_or(&(camera_center - p), Vec3::z());
            if !ok {
                flagged.push(i);
            }
            d
        })
        .collect();
    (dirs, flagged)
}

/// Canonical normals rotated by the face and residual rotations, one per
/// human Gaussian in cloud order.
pub fn corrected_sh_directions(
    cloud: &GaussianCloud,
    t_set: &FaceTransformSet,
    r_set: &[RigidTransform],
) -> Result<Vec<Vec3>> {
    let human = check_residuals(cloud, r_set)?;
    human
        .iter()
        .zip(r_set)
        .map(|(&i, r)| {
            let n = cloud.canonical_normals[i];
            if (n.norm() - 1.0).abs() > 1e-6 {
                return Err(Error::Contract(format!("gaussian {i} has no unit canonical normal")));
            }
            let k = parent_face(cloud, i, t_set.len())?.expect("human gaussian");
            Ok(r.rotation * (t_set.transforms[k].rotation * n))
        })
        .collect()
}

/// Direction field for a posed cloud: corrected normals for human Gaussians,
/// camera-relative directions for the background.
pub fn mixed_sh_directions(
    posed: &GaussianCloud,
    t_set: &FaceTransformSet,
    r_set: &[RigidTransform],
    camera_center: &Vec3,
) -> Result<Vec<Vec3>> {
    let (mut dirs, _) = relative_sh_directions(posed, camera_center);
    let corrected = corrected_sh_directions(posed, t_set, r_set)?;
    for (i, d) in posed.human_indices().into_iter().zip(corrected) {
        dirs[i] = d;
    }
    Ok(dirs)
}

/// Squared distance from `p` to the triangle `(a, b, c)`.
pub fn point_triangle_distance_sq(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return ap.norm_squared();
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return bp.norm_squared();
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (p - (a + ab * v)).norm_squared();
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return cp.norm_squared();
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (p - (a + ac * w)).norm_squared();
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (p - (b + (c - b) * w)).norm_squared();
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (p - (a + ab * v + ac * w)).norm_squared()
}

/// Uniform hash grid over face bounding boxes grown by a search radius.
pub struct FaceGrid {
    cell: f64,
    cells: HashMap<(i64, i64, i64), Vec<u32>>,
}

impl FaceGrid {
    pub fn build(tris: &[[Vec3; 3]], radius: f64) -> Self {
        let mean_extent = if tris.is_empty() {
            1.0
        } else {
            tris.iter()
                .map(|t| {
                    let lo = t[0].inf(&t[1]).inf(&t[2]);
                    let hi = t[0].sup(&t[1]).sup(&t[2]);
                    (hi - lo).max()
                })
                .sum::<f64>()
                / tris.len() as f64
        };
        let cell = radius.max(mean_extent).max(1e-6);
        let mut cells: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::new();
        for (f, t) in tris.iter().enumerate() {
            let lo = t[0].inf(&t[1]).inf(&t[2]).add_scalar(-radius);
            let hi = t[0].sup(&t[1]).sup(&t[2]).add_scalar(radius);
            let k0 = Self::key(&lo, cell);
            let k1 = Self::key(&hi, cell);
            for x in k0.0..=k1.0 {
                for y in k0.1..=k1.1 {
                    for z in k0.2..=k1.2 {
                        cells.entry((x, y, z)).or_default().push(f as u32);
                    }
                }
            }
        }
        Self { cell, cells }
    }

    fn key(p: &Vec3, cell: f64) -> (i64, i64, i64) {
        (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        )
    }

    /// Faces whose grown bounding box may contain `p`, ascending.
    pub fn candidates(&self, p: &Vec3) -> &[u32] {
        self.cells
            .get(&Self::key(p, self.cell))
            .map_or(&[], |v| v.as_slice())
    }
}

/// Nearest face within `tau` of every human Gaussian (canonical space).
/// Gaussians farther than `tau` from the surface become background; the
/// background never becomes human again. Canonical normals follow the new
/// parent face.
pub fn reassign_parents(
    cloud: &GaussianCloud,
    faces: &[[u32; 3]],
    canonical: &PosedBody,
    tau: f64,
) -> GaussianCloud {
    let tris: Vec<[Vec3; 3]> = (0..faces.len())
        .map(|f| canonical.face_vertices(faces, f))
        .collect();
    let grid = FaceGrid::build(&tris, tau);
    let tau_sq = tau * tau;
    let parents: Vec<ParentId> = (0..cloud.len())
        .into_par_iter()
        .map(|i| {
            if !cloud.parents[i].is_human() {
                return ParentId::Background;
            }
            let p = &cloud.centers[i];
            let mut best: Option<(f64, u32)> = None;
            for &f in grid.candidates(p) {
                let [a, b, c] = &tris[f as usize];
                let d = point_triangle_distance_sq(p, a, b, c);
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, f));
                }
            }
            match best {
                Some((d, f)) if d <= tau_sq => ParentId::Face(f),
                _ => ParentId::Background,
            }
        })
        .collect();
    let mut out = cloud.clone();
    for (i, p) in parents.into_iter().enumerate() {
        if let ParentId::Face(f) = p {
            out.canonical_normals[i] = canonical.face_normals[f as usize];
        }
        out.parents[i] = p;
    }
    out
}

/// Face-parented Gaussians only, in order.
pub fn filter_background(cloud: &GaussianCloud) -> GaussianCloud {
    cloud.filter_background()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body_model::{make_synthetic_body, pose_body, PoseParams, ShapeParams};
    use crate::gaussian_cloud::init_human_gaussians;
    use crate::math::{axis_angle_to_mat, quat_dot, quat_normalize};

    fn setup() -> (crate::body_model::BodyModel, PosedBody) {
        let m = make_synthetic_body(2, 8);
        let c = pose_body(&m, &ShapeParams::default(), &PoseParams::canonical(2)).unwrap();
        (m, c)
    }

    #[test]
    fn self_alignment_is_identity() {
        let (m, c) = setup();
        let set = compute_pvd(&m.faces, &c, &c).unwrap();
        for t in &set.transforms {
            assert!((t.rotation - Mat3::identity()).abs().max() < 1e-12);
            assert!(t.translation.norm() < 1e-12);
        }
    }

    #[test]
    fn global_rigid_motion_is_recovered() {
        let (m, c) = setup();
        let mut pose = PoseParams::canonical(2);
        pose.rotations[0] = Vec3::new(0.3, -1.1, 0.4);
        pose.translation = Vec3::new(0.2, 0.5, -1.0);
        let p = pose_body(&m, &ShapeParams::default(), &pose).unwrap();
        let r0 = axis_angle_to_mat(&pose.rotations[0]);
        let set = compute_pvd(&m.faces, &c, &p).unwrap();
        for (f, t) in set.transforms.iter().enumerate() {
            assert!((t.rotation - r0).abs().max() < 1e-9);
            let cv = c.face_vertices(&m.faces, f);
            let pv = p.face_vertices(&m.faces, f);
            for k in 0..3 {
                assert!((t.apply(&cv[k]) - pv[k]).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn kabsch_never_reflects() {
        let src = [Vec3::x(), Vec3::y(), Vec3::zeros(), Vec3::z()];
        let dst = [Vec3::x(), Vec3::y(), Vec3::zeros(), -Vec3::z()];
        let t = kabsch(&src, &dst);
        assert!((t.rotation.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pose_then_unpose_restores_cloud() {
        let (m, c) = setup();
        let cloud = init_human_gaussians(&m, &c, 1, None);
        let mut pose = PoseParams::canonical(2);
        pose.rotations[1] = Vec3::new(0.0, 0.0, 0.9);
        let p = pose_body(&m, &ShapeParams::default(), &pose).unwrap();
        let set = compute_pvd(&m.faces, &c, &p).unwrap();
        let r: Vec<_> = (0..cloud.len())
            .map(|i| RigidTransform::new(axis_angle_to_mat(&Vec3::new(0.1, 0.02 * i as f64, -0.2)), Vec3::new(0.01, 0.0, -0.03)))
            .collect();
        let posed = apply_residuals(&pose_gaussians(&cloud, &set).unwrap(), &r).unwrap();
        let back = unpose_gaussians(&posed, &set, &r).unwrap();
        for i in 0..cloud.len() {
            assert!((back.centers[i] - cloud.centers[i]).norm() < 1e-9);
            let d = quat_dot(&quat_normalize(&back.rotations[i]), &quat_normalize(&cloud.rotations[i]));
            assert!(d.abs() > 1.0 - 1e-12);
        }
    }

    #[test]
    fn identity_set_leaves_cloud_bit_exact() {
        let (m, c) = setup();
        let cloud = init_human_gaussians(&m, &c, 0, None);
        let posed = pose_gaussians(&cloud, &FaceTransformSet::identity(m.faces.len())).unwrap();
        assert_eq!(posed, cloud);
    }

    #[test]
    fn corrected_direction_rotates_normal() {
        let mut cloud = GaussianCloud::empty(0);
        cloud.centers.push(Vec3::zeros());
        cloud.rotations.push([1.0, 0.0, 0.0, 0.0]);
        cloud.log_scales.push(Vec3::zeros());
        cloud.opacity_logits.push(0.0);
        cloud.sh.extend([0.0; 3]);
        cloud.parents.push(ParentId::Face(0));
        cloud.canonical_normals.push(Vec3::x());
        let set = FaceTransformSet {
            transforms: vec![RigidTransform::new(
                axis_angle_to_mat(&Vec3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2)),
                Vec3::zeros(),
            )],
            degenerate: vec![],
        };
        let d = corrected_sh_directions(&cloud, &set, &[RigidTransform::identity()]).unwrap();
        assert!((d[0] - Vec3::y()).norm() < 1e-9);
    }

    #[test]
    fn relative_direction_and_fallback() {
        let mut cloud = GaussianCloud::empty(0);
        for p in [Vec3::zeros(), Vec3::new(0.0, 0.0, 1.0)] {
            cloud.centers.push(p);
            cloud.rotations.push([1.0, 0.0, 0.0, 0.0]);
            cloud.log_scales.push(Vec3::zeros());
            cloud.opacity_logits.push(0.0);
            cloud.sh.extend([0.0; 3]);
            cloud.parents.push(ParentId::Background);
            cloud.canonical_normals.push(Vec3::zeros());
        }
        let (d, flagged) = relative_sh_directions(&cloud, &Vec3::new(0.0, 0.0, 1.0));
        assert!((d[0] - Vec3::z()).norm() < 1e-15);
        assert_eq!(flagged, vec![1]);
    }

    #[test]
    fn gaussian_at_centroid_keeps_its_face() {
        let (m, c) = setup();
        let cloud = init_human_gaussians(&m, &c, 0, None);
        let re = reassign_parents(&cloud, &m.faces, &c, 0.1);
        // joint caps of neighbouring tubes are coplanar, so a centroid may
        // also lie on another face; it must still be at distance zero
        for (i, p) in re.parents.iter().enumerate() {
            let [a, b, cc] = c.face_vertices(&m.faces, p.face().unwrap());
            assert!(point_triangle_distance_sq(&cloud.centers[i], &a, &b, &cc) < 1e-24);
        }
        assert_eq!(re.parents[0], ParentId::Face(0));
    }

    #[test]
    fn far_gaussian_becomes_background() {
        let (m, c) = setup();
        let mut cloud = init_human_gaussians(&m, &c, 0, None);
        cloud.centers[0] = c.face_centers[0] + c.face_normals[0] * 0.15;
        let re = reassign_parents(&cloud, &m.faces, &c, 0.10);
        assert_eq!(re.parents[0], ParentId::Background);
        let back = reassign_parents(&GaussianCloud { centers: c.face_centers.clone(), ..re.clone() }, &m.faces, &c, 0.10);
        assert_eq!(back.parents[0], ParentId::Background);
    }

    #[test]
    fn triangle_distance_regions() {
        let (a, b, c) = (Vec3::zeros(), Vec3::x(), Vec3::y());
        assert!((point_triangle_distance_sq(&Vec3::new(0.2, 0.2, 0.5), &a, &b, &c) - 0.25).abs() < 1e-15);
        assert!((point_triangle_distance_sq(&Vec3::new(-1.0, -1.0, 0.0), &a, &b, &c) - 2.0).abs() < 1e-15);
        assert!((point_triangle_distance_sq(&Vec3::new(0.5, -2.0, 0.0), &a, &b, &c) - 4.0).abs() < 1e-15);
        assert!((point_triangle_distance_sq(&Vec3::new(1.0, 1.0, 0.0), &a, &b, &c) - 0.5).abs() < 1e-15);
    }
}
