//! The posing chain shared by training and inference: body posing, per-face
//! rigid deformation, residual refinement, SH directions and rendering.

use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::body_model::{pose_body, BodyModel, PoseParams, PosedBody, ShapeParams};
use crate::deformation::{compute_pvd, FaceTransformSet};
use crate::drm::{encode_joint_distances, residual_quats, DrmCache, DrmNetwork};
use crate::error::{Error, Result};
use crate::gaussian_cloud::GaussianCloud;
use crate::math::{normalize_or, quat_mul, quat_to_mat, Quat, RigidTransform, Vec3};
use crate::rasterizer::{rasterize_forward, save_rgb_png, Camera, RasterSettings, RenderOutput};

/// A trained avatar: body, canonical Gaussians and residual network.
#[derive(Debug, Clone)]
pub struct Avatar {
    pub body: BodyModel,
    pub shape: ShapeParams,
    pub canonical: PosedBody,
    pub cloud: GaussianCloud,
    pub drm: DrmNetwork,
}

/// Intermediate values of one posing pass.
#[derive(Debug, Clone)]
pub struct Posed {
    pub body: PosedBody,
    pub t_set: FaceTransformSet,
    /// Face rotation as quaternion, per face.
    pub face_quats: Vec<Quat>,
    /// Indices of human Gaussians in cloud order.
    pub human: Vec<usize>,
    /// Cloud after the per-face transforms only.
    pub rigid: GaussianCloud,
    pub encoding: DMatrix<f64>,
    pub raw: DMatrix<f64>,
    pub drm_cache: DrmCache,
    /// `(translation, rotation)` per human Gaussian.
    pub residuals: Vec<(Vec3, Quat)>,
    /// Face-rotated canonical normal per human Gaussian.
    pub rotated_normals: Vec<Vec3>,
    pub cloud: GaussianCloud,
    pub directions: Vec<Vec3>,
}

impl Posed {
    pub fn residual_transforms(&self) -> Vec<RigidTransform> {
        self.residuals
            .iter()
            .map(|(t, q)| RigidTransform::new(quat_to_mat(q), *t))
            .collect()
    }
}

impl Avatar {
    pub fn new(body: BodyModel, shape: ShapeParams, cloud: GaussianCloud, drm: DrmNetwork) -> Result<Self> {
        let canonical = pose_body(&body, &shape, &PoseParams::canonical(body.joint_count()))?;
        if drm.joint_count() != body.joint_count() {
            return Err(Error::Dimension(format!(
                "network expects {} joints, body has {}",
                drm.joint_count(),
                body.joint_count()
            )));
        }
        Ok(Self { body, shape, canonical, cloud, drm })
    }

    /// Steps 1-2: pose the mesh and fit the per-face transforms.
    pub fn body_stage(&self, pose: &PoseParams) -> Result<(PosedBody, FaceTransformSet)> {
        let posed = pose_body(&self.body, &self.shape, pose)?;
        let t_set = compute_pvd(&self.body.faces, &self.canonical, &posed)?;
        Ok((posed, t_set))
    }

    /// Full chain for `cloud` (a subset or the whole avatar cloud).
    pub fn pose_cloud(&self, cloud: &GaussianCloud, pose: &PoseParams, camera_center: &Vec3) -> Result<Posed> {
        let (body, t_set) = self.body_stage(pose)?;
        let face_quats: Vec<Quat> = t_set.transforms.iter().map(|t| t.rotation_quat()).collect();
        let (human, rigid) = rigid_stage(cloud, &t_set, &face_quats)?;
        let (encoding, raw, drm_cache, residuals) = self.drm_stage(&rigid, &human, &body)?;
        let (cloud, directions, rotated_normals) =
            residual_stage(&rigid, &human, &residuals, &t_set, camera_center);
        Ok(Posed {
            body,
            t_set,
            face_quats,
            human,
            rigid,
            encoding,
            raw,
            drm_cache,
            residuals,
            rotated_normals,
            cloud,
            directions,
        })
    }

    fn drm_stage(
        &self,
        rigid: &GaussianCloud,
        human: &[usize],
        body: &PosedBody,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>, DrmCache, Vec<(Vec3, Quat)>)> {
        let positions: Vec<Vec3> = human.iter().map(|&i| rigid.centers[i]).collect();
        let encoding = encode_joint_distances(&positions, &body.joints);
        let (raw, cache) = self.drm.forward(&encoding)?;
        let residuals = residual_quats(&raw, &self.drm.bounds);
        Ok((encoding, raw, cache, residuals))
    }

    /// Renders the avatar in `pose`; background Gaussians are dropped unless
    /// `keep_background`.
    pub fn render(
        &self,
        pose: &PoseParams,
        camera: &Camera,
        settings: &RasterSettings,
        keep_background: bool,
    ) -> Result<RenderOutput> {
        let cloud = if keep_background {
            self.cloud.clone()
        } else {
            self.cloud.filter_background()
        };
        let posed = self.pose_cloud(&cloud, pose, &camera.center())?;
        rasterize_forward(&posed.cloud, camera, &posed.directions, settings)
    }

    /// Renders with per-stage wall-clock timing, optionally saving the image.
    pub fn render_timed(
        &self,
        pose: &PoseParams,
        camera: &Camera,
        settings: &RasterSettings,
        keep_background: bool,
        save_to: Option<&Path>,
    ) -> Result<(RenderOutput, StageTimes)> {
        let cloud = if keep_background {
            self.cloud.clone()
        } else {
            self.cloud.filter_background()
        };
        let center = camera.center();
        let t0 = Instant::now();
        let (body, t_set) = self.body_stage(pose)?;
        let face_quats: Vec<Quat> = t_set.transforms.iter().map(|t| t.rotation_quat()).collect();
        let t1 = Instant::now();
        let (human, rigid) = rigid_stage(&cloud, &t_set, &face_quats)?;
        let t2 = Instant::now();
        let (_, _, _, residuals) = self.drm_stage(&rigid, &human, &body)?;
        let t3 = Instant::now();
        let (posed, dirs, _) = residual_stage(&rigid, &human, &residuals, &t_set, &center);
        let t4 = Instant::now();
        let out = rasterize_forward(&posed, camera, &dirs, settings)?;
        let t5 = Instant::now();
        if let Some(p) = save_to {
            save_rgb_png(p, out.width, out.height, &out.rgb)?;
        }
        let t6 = Instant::now();
        let secs = |a: Instant, b: Instant| (b - a).as_secs_f64();
        Ok((
            out,
            StageTimes {
                pvd: secs(t0, t1),
                posing: secs(t1, t2),
                drm: secs(t2, t3),
                residual_posing: secs(t3, t4),
                rendering: secs(t4, t5),
                image_save: secs(t5, t6),
            },
        ))
    }
}

/// Per-face rigid posing; returns the human indices and the posed cloud.
pub(crate) fn rigid_stage(
    cloud: &GaussianCloud,
    t_set: &FaceTransformSet,
    face_quats: &[Quat],
) -> Result<(Vec<usize>, GaussianCloud)> {
    let f = t_set.len();
    let mut out = cloud.clone();
    let mut human = Vec::new();
    for i in 0..cloud.len() {
        if let Some(k) = cloud.parents[i].face() {
            if k >= f {
                return Err(Error::Contract(format!("gaussian {i} has parent face {k}, body has {f} faces")));
            }
            out.centers[i] = t_set.transforms[k].apply(&cloud.centers[i]);
            out.rotations[i] = quat_mul(&face_quats[k], &cloud.rotations[i]);
            human.push(i);
        }
    }
    Ok((human, out))
}

/// Applies residuals and builds the direction field.
pub(crate) fn residual_stage(
    rigid: &GaussianCloud,
    human: &[usize],
    residuals: &[(Vec3, Quat)],
    t_set: &FaceTransformSet,
    camera_center: &Vec3,
) -> (GaussianCloud, Vec<Vec3>, Vec<Vec3>) {
    let mut out = rigid.clone();
    let mut dirs: Vec<Vec3> = rigid
        .centers
        .iter()
        .map(|p| normalize_or(&(camera_center - p), Vec3::z()).0)
        .collect();
    let mut rotated = Vec::with_capacity(human.len());
    for (&i, (t, q)) in human.iter().zip(residuals) {
        out.centers[i] = rigid.centers[i] + t;
        out.rotations[i] = quat_mul(q, &rigid.rotations[i]);
        let k = rigid.parents[i].face().expect("human gaussian");
        let v = t_set.transforms[k].rotation * rigid.canonical_normals[i];
        dirs[i] = quat_to_mat(q) * v;
        rotated.push(v);
    }
    (out, dirs, rotated)
}

/// Mean seconds per inference stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StageTimes {
    pub pvd: f64,
    pub posing: f64,
    pub drm: f64,
    pub residual_posing: f64,
    pub rendering: f64,
    pub image_save: f64,
}

impl StageTimes {
    pub const COLUMNS: [&'static str; 6] = ["pvd", "posing", "drm", "residual_posing", "rendering", "image_save"];

    pub fn values(&self) -> [f64; 6] {
        [self.pvd, self.posing, self.drm, self.residual_posing, self.rendering, self.image_save]
    }

    pub fn total(&self) -> f64 {
        self.values().iter().sum()
    }

    pub fn total_without_save(&self) -> f64 {
        self.total() - self.image_save
    }

    pub fn mean(all: &[StageTimes]) -> StageTimes {
        let n = all.len().max(1) as f64;
        let mut acc = [0.0; 6];
        for t in all {
            for (a, v) in acc.iter_mut().zip(t.values()) {
                *a += v;
            }
        }
        let [pvd, posing, drm, residual_posing, rendering, image_save] = acc.map(|v| v / n);
        StageTimes { pvd, posing, drm, residual_posing, rendering, image_save }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TimingReport {
    pub frames: usize,
    pub gaussians: usize,
    pub width: usize,
    pub height: usize,
    pub workers: usize,
    pub mean: StageTimes,
    pub total: f64,
    pub fps_with_save: f64,
    pub fps_without_save: f64,
}

impl TimingReport {
    pub fn from_times(times: &[StageTimes], gaussians: usize, camera: &Camera) -> Self {
        let mean = StageTimes::mean(times);
        let total = mean.total();
        let fps = |t: f64| if t > 0.0 { 1.0 / t } else { f64::INFINITY };
        Self {
            frames: times.len(),
            gaussians,
            width: camera.width,
            height: camera.height,
            workers: rayon::current_num_threads(),
            mean,
            total,
            fps_with_save: fps(total),
            fps_without_save: fps(mean.total_without_save()),
        }
    }

    /// Comma-separated table: header then one row of mean seconds.
    pub fn to_csv(&self) -> String {
        let mut s = StageTimes::COLUMNS.join(",");
        s.push_str(",total,fps_with_save,fps_without_save\n");
        let vals: Vec<String> = self.mean.values().iter().map(|v| format!("{v:.6}")).collect();
        s.push_str(&vals.join(","));
        s.push_str(&format!(",{:.6},{:.3},{:.3}\n", self.total, self.fps_with_save, self.fps_without_save));
        s
    }
}
