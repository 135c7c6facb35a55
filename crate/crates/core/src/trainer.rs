//! Training loop: alternating optimization of Gaussians and the residual
//! network, density control, parent updates and checkpoints.
//!
//! Parameters live in canonical space. Each step poses the cloud, renders,
//! and pulls the image gradient back through the residuals and face
//! transforms to the canonical attributes, which is where Adam updates them.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::body_model::{body_from_container_prefixed, body_into_container, BodyModel, PoseParams, ShapeParams};
use crate::config::{RunConfig, ScheduleConfig};
use crate::container::{ArrayData, Container};
use crate::dataset_io::FrameRecord;
use crate::deformation::reassign_parents;
use crate::drm::{postprocess_backward, DrmGrads, DrmNetwork};
use crate::error::{Error, Result};
use crate::gaussian_cloud::{init_background_gaussians, init_human_gaussians, GaussianCloud, ParentId};
use crate::losses::{total_loss, Image, LossReport};
use crate::math::{quat_mul_vjp, quat_rotate_vjp, quat_to_mat, Quat, Vec3};
use crate::pipeline::Avatar;
use crate::rasterizer::{rasterize_backward, rasterize_forward, Camera};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GSACKPT1";
pub const CHECKPOINT_VERSION: i64 = 1;
const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-15;
/// Split children are shrunk by this factor.
pub const SPLIT_SHRINK: f64 = 1.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainPhase {
    Warmup,
    GaussiansOnly,
    DrmOnly,
}

impl TrainPhase {
    pub fn gaussians_trainable(self) -> bool {
        self != TrainPhase::DrmOnly
    }

    pub fn drm_trainable(self) -> bool {
        self != TrainPhase::GaussiansOnly
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TrainPhase::Warmup => "warmup",
            TrainPhase::GaussiansOnly => "gaussians_only",
            TrainPhase::DrmOnly => "drm_only",
        }
    }
}

/// Phase of step `iter`: joint warmup, then alternating blocks that start
/// with the Gaussians.
pub fn schedule_phase(iter: usize, s: &ScheduleConfig) -> TrainPhase {
    if iter < s.warmup_iters {
        return TrainPhase::Warmup;
    }
    if ((iter - s.warmup_iters) / s.alternation_block) % 2 == 0 {
        TrainPhase::GaussiansOnly
    } else {
        TrainPhase::DrmOnly
    }
}

/// Whether density control runs once `iter` steps have completed.
pub fn densify_scheduled(iter: usize, s: &ScheduleConfig) -> bool {
    iter > 0 && iter >= s.densify_from && iter < s.densify_until && iter % s.densify_interval == 0
}

/// Whether pruning alone runs once `iter` steps have completed.
pub fn prune_scheduled(iter: usize, s: &ScheduleConfig) -> bool {
    iter > 0 && iter >= s.densify_until && iter % s.densify_interval == 0
}

/// Whether parents are reassigned once `iter` steps have completed.
pub fn parent_update_scheduled(iter: usize, s: &ScheduleConfig) -> bool {
    iter > 0 && iter % s.parent_update_every == 0
}

/// Reassigns parents when `iter` is a parent-update iteration.
pub fn maybe_reassign_parents(
    cloud: &GaussianCloud,
    body: &BodyModel,
    canonical: &crate::body_model::PosedBody,
    iter: usize,
    s: &ScheduleConfig,
    tau: f64,
) -> Option<GaussianCloud> {
    parent_update_scheduled(iter, s).then(|| reassign_parents(cloud, &body.faces, canonical, tau))
}

/// Adam moments for a block of parameters laid out as rows of `width`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamGroup {
    pub width: usize,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamGroup {
    pub fn new(rows: usize, width: usize) -> Self {
        Self { width, m: vec![0.0; rows * width], v: vec![0.0; rows * width], step: 0 }
    }

    /// One update; `lr(k)` gives the rate of element `k`.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: impl Fn(usize) -> f64) {
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        for k in 0..params.len() {
            let g = grads[k];
            self.m[k] = BETA1 * self.m[k] + (1.0 - BETA1) * g;
            self.v[k] = BETA2 * self.v[k] + (1.0 - BETA2) * g * g;
            let mh = self.m[k] / bc1;
            let vh = self.v[k] / bc2;
            params[k] -= lr(k) * mh / (vh.sqrt() + ADAM_EPS);
        }
    }

    fn remap(&self, origin: &[Option<usize>]) -> Self {
        let w = self.width;
        let mut out = Self { width: w, m: Vec::with_capacity(origin.len() * w), v: Vec::with_capacity(origin.len() * w), step: self.step };
        for o in origin {
            match o {
                Some(i) => {
                    out.m.extend_from_slice(&self.m[i * w..(i + 1) * w]);
                    out.v.extend_from_slice(&self.v[i * w..(i + 1) * w]);
                }
                None => {
                    out.m.extend(std::iter::repeat_n(0.0, w));
                    out.v.extend(std::iter::repeat_n(0.0, w));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub centers: AdamGroup,
    pub rotations: AdamGroup,
    pub log_scales: AdamGroup,
    pub opacity: AdamGroup,
    pub sh: AdamGroup,
    pub drm: AdamGroup,
}

impl OptimizerState {
    pub fn new(cloud: &GaussianCloud, drm: &DrmNetwork) -> Self {
        let n = cloud.len();
        Self {
            centers: AdamGroup::new(n, 3),
            rotations: AdamGroup::new(n, 4),
            log_scales: AdamGroup::new(n, 3),
            opacity: AdamGroup::new(n, 1),
            sh: AdamGroup::new(n, cloud.sh_stride()),
            drm: AdamGroup::new(drm.parameter_count(), 1),
        }
    }

    fn gaussian_groups(&self) -> [(&'static str, &AdamGroup); 5] {
        [
            ("centers", &self.centers),
            ("rotations", &self.rotations),
            ("log_scales", &self.log_scales),
            ("opacity", &self.opacity),
            ("sh", &self.sh),
        ]
    }

    /// Rows follow `origin`: `Some(i)` keeps row `i`, `None` starts fresh.
    pub fn remap(&mut self, origin: &[Option<usize>]) {
        self.centers = self.centers.remap(origin);
        self.rotations = self.rotations.remap(origin);
        self.log_scales = self.log_scales.remap(origin);
        self.opacity = self.opacity.remap(origin);
        self.sh = self.sh.remap(origin);
    }
}

/// Accumulated screen-space gradient norms since the last density event.
#[derive(Debug, Clone, PartialEq)]
pub struct GradStats {
    pub accum: Vec<f64>,
    pub count: Vec<u32>,
}

impl GradStats {
    pub fn new(n: usize) -> Self {
        Self { accum: vec![0.0; n], count: vec![0; n] }
    }

    pub fn mean(&self) -> Vec<f64> {
        self.accum
            .iter()
            .zip(&self.count)
            .map(|(&a, &c)| if c > 0 { a / c as f64 } else { 0.0 })
            .collect()
    }
}

/// Gradients w.r.t. the canonical cloud attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudGrads {
    pub centers: Vec<Vec3>,
    pub rotations: Vec<Quat>,
    pub log_scales: Vec<Vec3>,
    pub opacity_logits: Vec<f64>,
    pub sh: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub loss: LossReport,
    pub cloud: CloudGrads,
    pub drm: Option<DrmGrads>,
    /// Norm of the 2D mean gradient in normalized device coordinates.
    pub mean2d_norm: Vec<f64>,
    pub visible: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct DensifyOutcome {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct StepReport {
    pub iter: usize,
    pub phase: TrainPhase,
    pub camera: String,
    pub frame: usize,
    pub loss: f64,
    pub l1: f64,
    pub ssim: f64,
    pub gaussians: usize,
    pub human: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub densify: Option<DensifyOutcome>,
    pub parents_updated: bool,
}

fn flat3(v: &[Vec3]) -> Vec<f64> {
    v.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
}

fn unflat3(f: &[f64], out: &mut [Vec3]) {
    for (i, p) in out.iter_mut().enumerate() {
        *p = Vec3::new(f[3 * i], f[3 * i + 1], f[3 * i + 2]);
    }
}

fn flat4(v: &[Quat]) -> Vec<f64> {
    v.iter().flat_map(|q| *q).collect()
}

fn drm_flat(net: &DrmNetwork) -> Vec<f64> {
    let mut out = Vec::with_capacity(net.parameter_count());
    for w in &net.weights {
        out.extend_from_slice(w.as_slice());
    }
    for b in &net.biases {
        out.extend_from_slice(b.as_slice());
    }
    out
}

fn drm_grads_flat(g: &DrmGrads) -> Vec<f64> {
    let mut out = Vec::new();
    for w in &g.weights {
        out.extend_from_slice(w.as_slice());
    }
    for b in &g.biases {
        out.extend_from_slice(b.as_slice());
    }
    out
}

fn drm_unflat(net: &mut DrmNetwork, f: &[f64]) {
    let mut k = 0;
    for w in net.weights.iter_mut() {
        let n = w.len();
        w.as_mut_slice().copy_from_slice(&f[k..k + n]);
        k += n;
    }
    for b in net.biases.iter_mut() {
        let n = b.len();
        b.as_mut_slice().copy_from_slice(&f[k..k + n]);
        k += n;
    }
}

/// Scene extent: 1.1 × the largest camera distance from the camera centroid,
/// floored at 1 m for degenerate rigs.
pub fn scene_extent(cameras: &[Camera]) -> f64 {
    if cameras.is_empty() {
        return 1.0;
    }
    let centers: Vec<Vec3> = cameras.iter().map(|c| c.center()).collect();
    let mean = centers.iter().sum::<Vec3>() / centers.len() as f64;
    let r = centers.iter().map(|c| (c - mean).norm()).fold(0.0, f64::max);
    (1.1 * r).max(1.0)
}

/// Clone, split and prune by the accumulated gradient statistics. The
/// clone/split size threshold scales with the camera `extent`, the prune
/// bound with `scene_radius`, which also covers the background sphere.
/// Returns the new cloud and, for every output row, the input row it keeps
/// its optimizer state from (`None` for new Gaussians).
pub fn densify_and_prune(
    cloud: &GaussianCloud,
    mean_grads: &[f64],
    s: &ScheduleConfig,
    extent: f64,
    scene_radius: f64,
    densify: bool,
    rng: &mut ChaCha8Rng,
) -> (GaussianCloud, Vec<Option<usize>>, DensifyOutcome) {
    let n = cloud.len();
    let dense = s.percent_dense * extent;
    let max_scale = |c: &GaussianCloud, i: usize| c.log_scales[i].max().exp();
    let mut outcome = DensifyOutcome::default();
    let mut keep: Vec<usize> = Vec::with_capacity(n);
    let mut clones = Vec::new();
    let mut splits = Vec::new();
    for i in 0..n {
        let high = densify && mean_grads[i] >= s.grad_threshold;
        if high && max_scale(cloud, i) <= dense {
            clones.push(i);
            keep.push(i);
        } else if high {
            splits.push(i);
        } else {
            keep.push(i);
        }
    }
    outcome.cloned = clones.len();
    outcome.split = splits.len();

    let mut out = cloud.select(&keep);
    let mut origin: Vec<Option<usize>> = keep.iter().map(|&i| Some(i)).collect();
    out = out.concat(&cloud.select(&clones)).expect("same degree");
    origin.extend(clones.iter().map(|_| None));

    let doubled: Vec<usize> = splits.iter().flat_map(|&i| [i, i]).collect();
    let mut children = cloud.select(&doubled);
    for (c, &i) in doubled.iter().enumerate() {
        let s3 = cloud.log_scales[i].map(f64::exp);
        let z = Vec3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let r = quat_to_mat(&crate::math::quat_normalize(&cloud.rotations[i]));
        children.centers[c] = cloud.centers[i] + r * s3.component_mul(&z);
        children.log_scales[c] = s3.map(|v| (v / SPLIT_SHRINK).ln());
    }
    origin.extend(std::iter::repeat_n(None, children.len()));
    out = out.concat(&children).expect("same degree");

    let survivors: Vec<usize> = (0..out.len())
        .filter(|&i| {
            crate::math::sigmoid(out.opacity_logits[i]) >= s.prune_opacity
                && max_scale(&out, i) <= s.max_world_scale * scene_radius
        })
        .collect();
    outcome.pruned = out.len() - survivors.len();
    let origin = survivors.iter().map(|&i| origin[i]).collect();
    (out.select(&survivors), origin, outcome)
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: RunConfig,
    pub avatar: Avatar,
    pub opt: OptimizerState,
    pub stats: GradStats,
    pub iter: usize,
    pub rng: ChaCha8Rng,
    pub extent: f64,
    /// `max(extent, background radius)`.
    pub scene_radius: f64,
}

impl Trainer {
    /// Fresh state: one Gaussian per face plus a background sphere.
    pub fn new(config: RunConfig, body: BodyModel, shape: ShapeParams, cameras: &[Camera]) -> Result<Self> {
        config.validate()?;
        let m = &config.model;
        let drm = DrmNetwork::new(body.joint_count(), m.drm_hidden, m.drm_bounds, config.seed ^ 0x5eed_d12a);
        let mut avatar = Avatar::new(body, shape, GaussianCloud::empty(m.sh_degree), drm)?;
        let init_scale = (m.init_scale > 0.0).then_some(m.init_scale);
        let human = init_human_gaussians(&avatar.body, &avatar.canonical, m.sh_degree, init_scale);
        let radius = if m.background_radius > 0.0 {
            m.background_radius
        } else {
            2.0 * crate::dataset_io::rig_radius(cameras)
        };
        let bg = init_background_gaussians(m.background_count, radius, config.seed, m.sh_degree);
        let extent = scene_extent(cameras);
        avatar.cloud = human.concat(&bg)?;
        let opt = OptimizerState::new(&avatar.cloud, &avatar.drm);
        let n = avatar.cloud.len();
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            extent,
            scene_radius: extent.max(radius),
            config,
            avatar,
            opt,
            stats: GradStats::new(n),
            iter: 0,
        })
    }

    pub fn phase(&self) -> TrainPhase {
        schedule_phase(self.iter, &self.config.schedule)
    }

    /// Position learning rate at the current iteration (log-linear decay).
    pub fn position_lr(&self) -> f64 {
        let lr = &self.config.lr;
        let t = (self.iter as f64 / self.config.schedule.total_iters as f64).clamp(0.0, 1.0);
        self.extent * (lr.position.ln() * (1.0 - t) + lr.position_final.ln() * t).exp()
    }

    /// Loss of the current parameters on one view.
    pub fn loss(&self, pose: &PoseParams, camera: &Camera, gt: &Image) -> Result<LossReport> {
        let posed = self.avatar.pose_cloud(&self.avatar.cloud, pose, &camera.center())?;
        let out = rasterize_forward(&posed.cloud, camera, &posed.directions, &self.config.render)?;
        total_loss(&Image::new(out.width, out.height, 3, out.rgb)?, gt, &self.config.loss, None)
    }

    /// Loss and its gradient w.r.t. every canonical attribute and (if
    /// `drm_params`) the network parameters.
    pub fn gradients(&self, pose: &PoseParams, camera: &Camera, gt: &Image, drm_params: bool) -> Result<Gradients> {
        let av = &self.avatar;
        let center = camera.center();
        let posed = av.pose_cloud(&av.cloud, pose, &center)?;
        let out = rasterize_forward(&posed.cloud, camera, &posed.directions, &self.config.render)?;
        let pred = Image::new(out.width, out.height, 3, out.rgb.clone())?;
        let loss = total_loss(&pred, gt, &self.config.loss, None)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                iter: self.iter as u64,
                frame: camera.id.clone(),
                value: loss.total,
            });
        }
        let rg = rasterize_backward(&posed.cloud, camera, &posed.directions, &out, &loss.grad, None)?;
        let mut g = CloudGrads {
            centers: rg.centers.clone(),
            rotations: rg.rotations.clone(),
            log_scales: rg.log_scales.clone(),
            opacity_logits: rg.opacity_logits.clone(),
            sh: rg.sh.clone(),
        };
        // background: the SH direction depends on the center
        for i in 0..posed.cloud.len() {
            if posed.cloud.parents[i].is_human() {
                continue;
            }
            let r = (center - posed.cloud.centers[i]).norm();
            if r > 1e-12 {
                let d = posed.directions[i];
                let gd = rg.directions[i];
                g.centers[i] -= (gd - d * d.dot(&gd)) / r;
            }
        }
        let nh = posed.human.len();
        let mut g_t = vec![Vec3::zeros(); nh];
        let mut g_qr = vec![[0.0; 4]; nh];
        let mut g_qd = vec![[0.0; 4]; nh];
        for (k, &i) in posed.human.iter().enumerate() {
            let q_r = posed.residuals[k].1;
            let (ga, gb) = quat_mul_vjp(&q_r, &posed.rigid.rotations[i], &rg.rotations[i]);
            let gdir = quat_rotate_vjp(&q_r, &posed.rotated_normals[k], &rg.directions[i]);
            g_qr[k] = std::array::from_fn(|c| ga[c] + gdir[c]);
            g_qd[k] = gb;
            g_t[k] = rg.centers[i];
        }
        let g_raw = postprocess_backward(&posed.raw, &av.drm.bounds, &g_t, &g_qr);
        let dg = av.drm.backward_with(&posed.drm_cache, &g_raw, drm_params)?;
        let joints = av.body.joint_count();
        for (k, &i) in posed.human.iter().enumerate() {
            let mut gpd = g_t[k];
            for j in 0..joints {
                gpd += Vec3::new(dg.input[(k, 3 * j)], dg.input[(k, 3 * j + 1)], dg.input[(k, 3 * j + 2)]);
            }
            let f = av.cloud.parents[i].face().expect("human gaussian");
            g.centers[i] = posed.t_set.transforms[f].rotation.transpose() * gpd;
            g.rotations[i] = quat_mul_vjp(&posed.face_quats[f], &av.cloud.rotations[i], &g_qd[k]).1;
        }
        let (hw, hh) = (0.5 * camera.width as f64, 0.5 * camera.height as f64);
        let mean2d_norm = rg.means2d.iter().map(|m| (m[0] * hw).hypot(m[1] * hh)).collect();
        let visible = out.cache.projected.splats.iter().map(|s| s.visible).collect();
        Ok(Gradients {
            loss,
            cloud: g,
            drm: drm_params.then_some(dg),
            mean2d_norm,
            visible,
        })
    }

    /// One optimization step on a single view.
    pub fn train_step(&mut self, pose: &PoseParams, camera: &Camera, gt: &Image, frame: usize) -> Result<StepReport> {
        let phase = self.phase();
        let grads = self.gradients(pose, camera, gt, phase.drm_trainable())?;
        if phase.gaussians_trainable() {
            self.apply_gaussian_update(&grads.cloud);
            for i in 0..grads.visible.len() {
                if grads.visible[i] {
                    self.stats.accum[i] += grads.mean2d_norm[i];
                    self.stats.count[i] += 1;
                }
            }
        }
        if let Some(dg) = grads.drm.as_ref().filter(|_| phase.drm_trainable()) {
            let mut p = drm_flat(&self.avatar.drm);
            let lr = self.config.lr.drm;
            self.opt.drm.update(&mut p, &drm_grads_flat(dg), |_| lr);
            drm_unflat(&mut self.avatar.drm, &p);
        }
        self.iter += 1;

        let s = self.config.schedule.clone();
        let mut densify = None;
        if phase.gaussians_trainable() && (densify_scheduled(self.iter, &s) || prune_scheduled(self.iter, &s)) {
            let (cloud, origin, outcome) = densify_and_prune(
                &self.avatar.cloud,
                &self.stats.mean(),
                &s,
                self.extent,
                self.scene_radius,
                densify_scheduled(self.iter, &s),
                &mut self.rng,
            );
            self.avatar.cloud = cloud;
            self.opt.remap(&origin);
            self.stats = GradStats::new(self.avatar.cloud.len());
            self.avatar.cloud.audit(self.avatar.body.face_count())?;
            log::info!(
                "iter {}: cloned {}, split {}, pruned {}, {} gaussians",
                self.iter,
                outcome.cloned,
                outcome.split,
                outcome.pruned,
                self.avatar.cloud.len()
            );
            densify = Some(outcome);
        }
        let mut parents_updated = false;
        if let Some(c) = maybe_reassign_parents(
            &self.avatar.cloud,
            &self.avatar.body,
            &self.avatar.canonical,
            self.iter,
            &s,
            self.config.model.tau,
        ) {
            self.avatar.cloud = c;
            parents_updated = true;
        }
        Ok(StepReport {
            iter: self.iter - 1,
            phase,
            camera: camera.id.clone(),
            frame,
            loss: grads.loss.total,
            l1: grads.loss.l1,
            ssim: grads.loss.ssim,
            gaussians: self.avatar.cloud.len(),
            human: self.avatar.cloud.human_count(),
            densify,
            parents_updated,
        })
    }

    fn apply_gaussian_update(&mut self, g: &CloudGrads) {
        let lr = self.config.lr.clone();
        let pos_lr = self.position_lr();
        let cloud = &mut self.avatar.cloud;

        let mut p = flat3(&cloud.centers);
        self.opt.centers.update(&mut p, &flat3(&g.centers), |_| pos_lr);
        unflat3(&p, &mut cloud.centers);

        let mut p = flat4(&cloud.rotations);
        self.opt.rotations.update(&mut p, &flat4(&g.rotations), |_| lr.rotation);
        for (i, q) in cloud.rotations.iter_mut().enumerate() {
            *q = crate::math::quat_normalize(&[p[4 * i], p[4 * i + 1], p[4 * i + 2], p[4 * i + 3]]);
        }

        let mut p = flat3(&cloud.log_scales);
        self.opt.log_scales.update(&mut p, &flat3(&g.log_scales), |_| lr.scale);
        unflat3(&p, &mut cloud.log_scales);

        self.opt.opacity.update(&mut cloud.opacity_logits, &g.opacity_logits, |_| lr.opacity);

        let k = cloud.sh_per_channel();
        self.opt
            .sh
            .update(&mut cloud.sh, &g.sh, |e| if e % k == 0 { lr.sh_dc } else { lr.sh_rest });
    }

    /// Trains until `until` steps have completed, sampling uniformly over
    /// `frames`. Writes one JSON line per step to `log` and checkpoints to
    /// `checkpoint_dir` every `schedule.checkpoint_every` steps.
    pub fn run(
        &mut self,
        frames: &[(FrameRecord, Image)],
        cameras: &[Camera],
        until: usize,
        mut log: Option<&mut dyn Write>,
        checkpoint_dir: Option<&Path>,
    ) -> Result<Vec<StepReport>> {
        if frames.is_empty() {
            return Err(Error::Config("no training frames".into()));
        }
        let mut reports = Vec::new();
        while self.iter < until.min(self.config.schedule.total_iters) {
            let (rec, img) = &frames[self.rng.random_range(0..frames.len())];
            let cam = cameras
                .iter()
                .find(|c| c.id == rec.camera)
                .ok_or_else(|| Error::validation("cameras", format!("unknown camera {}", rec.camera)))?;
            let report = self.train_step(&rec.pose, cam, img, rec.frame).map_err(|e| match e {
                Error::NonFiniteLoss { iter, value, .. } => Error::NonFiniteLoss {
                    iter,
                    frame: format!("{}/{:06}", rec.camera, rec.frame),
                    value,
                },
                other => other,
            })?;
            if let Some(w) = log.as_mut() {
                let line = serde_json::to_string(&report).expect("report serializes");
                writeln!(w, "{line}").map_err(|e| Error::io("training log", e))?;
            }
            if let Some(dir) = checkpoint_dir {
                if self.iter % self.config.schedule.checkpoint_every == 0 {
                    let path = dir.join(format!("ckpt_{:07}.bin", self.iter));
                    self.save_checkpoint(&path)?;
                    log::info!("checkpoint {}", path.display());
                }
            }
            reports.push(report);
        }
        Ok(reports)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.to_container().write(path, CHECKPOINT_MAGIC)
    }

    fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.push("version", &[1], ArrayData::I64(vec![CHECKPOINT_VERSION]));
        c.push_bytes("config_toml", self.config.to_toml_string().into_bytes());
        c.push_bytes("config_hash", self.config.hash().into_bytes());
        c.push("iter", &[1], ArrayData::I64(vec![self.iter as i64]));
        c.push_f64("extent", &[1], vec![self.extent]);
        c.push_f64("scene_radius", &[1], vec![self.scene_radius]);
        let seed = self.rng.get_seed();
        c.push_bytes("rng_seed", seed.to_vec());
        c.push_bytes("rng_word_pos", self.rng.get_word_pos().to_le_bytes().to_vec());
        body_into_container(&self.avatar.body, "body/", &mut c);
        c.push_f64("shape", &[self.avatar.shape.betas.len()], self.avatar.shape.betas.clone());
        write_cloud(&self.avatar.cloud, "cloud/", &mut c);
        self.avatar.drm.write_container("drm/", &mut c);
        for (name, g) in self.opt.gaussian_groups().into_iter().chain([("drm", &self.opt.drm)]) {
            write_adam(g, &format!("adam/{name}/"), &mut c);
        }
        c.push_f64("stats/accum", &[self.stats.accum.len()], self.stats.accum.clone());
        c.push(
            "stats/count",
            &[self.stats.count.len()],
            ArrayData::I64(self.stats.count.iter().map(|&v| v as i64).collect()),
        );
        c
    }

    /// Restores a checkpoint. With `expected`, the stored configuration hash
    /// must match unless `allow_config_change` is set.
    pub fn load_checkpoint(path: &Path, expected: Option<&RunConfig>, allow_config_change: bool) -> Result<Self> {
        let c = Container::read(path, CHECKPOINT_MAGIC)?;
        let (_, version) = c.i64_array("version")?;
        if version.first() != Some(&CHECKPOINT_VERSION) {
            return Err(Error::Format(format!(
                "checkpoint version {:?}, this build reads {CHECKPOINT_VERSION}",
                version.first()
            )));
        }
        let stored = RunConfig::from_toml_str(
            std::str::from_utf8(c.bytes("config_toml")?).map_err(|_| Error::Format("config is not UTF-8".into()))?,
        )?;
        let config = match expected {
            Some(exp) if exp.hash() != stored.hash() && !allow_config_change => {
                return Err(Error::Config(format!(
                    "checkpoint was written with config {} but the run uses {}; pass the override flag to resume anyway",
                    stored.hash(),
                    exp.hash()
                )))
            }
            Some(exp) => exp.clone(),
            None => stored,
        };
        let iter = c.i64_array("iter")?.1[0] as usize;
        let extent = c.f64_array("extent")?.1[0];
        let scene_radius = c.f64_array("scene_radius")?.1[0];
        let seed: [u8; 32] = c
            .bytes("rng_seed")?
            .try_into()
            .map_err(|_| Error::Format("rng seed must be 32 bytes".into()))?;
        let pos: [u8; 16] = c
            .bytes("rng_word_pos")?
            .try_into()
            .map_err(|_| Error::Format("rng position must be 16 bytes".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_word_pos(u128::from_le_bytes(pos));
        let body = body_from_container_prefixed(&c, "body/")?;
        let shape = ShapeParams { betas: c.f64_array("shape")?.1 };
        let cloud = read_cloud(&c, "cloud/")?;
        let drm = DrmNetwork::read_container("drm/", &c)?;
        let mut avatar = Avatar::new(body, shape, GaussianCloud::empty(cloud.sh_degree), drm)?;
        avatar.cloud = cloud;
        avatar.cloud.audit(avatar.body.face_count())?;
        let opt = OptimizerState {
            centers: read_adam(&c, "adam/centers/")?,
            rotations: read_adam(&c, "adam/rotations/")?,
            log_scales: read_adam(&c, "adam/log_scales/")?,
            opacity: read_adam(&c, "adam/opacity/")?,
            sh: read_adam(&c, "adam/sh/")?,
            drm: read_adam(&c, "adam/drm/")?,
        };
        let n = avatar.cloud.len();
        for (name, g) in opt.gaussian_groups() {
            if g.m.len() != n * g.width {
                return Err(Error::validation(format!("adam/{name}"), format!("{} rows for {n} gaussians", g.m.len() / g.width.max(1))));
            }
        }
        let stats = GradStats {
            accum: c.f64_array("stats/accum")?.1,
            count: c.i64_array("stats/count")?.1.into_iter().map(|v| v as u32).collect(),
        };
        Ok(Self { config, avatar, opt, stats, iter, rng, extent, scene_radius })
    }
}

fn write_adam(g: &AdamGroup, prefix: &str, c: &mut Container) {
    c.push(&format!("{prefix}meta"), &[2], ArrayData::I64(vec![g.width as i64, g.step as i64]));
    c.push_f64(&format!("{prefix}m"), &[g.m.len()], g.m.clone());
    c.push_f64(&format!("{prefix}v"), &[g.v.len()], g.v.clone());
}

fn read_adam(c: &Container, prefix: &str) -> Result<AdamGroup> {
    let (_, meta) = c.i64_array(&format!("{prefix}meta"))?;
    let m = c.f64_array(&format!("{prefix}m"))?.1;
    let v = c.f64_array(&format!("{prefix}v"))?.1;
    if meta.len() != 2 || m.len() != v.len() {
        return Err(Error::Format(format!("{prefix}: inconsistent optimizer state")));
    }
    Ok(AdamGroup { width: meta[0] as usize, m, v, step: meta[1] as u64 })
}

pub(crate) fn write_cloud(cloud: &GaussianCloud, prefix: &str, c: &mut Container) {
    let n = cloud.len();
    c.push(&format!("{prefix}sh_degree"), &[1], ArrayData::I64(vec![cloud.sh_degree as i64]));
    c.push_f64(&format!("{prefix}centers"), &[n, 3], flat3(&cloud.centers));
    c.push_f64(&format!("{prefix}rotations"), &[n, 4], flat4(&cloud.rotations));
    c.push_f64(&format!("{prefix}log_scales"), &[n, 3], flat3(&cloud.log_scales));
    c.push_f64(&format!("{prefix}opacity_logits"), &[n], cloud.opacity_logits.clone());
    c.push_f64(&format!("{prefix}sh"), &[n, 3, cloud.sh_per_channel()], cloud.sh.clone());
    c.push(
        &format!("{prefix}parents"),
        &[n],
        ArrayData::I64(cloud.parents.iter().map(|p| p.to_i64()).collect()),
    );
    c.push_f64(&format!("{prefix}normals"), &[n, 3], flat3(&cloud.canonical_normals));
}

pub(crate) fn read_cloud(c: &Container, prefix: &str) -> Result<GaussianCloud> {
    let deg = c.i64_array(&format!("{prefix}sh_degree"))?.1[0] as usize;
    let mut cloud = GaussianCloud::empty(deg);
    let centers = c.f64_array(&format!("{prefix}centers"))?.1;
    let n = centers.len() / 3;
    let get = |name: &str, len: usize| -> Result<Vec<f64>> {
        let v = c.f64_array(&format!("{prefix}{name}"))?.1;
        if v.len() != len {
            return Err(Error::validation(format!("{prefix}{name}"), format!("expected {len} values, got {}", v.len())));
        }
        Ok(v)
    };
    cloud.centers = vec![Vec3::zeros(); n];
    unflat3(&centers, &mut cloud.centers);
    let r = get("rotations", 4 * n)?;
    cloud.rotations = (0..n).map(|i| [r[4 * i], r[4 * i + 1], r[4 * i + 2], r[4 * i + 3]]).collect();
    cloud.log_scales = vec![Vec3::zeros(); n];
    unflat3(&get("log_scales", 3 * n)?, &mut cloud.log_scales);
    cloud.opacity_logits = get("opacity_logits", n)?;
    cloud.sh = get("sh", n * cloud.sh_stride())?;
    let (_, parents) = c.i64_array(&format!("{prefix}parents"))?;
    if parents.len() != n {
        return Err(Error::validation(format!("{prefix}parents"), "length mismatch"));
    }
    cloud.parents = parents.into_iter().map(ParentId::from_i64).collect();
    cloud.canonical_normals = vec![Vec3::zeros(); n];
    unflat3(&get("normals", 3 * n)?, &mut cloud.canonical_normals);
    Ok(cloud)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phase_boundaries() {
        let s = ScheduleConfig::default();
        assert_eq!(schedule_phase(9_999, &s), TrainPhase::Warmup);
        assert_eq!(schedule_phase(10_000, &s), TrainPhase::GaussiansOnly);
        assert_eq!(schedule_phase(14_999, &s), TrainPhase::GaussiansOnly);
        assert_eq!(schedule_phase(15_000, &s), TrainPhase::DrmOnly);
        assert_eq!(schedule_phase(20_000, &s), TrainPhase::GaussiansOnly);
    }

    #[test]
    fn parent_updates_every_thousand() {
        let s = ScheduleConfig::default();
        assert!(!parent_update_scheduled(999, &s));
        assert!(parent_update_scheduled(1000, &s));
        assert!(!parent_update_scheduled(0, &s));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut g = AdamGroup::new(2, 1);
        let mut p = vec![1.0, 1.0];
        g.update(&mut p, &[0.5, -2.0], |_| 0.1);
        assert!((p[0] - 0.9).abs() < 1e-12 && (p[1] - 1.1).abs() < 1e-12);
    }

    #[test]
    fn adam_remap_keeps_and_zeroes_rows() {
        let g = AdamGroup { width: 2, m: vec![1.0, 2.0, 3.0, 4.0], v: vec![5.0, 6.0, 7.0, 8.0], step: 3 };
        let r = g.remap(&[Some(1), None, Some(0)]);
        assert_eq!(r.m, vec![3.0, 4.0, 0.0, 0.0, 1.0, 2.0]);
        assert_eq!(r.step, 3);
    }
}
