mod common;

use gsavatar_core::body_model::{make_synthetic_body, PoseParams, ShapeParams};
use gsavatar_core::config::{RunConfig, ScheduleConfig};
use gsavatar_core::container::{ArrayData, Container};
use gsavatar_core::dataset_io::{render_reference, ring_cameras, synthetic_poses, vertex_colors, FrameRecord, SynthOptions};
use gsavatar_core::error::Error;
use gsavatar_core::gaussian_cloud::{GaussianCloud, ParentId};
use gsavatar_core::losses::Image;
use gsavatar_core::math::{logit, Vec3, QUAT_IDENTITY};
use gsavatar_core::rasterizer::Camera;
use gsavatar_core::trainer::{densify_and_prune, TrainPhase, Trainer, CHECKPOINT_MAGIC, SPLIT_SHRINK};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Scene {
    cams: Vec<Camera>,
    frames: Vec<(FrameRecord, Image)>,
}

fn scene() -> Scene {
    let body = make_synthetic_body(2, 6);
    let opts = SynthOptions { width: 32, height: 32, focal: 37.5, cameras: 2, frames: 3, ..Default::default() };
    let cams = ring_cameras(&opts);
    let colors = vertex_colors(&body);
    let poses = synthetic_poses(2, 3, 0.5, 0);
    let mut frames = Vec::new();
    for cam in &cams {
        for (&f, pose) in &poses {
            let (rgb, _) = render_reference(&body, &colors, pose, cam, 5.0).unwrap();
            let rec = FrameRecord {
                camera: cam.id.clone(),
                frame: f,
                image: Default::default(),
                mask: None,
                pose: pose.clone(),
            };
            frames.push((rec, Image::new(32, 32, 3, rgb).unwrap()));
        }
    }
    Scene { cams, frames }
}

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.schedule = ScheduleConfig {
        total_iters: 40,
        warmup_iters: 10,
        alternation_block: 5,
        densify_from: 5,
        densify_until: 30,
        densify_interval: 5,
        parent_update_every: 7,
        grad_threshold: 1e-6,
        checkpoint_every: 10,
        ..Default::default()
    };
    cfg.model.drm_hidden = 8;
    cfg.model.background_count = 60;
    cfg.model.sh_degree = 1;
    cfg
}

fn trainer(cfg: RunConfig, s: &Scene) -> Trainer {
    Trainer::new(cfg, make_synthetic_body(2, 6), ShapeParams::default(), &s.cams).unwrap()
}

#[test]
fn training_is_deterministic() {
    let s = scene();
    let mut a = trainer(small_config(), &s);
    let mut b = trainer(small_config(), &s);
    a.run(&s.frames, &s.cams, 25, None, None).unwrap();
    b.run(&s.frames, &s.cams, 25, None, None).unwrap();
    assert_eq!(a.avatar.cloud, b.avatar.cloud);
    assert_eq!(a.avatar.drm, b.avatar.drm);
}

#[test]
fn loss_decreases_on_a_single_view() {
    let s = scene();
    let mut cfg = small_config();
    cfg.schedule.densify_from = 1000;
    cfg.schedule.densify_interval = 1000;
    let mut t = trainer(cfg, &s);
    let (rec, img) = &s.frames[0];
    let cam = &s.cams[0];
    let before = t.loss(&rec.pose, cam, img).unwrap().total;
    for _ in 0..10 {
        t.train_step(&rec.pose, cam, img, rec.frame).unwrap();
    }
    assert!(t.loss(&rec.pose, cam, img).unwrap().total < before);
}

#[test]
fn phases_freeze_the_other_parameter_set() {
    let s = scene();
    let mut cfg = small_config();
    cfg.schedule.warmup_iters = 0;
    cfg.schedule.densify_from = 1000;
    cfg.schedule.densify_until = 1000;
    cfg.schedule.total_iters = 1000;
    cfg.schedule.parent_update_every = 1000;
    let mut t = trainer(cfg, &s);
    // make the network's output depend on its weights
    for v in t.avatar.drm.weights.last_mut().unwrap().iter_mut() {
        *v = 0.01;
    }
    let (rec, img) = &s.frames[1];
    let cam = s.cams.iter().find(|c| c.id == rec.camera).unwrap();

    assert_eq!(t.phase(), TrainPhase::GaussiansOnly);
    let drm = t.avatar.drm.clone();
    let cloud = t.avatar.cloud.clone();
    for _ in 0..5 {
        t.train_step(&rec.pose, cam, img, rec.frame).unwrap();
    }
    assert_eq!(t.avatar.drm, drm);
    assert_ne!(t.avatar.cloud, cloud);

    assert_eq!(t.phase(), TrainPhase::DrmOnly);
    let drm = t.avatar.drm.clone();
    let cloud = t.avatar.cloud.clone();
    for _ in 0..5 {
        t.train_step(&rec.pose, cam, img, rec.frame).unwrap();
    }
    assert_eq!(t.avatar.cloud, cloud);
    assert_ne!(t.avatar.drm, drm);
}

#[test]
fn zero_loss_weights_leave_parameters_unchanged() {
    let s = scene();
    let mut cfg = small_config();
    cfg.loss.l1 = 0.0;
    cfg.loss.ssim = 0.0;
    cfg.loss.lpips = 0.0;
    cfg.schedule.densify_from = 1000;
    cfg.schedule.densify_until = 40;
    cfg.schedule.densify_interval = 1000;
    cfg.schedule.parent_update_every = 1000;
    let mut t = trainer(cfg, &s);
    let cloud = t.avatar.cloud.clone();
    let drm = t.avatar.drm.clone();
    let (rec, img) = &s.frames[0];
    for _ in 0..3 {
        let r = t.train_step(&rec.pose, &s.cams[0], img, rec.frame).unwrap();
        assert_eq!(r.loss, 0.0);
    }
    assert_eq!(t.avatar.cloud, cloud);
    assert_eq!(t.avatar.drm, drm);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let s = scene();
    let dir = tempfile::tempdir().unwrap();
    let mut full = trainer(small_config(), &s);
    full.run(&s.frames, &s.cams, 30, None, None).unwrap();

    let mut first = trainer(small_config(), &s);
    first.run(&s.frames, &s.cams, 20, None, Some(dir.path())).unwrap();
    let ckpt = dir.path().join("ckpt_0000020.bin");
    assert!(ckpt.exists());
    let mut resumed = Trainer::load_checkpoint(&ckpt, Some(&small_config()), false).unwrap();
    assert_eq!(resumed.iter, 20);
    resumed.run(&s.frames, &s.cams, 30, None, None).unwrap();

    assert_eq!(resumed.avatar.cloud, full.avatar.cloud);
    assert_eq!(resumed.avatar.drm, full.avatar.drm);
    assert_eq!(resumed.opt, full.opt);
}

#[test]
fn checkpoint_rejects_changed_config_and_versions() {
    let s = scene();
    let dir = tempfile::tempdir().unwrap();
    let t = trainer(small_config(), &s);
    let path = dir.path().join("a.bin");
    t.save_checkpoint(&path).unwrap();

    let mut other = small_config();
    other.model.tau = 0.2;
    assert!(matches!(Trainer::load_checkpoint(&path, Some(&other), false), Err(Error::Config(_))));
    let forced = Trainer::load_checkpoint(&path, Some(&other), true).unwrap();
    assert_eq!(forced.config.model.tau, 0.2);

    let mut c = Container::read(&path, CHECKPOINT_MAGIC).unwrap();
    let v = c.arrays.iter_mut().find(|a| a.name == "version").unwrap();
    v.data = ArrayData::I64(vec![99]);
    let bumped = dir.path().join("b.bin");
    c.write(&bumped, CHECKPOINT_MAGIC).unwrap();
    assert!(matches!(Trainer::load_checkpoint(&bumped, None, false), Err(Error::Format(_))));
}

#[test]
fn log_has_one_record_per_step() {
    let s = scene();
    let mut t = trainer(small_config(), &s);
    let mut log = Vec::new();
    t.run(&s.frames, &s.cams, 12, Some(&mut log), None).unwrap();
    let text = String::from_utf8(log).unwrap();
    assert_eq!(text.lines().count(), 12);
    for (k, line) in text.lines().enumerate() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["iter"], k);
    }
}

fn fixture_cloud() -> GaussianCloud {
    let mut c = GaussianCloud::empty(0);
    // (scale, opacity, parent)
    let rows = [
        (0.005, 0.5, ParentId::Face(3)), // small, high gradient: clone
        (0.05, 0.5, ParentId::Face(4)),  // large, high gradient: split
        (0.02, 0.001, ParentId::Face(5)), // transparent: prune
        (0.02, 0.5, ParentId::Background), // untouched
        (0.5, 0.5, ParentId::Face(6)),   // too large for the scene: prune
    ];
    for (i, (s, o, p)) in rows.into_iter().enumerate() {
        c.centers.push(Vec3::new(i as f64, 0.0, 0.0));
        c.rotations.push(QUAT_IDENTITY);
        c.log_scales.push(Vec3::repeat(f64::ln(s)));
        c.opacity_logits.push(logit(o));
        c.sh.extend([0.1 * i as f64, 0.0, 0.0]);
        c.parents.push(p);
        c.canonical_normals.push(if p.is_human() { Vec3::z() } else { Vec3::zeros() });
    }
    c
}

#[test]
fn densify_fixture() {
    let s = ScheduleConfig { grad_threshold: 0.01, percent_dense: 0.01, max_world_scale: 0.1, prune_opacity: 0.005, ..Default::default() };
    let extent = 2.0;
    let grads = [0.02, 0.02, 0.0, 0.0, 0.0];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (out, origin, outcome) = densify_and_prune(&fixture_cloud(), &grads, &s, extent, extent, true, &mut rng);
    assert_eq!((outcome.cloned, outcome.split, outcome.pruned), (1, 1, 2));
    // survivors of the kept set, then the clone, then two split children
    assert_eq!(origin, vec![Some(0), Some(3), None, None, None]);
    assert_eq!(out.len(), 5);
    assert_eq!(out.parents, vec![ParentId::Face(3), ParentId::Background, ParentId::Face(3), ParentId::Face(4), ParentId::Face(4)]);
    assert_eq!(out.centers[2], out.centers[0]);
    for child in [3, 4] {
        let s = out.log_scales[child].map(f64::exp);
        assert!((s.x - 0.05 / SPLIT_SHRINK).abs() < 1e-15);
        assert_eq!(out.sh[child * 3], 0.1);
        assert!((out.centers[child] - Vec3::new(1.0, 0.0, 0.0)).norm() < 0.05 * 6.0);
    }
    assert_ne!(out.centers[3], out.centers[4]);

    // without densification only the pruning applies
    let (out, origin, outcome) = densify_and_prune(&fixture_cloud(), &grads, &s, extent, extent, false, &mut rng);
    assert_eq!((outcome.cloned, outcome.split, outcome.pruned), (0, 0, 2));
    assert_eq!(origin, vec![Some(0), Some(1), Some(3)]);
    assert_eq!(out.len(), 3);

    // the size bound follows the scene radius, not the camera extent
    let (_, origin, outcome) = densify_and_prune(&fixture_cloud(), &grads, &s, extent, 10.0, false, &mut rng);
    assert_eq!(outcome.pruned, 1);
    assert_eq!(origin, vec![Some(0), Some(1), Some(3), Some(4)]);
}

#[test]
fn empty_frame_list_is_an_error() {
    let s = scene();
    let mut t = trainer(small_config(), &s);
    assert!(t.run(&[], &s.cams, 5, None, None).is_err());
    let _ = PoseParams::canonical(2);
}
