use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn gsavatar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gsavatar"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = gsavatar(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SCHEDULE: [&str; 20] = [
    "--set", "schedule.total_iters=20",
    "--set", "schedule.warmup_iters=5",
    "--set", "schedule.alternation_block=5",
    "--set", "schedule.densify_from=5",
    "--set", "schedule.densify_until=15",
    "--set", "schedule.parent_update_every=7",
    "--set", "schedule.checkpoint_every=10",
    "--set", "model.drm_hidden=8",
    "--set", "model.background_count=50",
    "--set", "model.sh_degree=1",
];

fn synth(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    ok(&[
        "synth", "--out", s(&data), "--joints", "2", "--segments", "4", "--cameras", "2", "--frames", "4", "--width",
        "24", "--height", "24",
    ]);
    data
}

fn train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", s(data), "--out", s(out)];
    args.extend(SCHEDULE);
    args.extend(extra);
    gsavatar(&args)
}

fn trained(dir: &Path) -> (PathBuf, PathBuf) {
    let data = synth(dir);
    let out = dir.join("run");
    let r = train(&data, &out, &[]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    (data, out.join("final.bin"))
}

#[test]
fn train_writes_log_checkpoints_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let (_, final_ckpt) = trained(dir.path());
    let run = dir.path().join("run");
    assert!(final_ckpt.exists());
    assert!(run.join("checkpoints/ckpt_0000010.bin").exists());
    assert!(run.join("checkpoints/ckpt_0000020.bin").exists());
    assert!(run.join("pointcloud.ply").exists());
    let log = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 20);
}

#[test]
fn resume_reaches_the_same_final_state() {
    let dir = tempfile::tempdir().unwrap();
    let (data, final_ckpt) = trained(dir.path());
    let resumed = dir.path().join("resumed");
    let ckpt = dir.path().join("run/checkpoints/ckpt_0000010.bin");
    let r = train(&data, &resumed, &["--resume", s(&ckpt)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(std::fs::read(resumed.join("final.bin")).unwrap(), std::fs::read(final_ckpt).unwrap());
    let log = std::fs::read_to_string(resumed.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 10);
}

#[test]
fn resume_with_changed_config_needs_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = trained(dir.path());
    let ckpt = dir.path().join("run/checkpoints/ckpt_0000010.bin");
    let other = dir.path().join("other");
    let r = train(&data, &other, &["--resume", s(&ckpt), "--set", "model.tau=0.2"]);
    assert_eq!(r.status.code(), Some(2));
    let r = train(&data, &other, &["--resume", s(&ckpt), "--set", "model.tau=0.2", "--allow-config-change"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
}

#[test]
fn bad_override_and_bad_flags_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let out = dir.path().join("x");
    let r = gsavatar(&["train", "--data", s(&data), "--out", s(&out), "--set", "schedule.no_such_key=1"]);
    assert_eq!(r.status.code(), Some(2));
    let r = gsavatar(&["train", "--data", s(&data), "--out", s(&out), "--set", "schedule.total_iters=many"]);
    assert_eq!(r.status.code(), Some(2));
    assert_eq!(gsavatar(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(gsavatar(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn missing_dataset_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let r = gsavatar(&["train", "--data", s(&dir.path().join("nope")), "--out", s(&dir.path().join("o"))]);
    assert_eq!(r.status.code(), Some(1));
}

fn view<'a>(ckpt: &'a Path, cams: &'a str, poses: &'a str) -> Vec<&'a str> {
    vec!["--checkpoint", s(ckpt), "--cameras", cams, "--camera", "cam00", "--poses", poses]
}

#[test]
fn render_animate_mask_timing_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained(dir.path());
    let cams = data.join("cameras.txt");
    let poses = data.join("poses.txt");
    let (cams, poses) = (s(&cams), s(&poses));

    let img = dir.path().join("r.png");
    let mut args = vec!["render"];
    args.extend(view(&ckpt, cams, poses));
    args.extend(["--frame", "2", "--out", s(&img)]);
    ok(&args);
    let human = image::open(&img).unwrap().to_rgb8();
    assert_eq!(human.dimensions(), (24, 24));
    let full_path = dir.path().join("full.png");
    let mut args = vec!["render"];
    args.extend(view(&ckpt, cams, poses));
    args.extend(["--frame", "2", "--keep-background", "--out", s(&full_path)]);
    ok(&args);
    assert_ne!(image::open(&full_path).unwrap().to_rgb8(), human);

    let anim = dir.path().join("anim");
    let mut args = vec!["animate"];
    args.extend(view(&ckpt, cams, poses));
    args.extend(["--out", s(&anim)]);
    ok(&args);
    let mut names: Vec<_> = std::fs::read_dir(&anim).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names, ["000000.png", "000001.png", "000002.png", "000003.png"]);
    assert_eq!(image::open(anim.join("000002.png")).unwrap().to_rgb8(), human);

    let mask = dir.path().join("m.png");
    let mut args = vec!["mask"];
    args.extend(view(&ckpt, cams, poses));
    args.extend(["--out", s(&mask)]);
    ok(&args);
    let m = image::open(&mask).unwrap().to_luma8();
    assert!(m.pixels().all(|p| p.0[0] == 0 || p.0[0] == 255));
    let zero = dir.path().join("m0.png");
    let mut args = vec!["mask"];
    args.extend(view(&ckpt, cams, poses));
    args.extend(["--threshold", "0", "--out", s(&zero)]);
    ok(&args);
    assert!(image::open(&zero).unwrap().to_luma8().pixels().all(|p| p.0[0] == 0));

    let mut args = vec!["timing"];
    args.extend(view(&ckpt, cams, poses));
    let out = ok(&args);
    let csv = String::from_utf8(out.stdout).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "pvd,posing,drm,residual_posing,rendering,image_save,total,fps_with_save,fps_without_save"
    );
    let row: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    let stages: f64 = row[..6].iter().sum();
    assert!((stages - row[6]).abs() < 1e-5);

    let ply = dir.path().join("a.ply");
    ok(&["export", "--checkpoint", s(&ckpt), "--out", s(&ply)]);
    assert!(std::fs::read(&ply).unwrap().starts_with(b"ply\n"));
}

#[test]
fn unknown_camera_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained(dir.path());
    let r = gsavatar(&[
        "render",
        "--checkpoint",
        s(&ckpt),
        "--cameras",
        s(&data.join("cameras.txt")),
        "--camera",
        "cam99",
        "--poses",
        s(&data.join("poses.txt")),
        "--out",
        s(&dir.path().join("x.png")),
    ]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("cam99"));
}

#[test]
fn eval_table_mean_is_the_row_mean_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained(dir.path());
    let run = || ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--split", "all"]).stdout;
    let a = run();
    assert_eq!(a, run());
    let text = String::from_utf8(a).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "camera,frame,psnr,ssim");
    let rows: Vec<Vec<&str>> = lines[1..].iter().map(|l| l.split(',').collect()).collect();
    let (body, mean) = rows.split_at(rows.len() - 1);
    assert_eq!(body.len(), 8);
    assert_eq!(mean[0][0], "mean");
    for col in [2, 3] {
        let m: f64 = body.iter().map(|r| r[col].parse::<f64>().unwrap()).sum::<f64>() / body.len() as f64;
        assert!((m - mean[0][col].parse::<f64>().unwrap()).abs() < 1e-5);
    }
}
