use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gsavatar_core::body_model::{make_synthetic_body, PoseParams};
use gsavatar_core::config::RunConfig;
use gsavatar_core::dataset_io::{generate_synthetic_scene, load_dataset, read_cameras, read_poses, Split, SynthOptions};
use gsavatar_core::gaussian_cloud::export_pointcloud;
use gsavatar_core::losses::{metric_psnr, metric_ssim, Image, PSNR_CAP};
use gsavatar_core::pipeline::{StageTimes, TimingReport};
use gsavatar_core::rasterizer::{render_mask, save_depth_png, save_mask_png, save_rgb_png, Camera};
use gsavatar_core::trainer::Trainer;
use gsavatar_core::Error;

#[derive(Parser)]
#[command(name = "gsavatar", version, about = "Train, animate and evaluate Gaussian human avatars")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an avatar on a scene directory.
    Train(TrainArgs),
    /// Render one pose from a checkpoint.
    Render(RenderArgs),
    /// Render every pose of a pose file as a numbered image sequence.
    Animate(AnimateArgs),
    /// Per-frame and mean PSNR/SSIM on a dataset split, as CSV.
    Eval(EvalArgs),
    /// Write the canonical Gaussians as a PLY point cloud.
    Export(ExportArgs),
    /// Render a human mask by depth threshold.
    Mask(MaskArgs),
    /// Per-stage inference timing over a pose sequence, as CSV.
    Timing(TimingArgs),
    /// Generate a synthetic scene with a procedural tube figure.
    Synth(SynthArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key override such as `schedule.total_iters=500`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> gsavatar_core::Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let mut cfg = base.with_overrides(&self.overrides)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Scene directory (body.bin, cameras.txt, poses.txt, images/).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Resume even if the checkpoint was written with a different config.
    #[arg(long)]
    allow_config_change: bool,
}

#[derive(Args)]
struct ViewArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Camera file in the dataset format.
    #[arg(long)]
    cameras: PathBuf,
    /// Camera id inside the camera file.
    #[arg(long)]
    camera: String,
    /// Pose file in the dataset format.
    #[arg(long)]
    poses: PathBuf,
}

#[derive(Args)]
struct RenderArgs {
    #[command(flatten)]
    view: ViewArgs,
    /// Frame index in the pose file; the first frame when omitted.
    #[arg(long)]
    frame: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Optional 16-bit depth image.
    #[arg(long)]
    depth: Option<PathBuf>,
    /// Keep the background Gaussians.
    #[arg(long)]
    keep_background: bool,
}

#[derive(Args)]
struct AnimateArgs {
    #[command(flatten)]
    view: ViewArgs,
    /// Output directory for `000000.png`, `000001.png`, ...
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    keep_background: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Write the table here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    keep_background: bool,
}

#[derive(Args)]
struct MaskArgs {
    #[command(flatten)]
    view: ViewArgs,
    #[arg(long)]
    frame: Option<usize>,
    /// Depth threshold in meters.
    #[arg(long, default_value_t = 10.0)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TimingArgs {
    #[command(flatten)]
    view: ViewArgs,
    /// Save the frames here; the save stage is timed as zero without it.
    #[arg(long)]
    save_dir: Option<PathBuf>,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    keep_background: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    joints: usize,
    /// Rings per bone.
    #[arg(long, default_value_t = 12)]
    segments: usize,
    #[arg(long, default_value_t = 4)]
    cameras: usize,
    #[arg(long, default_value_t = 20)]
    frames: usize,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 128)]
    height: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn run(cmd: Command) -> gsavatar_core::Result<()> {
    match cmd {
        Command::Train(a) => train(a),
        Command::Render(a) => render(a),
        Command::Animate(a) => animate(a),
        Command::Eval(a) => eval(a),
        Command::Export(a) => export(a),
        Command::Mask(a) => mask(a),
        Command::Timing(a) => timing(a),
        Command::Synth(a) => synth(a),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

fn create_dir(path: &Path) -> gsavatar_core::Result<()> {
    std::fs::create_dir_all(path).map_err(io_err(path))
}

fn train(a: TrainArgs) -> gsavatar_core::Result<()> {
    let cfg = a.config.resolve()?;
    let data = load_dataset(&a.data, &cfg, Split::Train)?;
    let frames = data
        .frames
        .iter()
        .map(|f| Ok((f.clone(), Image::load_rgb_png(&f.image)?)))
        .collect::<gsavatar_core::Result<Vec<_>>>()?;
    let mut trainer = match &a.resume {
        Some(ckpt) => Trainer::load_checkpoint(ckpt, Some(&cfg), a.allow_config_change)?,
        None => Trainer::new(cfg.clone(), data.body.clone(), data.shape.clone(), &data.cameras)?,
    };
    let ckpt_dir = a.out.join("checkpoints");
    create_dir(&ckpt_dir)?;
    std::fs::write(a.out.join("config.toml"), cfg.to_toml_string()).map_err(io_err(&a.out))?;
    let log_path = a.out.join("train_log.jsonl");
    let file = if a.resume.is_some() {
        File::options().create(true).append(true).open(&log_path)
    } else {
        File::create(&log_path)
    }
    .map_err(io_err(&log_path))?;
    let mut log = BufWriter::new(file);
    log::info!("training on {} frames from iteration {}", frames.len(), trainer.iter);
    trainer.run(&frames, &data.cameras, usize::MAX, Some(&mut log), Some(&ckpt_dir))?;
    log.flush().map_err(io_err(&log_path))?;
    trainer.save_checkpoint(&a.out.join("final.bin"))?;
    export_pointcloud(&trainer.avatar.cloud, &a.out.join("pointcloud.ply"))?;
    log::info!("done after {} iterations, {} gaussians", trainer.iter, trainer.avatar.cloud.len());
    Ok(())
}

struct View {
    trainer: Trainer,
    camera: Camera,
    poses: BTreeMap<usize, PoseParams>,
}

fn load_view(v: &ViewArgs) -> gsavatar_core::Result<View> {
    let trainer = Trainer::load_checkpoint(&v.checkpoint, None, false)?;
    let camera = read_cameras(&v.cameras)?
        .into_iter()
        .find(|c| c.id == v.camera)
        .ok_or_else(|| Error::Config(format!("unknown camera id `{}`", v.camera)))?;
    let poses = read_poses(&v.poses)?;
    if poses.is_empty() {
        return Err(Error::Config(format!("{} has no poses", v.poses.display())));
    }
    Ok(View { trainer, camera, poses })
}

fn pick_pose(poses: &BTreeMap<usize, PoseParams>, frame: Option<usize>) -> gsavatar_core::Result<&PoseParams> {
    match frame {
        Some(f) => poses.get(&f).ok_or_else(|| Error::Config(format!("no pose for frame {f}"))),
        None => Ok(poses.values().next().expect("non-empty")),
    }
}

fn render(a: RenderArgs) -> gsavatar_core::Result<()> {
    let v = load_view(&a.view)?;
    let pose = pick_pose(&v.poses, a.frame)?;
    let settings = &v.trainer.config.render;
    let out = v.trainer.avatar.render(pose, &v.camera, settings, a.keep_background)?;
    save_rgb_png(&a.out, out.width, out.height, &out.rgb)?;
    if let Some(p) = &a.depth {
        save_depth_png(p, out.width, out.height, &out.depth)?;
    }
    Ok(())
}

fn animate(a: AnimateArgs) -> gsavatar_core::Result<()> {
    let v = load_view(&a.view)?;
    create_dir(&a.out)?;
    let settings = &v.trainer.config.render;
    for (k, pose) in v.poses.values().enumerate() {
        let out = v.trainer.avatar.render(pose, &v.camera, settings, a.keep_background)?;
        save_rgb_png(&a.out.join(format!("{k:06}.png")), out.width, out.height, &out.rgb)?;
    }
    log::info!("wrote {} frames to {}", v.poses.len(), a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> gsavatar_core::Result<()> {
    let trainer = Trainer::load_checkpoint(&a.checkpoint, None, false)?;
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
        SplitArg::All => Split::All,
    };
    let data = load_dataset(&a.data, &trainer.config, split)?;
    if data.frames.is_empty() {
        return Err(Error::Config("the selected split has no frames".into()));
    }
    let mut table = String::from("camera,frame,psnr,ssim\n");
    let (mut psnr_sum, mut ssim_sum) = (0.0, 0.0);
    for f in &data.frames {
        let cam = data.camera(&f.camera)?;
        let gt = Image::load_rgb_png(&f.image)?;
        let out = trainer.avatar.render(&f.pose, cam, &trainer.config.render, true)?;
        let pred = Image::new(out.width, out.height, 3, out.rgb)?;
        let psnr = metric_psnr(&pred, &gt, PSNR_CAP)?;
        let ssim = metric_ssim(&pred, &gt)?;
        psnr_sum += psnr;
        ssim_sum += ssim;
        table.push_str(&format!("{},{},{psnr:.6},{ssim:.6}\n", f.camera, f.frame));
    }
    let n = data.frames.len() as f64;
    table.push_str(&format!("mean,,{:.6},{:.6}\n", psnr_sum / n, ssim_sum / n));
    emit(a.out.as_deref(), &table)
}

fn emit(path: Option<&Path>, text: &str) -> gsavatar_core::Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(io_err(p)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn export(a: ExportArgs) -> gsavatar_core::Result<()> {
    let trainer = Trainer::load_checkpoint(&a.checkpoint, None, false)?;
    let cloud = &trainer.avatar.cloud;
    if a.keep_background {
        export_pointcloud(cloud, &a.out)
    } else {
        export_pointcloud(&cloud.filter_background(), &a.out)
    }
}

fn mask(a: MaskArgs) -> gsavatar_core::Result<()> {
    let v = load_view(&a.view)?;
    let pose = pick_pose(&v.poses, a.frame)?;
    let out = v.trainer.avatar.render(pose, &v.camera, &v.trainer.config.render, false)?;
    let m = render_mask(&out.depth, &out.alpha, a.threshold);
    save_mask_png(&a.out, out.width, out.height, &m)
}

fn timing(a: TimingArgs) -> gsavatar_core::Result<()> {
    let v = load_view(&a.view)?;
    if let Some(d) = &a.save_dir {
        create_dir(d)?;
    }
    let settings = &v.trainer.config.render;
    let mut times = Vec::with_capacity(v.poses.len());
    for (k, pose) in v.poses.values().enumerate() {
        let save = a.save_dir.as_ref().map(|d| d.join(format!("{k:06}.png")));
        let (_, t) = v.trainer.avatar.render_timed(pose, &v.camera, settings, a.keep_background, save.as_deref())?;
        times.push(t);
    }
    let gaussians = if a.keep_background {
        v.trainer.avatar.cloud.len()
    } else {
        v.trainer.avatar.cloud.human_count()
    };
    let report = TimingReport::from_times(&times, gaussians, &v.camera);
    log::info!(
        "{} frames, {} gaussians, {} workers, mean {:.4} s over {} stages",
        report.frames,
        report.gaussians,
        report.workers,
        report.total,
        StageTimes::COLUMNS.len()
    );
    emit(a.out.as_deref(), &report.to_csv())
}

fn synth(a: SynthArgs) -> gsavatar_core::Result<()> {
    if a.joints < 1 || a.segments < 1 {
        return Err(Error::Config("--joints and --segments must be positive".into()));
    }
    let body = make_synthetic_body(a.joints, a.segments);
    let opts = SynthOptions {
        cameras: a.cameras,
        frames: a.frames,
        seed: a.seed,
        width: a.width,
        height: a.height,
        ..Default::default()
    };
    create_dir(&a.out)?;
    let scene = generate_synthetic_scene(&body, &opts, &a.out)?;
    log::info!("wrote {} cameras x {} frames to {}", scene.cameras.len(), scene.poses.len(), a.out.display());
    Ok(())
}
