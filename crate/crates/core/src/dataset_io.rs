//! On-disk scene layout, text formats and the synthetic scene generator.
//!
//! ```text
//! root/
//!   body.bin                    body model container
//!   cameras.txt                 camera blocks
//!   poses.txt                   one line per frame
//!   shape.txt                   shape coefficients (may be empty)
//!   images/<cam>/<frame:06>.png
//!   masks/<cam>/<frame:06>.png  optional foreground masks
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::body_model::{load_body_model, pose_body, save_body_model, BodyModel, PoseParams, ShapeParams};
use crate::config::{DataConfig, RunConfig};
use crate::error::{Error, Result};
use crate::math::{Mat3, RigidTransform, Vec3};
use crate::rasterizer::{save_mask_png, save_rgb_png, Camera};

pub const CAMERAS_FILE: &str = "cameras.txt";
pub const POSES_FILE: &str = "poses.txt";
pub const SHAPE_FILE: &str = "shape.txt";
pub const BODY_FILE: &str = "body.bin";

pub fn image_path(root: &Path, camera: &str, frame: usize) -> PathBuf {
    root.join("images").join(camera).join(format!("{frame:06}.png"))
}

pub fn mask_path(root: &Path, camera: &str, frame: usize) -> PathBuf {
    root.join("masks").join(camera).join(format!("{frame:06}.png"))
}

fn parse_err(file: &Path, line: usize, reason: impl Into<String>) -> Error {
    Error::Parse {
        file: file.display().to_string(),
        line,
        reason: reason.into(),
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, s: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn parse_floats(file: &Path, line: usize, toks: &[&str]) -> Result<Vec<f64>> {
    toks.iter()
        .map(|t| t.parse::<f64>().map_err(|_| parse_err(file, line, format!("`{t}` is not a number"))))
        .collect()
}

/// Lines without comments, with 1-based line numbers.
fn content_lines(s: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    s.lines().enumerate().filter_map(|(i, l)| {
        let l = l.split('#').next().unwrap_or("").trim();
        (!l.is_empty()).then(|| (i + 1, l.split_whitespace().collect()))
    })
}

pub fn format_cameras(cams: &[Camera]) -> String {
    let mut s = String::from("# world_to_camera is a row-major 3x4 [R | t]\n");
    for c in cams {
        let r = &c.world_to_camera.rotation;
        let t = &c.world_to_camera.translation;
        let _ = writeln!(s, "camera {}", c.id);
        let _ = writeln!(s, "  width {}\n  height {}", c.width, c.height);
        let _ = writeln!(s, "  fx {:?}\n  fy {:?}\n  cx {:?}\n  cy {:?}", c.fx, c.fy, c.cx, c.cy);
        let _ = writeln!(s, "  near {:?}\n  far {:?}", c.near, c.far);
        let _ = write!(s, "  world_to_camera");
        for row in 0..3 {
            for col in 0..3 {
                let _ = write!(s, " {:?}", r[(row, col)]);
            }
            let _ = write!(s, " {:?}", t[row]);
        }
        let _ = writeln!(s, "\nend");
    }
    s
}

pub fn parse_cameras(text: &str, file: &Path) -> Result<Vec<Camera>> {
    let mut cams = Vec::new();
    let mut cur: Option<(usize, String, BTreeMap<String, Vec<f64>>)> = None;
    for (ln, toks) in content_lines(text) {
        match (toks[0], cur.as_mut()) {
            ("camera", None) => {
                if toks.len() != 2 {
                    return Err(parse_err(file, ln, "expected `camera <id>`"));
                }
                cur = Some((ln, toks[1].to_string(), BTreeMap::new()));
            }
            ("camera", Some(_)) => return Err(parse_err(file, ln, "missing `end` before new camera")),
            ("end", Some(_)) => {
                let (start, id, f) = cur.take().unwrap();
                let get = |k: &str, n: usize| -> Result<Vec<f64>> {
                    match f.get(k) {
                        Some(v) if v.len() == n => Ok(v.clone()),
                        Some(v) => Err(parse_err(file, start, format!("`{k}` needs {n} values, got {}", v.len()))),
                        None => Err(parse_err(file, start, format!("camera {id} is missing `{k}`"))),
                    }
                };
                let m = get("world_to_camera", 12)?;
                let rot = Mat3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
                let cam = Camera {
                    id: id.clone(),
                    fx: get("fx", 1)?[0],
                    fy: get("fy", 1)?[0],
                    cx: get("cx", 1)?[0],
                    cy: get("cy", 1)?[0],
                    world_to_camera: RigidTransform::new(rot, Vec3::new(m[3], m[7], m[11])),
                    width: get("width", 1)?[0] as usize,
                    height: get("height", 1)?[0] as usize,
                    near: f.get("near").map_or(0.01, |v| v[0]),
                    far: f.get("far").map_or(1000.0, |v| v[0]),
                };
                cam.validate().map_err(|e| parse_err(file, start, e.to_string()))?;
                if cams.iter().any(|c: &Camera| c.id == id) {
                    return Err(parse_err(file, start, format!("duplicate camera id {id}")));
                }
                cams.push(cam);
            }
            ("end", None) => return Err(parse_err(file, ln, "`end` without camera")),
            (key, Some((_, _, fields))) => {
                let vals = parse_floats(file, ln, &toks[1..])?;
                if vals.is_empty() {
                    return Err(parse_err(file, ln, format!("`{key}` has no value")));
                }
                fields.insert(key.to_string(), vals);
            }
            (key, None) => return Err(parse_err(file, ln, format!("unexpected `{key}` outside a camera block"))),
        }
    }
    if let Some((ln, id, _)) = cur {
        return Err(parse_err(file, ln, format!("camera {id} is not terminated by `end`")));
    }
    Ok(cams)
}

pub fn write_cameras(path: &Path, cams: &[Camera]) -> Result<()> {
    write_text(path, &format_cameras(cams))
}

pub fn read_cameras(path: &Path) -> Result<Vec<Camera>> {
    parse_cameras(&read_text(path)?, path)
}

/// `joints J` header, then `frame tx ty tz` followed by J axis-angle triples.
pub fn format_poses(poses: &BTreeMap<usize, PoseParams>) -> String {
    let j = poses.values().next().map_or(0, |p| p.rotations.len());
    let mut s = format!("# frame tx ty tz then {j} axis-angle triples\njoints {j}\n");
    for (f, p) in poses {
        let _ = write!(s, "{f} {:?} {:?} {:?}", p.translation.x, p.translation.y, p.translation.z);
        for r in &p.rotations {
            let _ = write!(s, " {:?} {:?} {:?}", r.x, r.y, r.z);
        }
        s.push('\n');
    }
    s
}

pub fn parse_poses(text: &str, file: &Path) -> Result<BTreeMap<usize, PoseParams>> {
    let mut joints = None;
    let mut out = BTreeMap::new();
    for (ln, toks) in content_lines(text) {
        if toks[0] == "joints" {
            let n = toks
                .get(1)
                .and_then(|t| t.parse::<usize>().ok())
                .ok_or_else(|| parse_err(file, ln, "expected `joints <count>`"))?;
            joints = Some(n);
            continue;
        }
        let j = joints.ok_or_else(|| parse_err(file, ln, "missing `joints` header"))?;
        let frame = toks[0]
            .parse::<usize>()
            .map_err(|_| parse_err(file, ln, format!("`{}` is not a frame index", toks[0])))?;
        let v = parse_floats(file, ln, &toks[1..])?;
        if v.len() != 3 + 3 * j {
            return Err(parse_err(file, ln, format!("expected {} values, got {}", 3 + 3 * j, v.len())));
        }
        let pose = PoseParams {
            translation: Vec3::new(v[0], v[1], v[2]),
            rotations: (0..j).map(|k| Vec3::new(v[3 + 3 * k], v[4 + 3 * k], v[5 + 3 * k])).collect(),
        };
        if out.insert(frame, pose).is_some() {
            return Err(parse_err(file, ln, format!("duplicate frame {frame}")));
        }
    }
    Ok(out)
}

pub fn write_poses(path: &Path, poses: &BTreeMap<usize, PoseParams>) -> Result<()> {
    write_text(path, &format_poses(poses))
}

pub fn read_poses(path: &Path) -> Result<BTreeMap<usize, PoseParams>> {
    parse_poses(&read_text(path)?, path)
}

pub fn write_shape(path: &Path, shape: &ShapeParams) -> Result<()> {
    let vals: Vec<String> = shape.betas.iter().map(|b| format!("{b:?}")).collect();
    write_text(path, &format!("{}\n", vals.join(" ")))
}

pub fn read_shape(path: &Path) -> Result<ShapeParams> {
    let text = read_text(path)?;
    let mut betas = Vec::new();
    for (ln, toks) in content_lines(&text) {
        betas.extend(parse_floats(path, ln, &toks)?);
    }
    Ok(ShapeParams { betas })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub camera: String,
    pub frame: usize,
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
    pub pose: PoseParams,
}

#[derive(Debug, Clone)]
pub struct SceneDataset {
    pub root: PathBuf,
    pub body: BodyModel,
    pub shape: ShapeParams,
    pub cameras: Vec<Camera>,
    pub poses: BTreeMap<usize, PoseParams>,
    pub frames: Vec<FrameRecord>,
}

impl SceneDataset {
    pub fn camera(&self, id: &str) -> Result<&Camera> {
        self.cameras
            .iter()
            .find(|c| c.id == id)
            .ok_or_else(|| Error::validation("cameras", format!("unknown camera id `{id}`")))
    }

    /// Mean distance of the camera centers from the origin.
    pub fn rig_radius(&self) -> f64 {
        rig_radius(&self.cameras)
    }
}

pub fn rig_radius(cams: &[Camera]) -> f64 {
    if cams.is_empty() {
        return 1.0;
    }
    cams.iter().map(|c| c.center().norm()).sum::<f64>() / cams.len() as f64
}

fn split_accepts(data: &DataConfig, split: Split, camera: &str, frame: usize) -> bool {
    let (cams, offset) = match split {
        Split::All => return true,
        Split::Train => (&data.train_cameras, 0),
        Split::Test => (&data.test_cameras, data.test_offset % data.stride),
    };
    (cams.is_empty() || cams.iter().any(|c| c == camera)) && frame % data.stride == offset
}

/// Loads and validates a scene, keeping the frames of `split`.
pub fn load_dataset(root: &Path, config: &RunConfig, split: Split) -> Result<SceneDataset> {
    let body = load_body_model(&root.join(BODY_FILE))?;
    let shape_path = root.join(SHAPE_FILE);
    let shape = if shape_path.exists() {
        read_shape(&shape_path)?
    } else {
        ShapeParams::default()
    };
    if shape.betas.len() > body.shape_count {
        return Err(Error::validation(
            "shape",
            format!("{} coefficients, body has {}", shape.betas.len(), body.shape_count),
        ));
    }
    let cameras = read_cameras(&root.join(CAMERAS_FILE))?;
    let poses = read_poses(&root.join(POSES_FILE))?;
    for (f, p) in &poses {
        if p.rotations.len() != body.joint_count() || !p.is_finite() {
            return Err(Error::validation(
                "poses",
                format!("frame {f}: {} joints, body has {}", p.rotations.len(), body.joint_count()),
            ));
        }
    }
    for c in config.data.train_cameras.iter().chain(&config.data.test_cameras) {
        if !cameras.iter().any(|k| &k.id == c) {
            return Err(Error::Config(format!("configured camera `{c}` is not in {CAMERAS_FILE}")));
        }
    }

    let mut frames = Vec::new();
    let mut missing = Vec::new();
    for cam in &cameras {
        let dir = root.join("images").join(&cam.id);
        let Ok(entries) = std::fs::read_dir(&dir) else { continue };
        let mut idx: Vec<usize> = entries
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                name.strip_suffix(".png")?.parse::<usize>().ok()
            })
            .collect();
        idx.sort_unstable();
        for f in idx {
            let Some(pose) = poses.get(&f) else {
                missing.push(format!("{}/{f:06}", cam.id));
                continue;
            };
            if !split_accepts(&config.data, split, &cam.id, f) {
                continue;
            }
            let image = image_path(root, &cam.id, f);
            let (w, h) = image::image_dimensions(&image)
                .map_err(|e| Error::Image(format!("{}: {e}", image.display())))?;
            if (w as usize, h as usize) != (cam.width, cam.height) {
                return Err(Error::Dimension(format!(
                    "{} is {w}x{h}, camera {} is {}x{}",
                    image.display(),
                    cam.id,
                    cam.width,
                    cam.height
                )));
            }
            let mask = mask_path(root, &cam.id, f);
            frames.push(FrameRecord {
                camera: cam.id.clone(),
                frame: f,
                image,
                mask: mask.exists().then_some(mask),
                pose: pose.clone(),
            });
        }
    }
    if !missing.is_empty() {
        return Err(Error::validation("poses", format!("no pose for images {}", missing.join(", "))));
    }
    Ok(SceneDataset {
        root: root.to_path_buf(),
        body,
        shape,
        cameras,
        poses,
        frames,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub cameras: usize,
    pub frames: usize,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub ring_radius: f64,
    pub ring_height: f64,
    pub focal: f64,
    /// Peak joint rotation in radians.
    pub amplitude: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            cameras: 4,
            frames: 20,
            seed: 0,
            width: 128,
            height: 128,
            ring_radius: 2.5,
            ring_height: 0.2,
            focal: 150.0,
            amplitude: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub cameras: Vec<Camera>,
    pub poses: BTreeMap<usize, PoseParams>,
}

/// Cameras evenly spaced on a horizontal ring, all looking at the origin.
pub fn ring_cameras(opts: &SynthOptions) -> Vec<Camera> {
    let target = Vec3::new(0.0, 0.05, 0.0);
    (0..opts.cameras)
        .map(|k| {
            let phi = 2.0 * std::f64::consts::PI * k as f64 / opts.cameras as f64;
            let eye = Vec3::new(opts.ring_radius * phi.sin(), opts.ring_height, opts.ring_radius * phi.cos());
            Camera::look_at(&format!("cam{k:02}"), eye, target, Vec3::y(), opts.focal, opts.width, opts.height)
        })
        .collect()
}

/// Smooth seeded pose trajectory.
pub fn synthetic_poses(joints: usize, frames: usize, amplitude: f64, seed: u64) -> BTreeMap<usize, PoseParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let axes: Vec<(Vec3, f64, f64)> = (0..joints)
        .map(|_| {
            let a = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let a = if a.norm() < 1e-3 { Vec3::z() } else { a.normalize() };
            (a, rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.5..1.5))
        })
        .collect();
    (0..frames)
        .map(|t| {
            let s = t as f64 / frames.max(1) as f64;
            let rotations = axes
                .iter()
                .enumerate()
                .map(|(j, (axis, phase, freq))| {
                    let amp = if j == 0 { 0.4 * amplitude } else { amplitude };
                    axis * (amp * (std::f64::consts::TAU * freq * s + phase).sin())
                })
                .collect();
            (t, PoseParams { rotations, translation: Vec3::new(0.0, 0.02 * (std::f64::consts::TAU * s).sin(), 0.0) })
        })
        .collect()
}

/// Environment color painted on a sphere of radius `radius` around the
/// origin, seen along the ray `origin + s·dir`.
pub fn environment_color(origin: &Vec3, dir: &Vec3, radius: f64) -> [f64; 3] {
    let b = origin.dot(dir);
    let c = origin.norm_squared() - radius * radius;
    let s = -b + (b * b - c).max(0.0).sqrt();
    let p = (origin + dir * s) / radius;
    [
        0.45 + 0.15 * p.y + 0.08 * p.x,
        0.42 + 0.12 * p.y - 0.06 * p.z,
        0.50 + 0.18 * p.y + 0.05 * (p.x * p.z),
    ]
}

fn palette(j: usize) -> [f64; 3] {
    const P: [[f64; 3]; 8] = [
        [0.80, 0.35, 0.25],
        [0.90, 0.75, 0.55],
        [0.20, 0.35, 0.70],
        [0.25, 0.55, 0.30],
        [0.85, 0.60, 0.20],
        [0.55, 0.30, 0.65],
        [0.15, 0.25, 0.55],
        [0.20, 0.45, 0.25],
    ];
    P[j % P.len()]
}

/// Procedural per-vertex albedo from the rest shape.
pub fn vertex_colors(body: &BodyModel) -> Vec<[f64; 3]> {
    let jc = body.joint_count();
    (0..body.vertex_count())
        .map(|v| {
            let mut c = [0.0; 3];
            for j in 0..jc {
                let w = body.weight(v, j);
                for k in 0..3 {
                    c[k] += w * palette(j)[k];
                }
            }
            let p = body.template_vertices[v];
            let stripe = 0.8 + 0.2 * (14.0 * p.y).sin() * (6.0 * p.x + 3.0 * p.z).cos();
            c.map(|x| (x * stripe).clamp(0.0, 1.0))
        })
        .collect()
}

/// Z-buffered, perspective-correct triangle rasterization of an unlit
/// vertex-colored mesh. Returns RGB, coverage and depth.
pub fn rasterize_mesh(
    vertices: &[Vec3],
    faces: &[[u32; 3]],
    colors: &[[f64; 3]],
    camera: &Camera,
) -> (Vec<[f64; 3]>, Vec<bool>, Vec<f64>) {
    let (w, h) = (camera.width, camera.height);
    let mut depth = vec![f64::INFINITY; w * h];
    let mut rgb = vec![[0.0; 3]; w * h];
    let cam: Vec<Vec3> = vertices.iter().map(|v| camera.world_to_camera.apply(v)).collect();
    for f in faces {
        let idx = f.map(|i| i as usize);
        let p = idx.map(|i| cam[i]);
        if p.iter().any(|q| q.z <= camera.near) {
            continue;
        }
        let s = p.map(|q| (camera.fx * q.x / q.z + camera.cx, camera.fy * q.y / q.z + camera.cy));
        let area = (s[1].0 - s[0].0) * (s[2].1 - s[0].1) - (s[2].0 - s[0].0) * (s[1].1 - s[0].1);
        if area.abs() < 1e-12 {
            continue;
        }
        let xmin = s.iter().map(|q| q.0).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let xmax = s.iter().map(|q| q.0).fold(f64::NEG_INFINITY, f64::max).ceil().min(w as f64 - 1.0);
        let ymin = s.iter().map(|q| q.1).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let ymax = s.iter().map(|q| q.1).fold(f64::NEG_INFINITY, f64::max).ceil().min(h as f64 - 1.0);
        if xmax < 0.0 || ymax < 0.0 {
            continue;
        }
        for y in ymin..=ymax as usize {
            for x in xmin..=xmax as usize {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let edge = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (py - a.1) - (b.1 - a.1) * (px - a.0);
                let b0 = edge(s[1], s[2]) / area;
                let b1 = edge(s[2], s[0]) / area;
                let b2 = edge(s[0], s[1]) / area;
                if b0 < 0.0 || b1 < 0.0 || b2 < 0.0 {
                    continue;
                }
                let inv = b0 / p[0].z + b1 / p[1].z + b2 / p[2].z;
                let z = 1.0 / inv;
                let pix = y * w + x;
                if z >= depth[pix] {
                    continue;
                }
                depth[pix] = z;
                let wts = [b0 / p[0].z * z, b1 / p[1].z * z, b2 / p[2].z * z];
                let mut c = [0.0; 3];
                for k in 0..3 {
                    for (t, &vi) in idx.iter().enumerate() {
                        c[k] += wts[t] * colors[vi][k];
                    }
                }
                rgb[pix] = c;
            }
        }
    }
    let mask = depth.iter().map(|d| d.is_finite()).collect();
    (rgb, mask, depth)
}

/// Renders one frame of the reference avatar in front of the environment.
pub fn render_reference(
    body: &BodyModel,
    colors: &[[f64; 3]],
    pose: &PoseParams,
    camera: &Camera,
    env_radius: f64,
) -> Result<(Vec<f64>, Vec<bool>)> {
    let posed = pose_body(body, &ShapeParams::default(), pose)?;
    let (rgb, mask, _) = rasterize_mesh(&posed.vertices, &body.faces, colors, camera);
    let center = camera.center();
    let r_t = camera.world_to_camera.rotation.transpose();
    let mut out = vec![0.0; camera.width * camera.height * 3];
    for y in 0..camera.height {
        for x in 0..camera.width {
            let pix = y * camera.width + x;
            let c = if mask[pix] {
                rgb[pix]
            } else {
                let d = Vec3::new(
                    (x as f64 + 0.5 - camera.cx) / camera.fx,
                    (y as f64 + 0.5 - camera.cy) / camera.fy,
                    1.0,
                );
                environment_color(&center, &(r_t * d).normalize(), env_radius)
            };
            out[pix * 3..pix * 3 + 3].copy_from_slice(&c);
        }
    }
    Ok((out, mask))
}

/// Writes a complete synthetic scene under `out`.
pub fn generate_synthetic_scene(body: &BodyModel, opts: &SynthOptions, out: &Path) -> Result<SyntheticScene> {
    body.validate()?;
    let cameras = ring_cameras(opts);
    let poses = synthetic_poses(body.joint_count(), opts.frames, opts.amplitude, opts.seed);
    save_body_model(body, &out.join(BODY_FILE))?;
    write_cameras(&out.join(CAMERAS_FILE), &cameras)?;
    write_poses(&out.join(POSES_FILE), &poses)?;
    write_shape(&out.join(SHAPE_FILE), &ShapeParams::default())?;
    let colors = vertex_colors(body);
    let env_radius = 2.0 * opts.ring_radius;
    for cam in &cameras {
        for sub in ["images", "masks"] {
            let d = out.join(sub).join(&cam.id);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
    }
    let jobs: Vec<(&Camera, usize)> = cameras
        .iter()
        .flat_map(|c| (0..opts.frames).map(move |f| (c, f)))
        .collect();
    jobs.par_iter().try_for_each(|(cam, f)| -> Result<()> {
        let (rgb, mask) = render_reference(body, &colors, &poses[f], cam, env_radius)?;
        save_rgb_png(&image_path(out, &cam.id, *f), cam.width, cam.height, &rgb)?;
        save_mask_png(&mask_path(out, &cam.id, *f), cam.width, cam.height, &mask)
    })?;
    Ok(SyntheticScene { cameras, poses })
}
