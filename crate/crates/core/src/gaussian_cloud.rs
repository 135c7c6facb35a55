//! Structure-of-arrays Gaussian scene with per-Gaussian parent labels.
//!
//! Human Gaussians are bound to a face of the canonical body mesh and carry
//! that face's canonical normal; background Gaussians live on a sphere
//! around the capture volume and are never deformed.

use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::body_model::{BodyModel, PosedBody};
use crate::error::{Error, Result};
use crate::math::{logit, mat_to_quat, quat_norm, Quat, Vec3, QUAT_IDENTITY};
use crate::rasterizer::sh::SH_C0;

pub const INIT_OPACITY: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParentId {
    Face(u32),
    Background,
}

impl ParentId {
    pub fn is_human(&self) -> bool {
        matches!(self, ParentId::Face(_))
    }

    pub fn face(&self) -> Option<usize> {
        match self {
            ParentId::Face(f) => Some(*f as usize),
            ParentId::Background => None,
        }
    }

    /// Integer encoding used on disk: face index, or -1 for background.
    pub fn to_i64(self) -> i64 {
        match self {
            ParentId::Face(f) => f as i64,
            ParentId::Background => -1,
        }
    }

    pub fn from_i64(v: i64) -> Self {
        if v < 0 {
            ParentId::Background
        } else {
            ParentId::Face(v as u32)
        }
    }
}

impl fmt::Display for ParentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParentId::Face(i) => write!(f, "face {i}"),
            ParentId::Background => write!(f, "background"),
        }
    }
}

/// Number of SH coefficients per color channel for degree `l`.
pub const fn sh_coeff_count(l: usize) -> usize {
    (l + 1) * (l + 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud {
    pub sh_degree: usize,
    pub centers: Vec<Vec3>,
    /// Rotation quaternions `[w, x, y, z]`.
    pub rotations: Vec<Quat>,
    pub log_scales: Vec<Vec3>,
    pub opacity_logits: Vec<f64>,
    /// `N × 3 × K` with `K = (L+1)²`; channel-major within a Gaussian.
    pub sh: Vec<f64>,
    pub parents: Vec<ParentId>,
    /// Canonical surface normal, zero for background Gaussians.
    pub canonical_normals: Vec<Vec3>,
}

impl GaussianCloud {
    pub fn empty(sh_degree: usize) -> Self {
        Self {
            sh_degree,
            centers: Vec::new(),
            rotations: Vec::new(),
            log_scales: Vec::new(),
            opacity_logits: Vec::new(),
            sh: Vec::new(),
            parents: Vec::new(),
            canonical_normals: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn sh_per_channel(&self) -> usize {
        sh_coeff_count(self.sh_degree)
    }

    pub fn sh_stride(&self) -> usize {
        3 * self.sh_per_channel()
    }

    pub fn sh_row(&self, i: usize) -> &[f64] {
        let s = self.sh_stride();
        &self.sh[i * s..(i + 1) * s]
    }

    pub fn human_count(&self) -> usize {
        self.parents.iter().filter(|p| p.is_human()).count()
    }

    pub fn human_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.parents[i].is_human()).collect()
    }

    /// Copies the Gaussians at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let s = self.sh_stride();
        Self {
            sh_degree: self.sh_degree,
            centers: indices.iter().map(|&i| self.centers[i]).collect(),
            rotations: indices.iter().map(|&i| self.rotations[i]).collect(),
            log_scales: indices.iter().map(|&i| self.log_scales[i]).collect(),
            opacity_logits: indices.iter().map(|&i| self.opacity_logits[i]).collect(),
            sh: indices
                .iter()
                .flat_map(|&i| self.sh[i * s..(i + 1) * s].iter().copied())
                .collect(),
            parents: indices.iter().map(|&i| self.parents[i]).collect(),
            canonical_normals: indices.iter().map(|&i| self.canonical_normals[i]).collect(),
        }
    }

    /// Order-preserving concatenation.
    pub fn concat(&self, other: &GaussianCloud) -> Result<Self> {
        if self.sh_degree != other.sh_degree {
            return Err(Error::Dimension(format!(
                "cannot concatenate SH degree {} with degree {}",
                self.sh_degree, other.sh_degree
            )));
        }
        let mut out = self.clone();
        out.centers.extend_from_slice(&other.centers);
        out.rotations.extend_from_slice(&other.rotations);
        out.log_scales.extend_from_slice(&other.log_scales);
        out.opacity_logits.extend_from_slice(&other.opacity_logits);
        out.sh.extend_from_slice(&other.sh);
        out.parents.extend_from_slice(&other.parents);
        out.canonical_normals.extend_from_slice(&other.canonical_normals);
        Ok(out)
    }

    /// Keeps only face-parented Gaussians, in order.
    pub fn filter_background(&self) -> Self {
        self.select(&self.human_indices())
    }

    /// Checks array lengths, unit quaternions, finite attributes, parent
    /// validity against `face_count` and unit normals on human Gaussians.
    pub fn audit(&self, face_count: usize) -> Result<()> {
        let n = self.len();
        let lens = [
            ("rotations", self.rotations.len()),
            ("log_scales", self.log_scales.len()),
            ("opacity_logits", self.opacity_logits.len()),
            ("parents", self.parents.len()),
            ("canonical_normals", self.canonical_normals.len()),
            ("sh", self.sh.len() / self.sh_stride().max(1)),
        ];
        for (name, len) in lens {
            if len != n {
                return Err(Error::validation(name, format!("length {len}, expected {n}")));
            }
        }
        if self.sh.len() != n * self.sh_stride() {
            return Err(Error::validation("sh", "length is not N x 3 x K"));
        }
        for i in 0..n {
            if (quat_norm(&self.rotations[i]) - 1.0).abs() > 1e-6 {
                return Err(Error::validation("rotations", format!("gaussian {i} not unit")));
            }
            if !self.centers[i].iter().all(|v| v.is_finite())
                || !self.log_scales[i].iter().all(|v| v.is_finite())
                || !self.opacity_logits[i].is_finite()
            {
                return Err(Error::validation("centers", format!("gaussian {i} not finite")));
            }
            match self.parents[i] {
                ParentId::Face(f) if f as usize >= face_count => {
                    return Err(Error::validation(
                        "parents",
                        format!("gaussian {i} references face {f} >= {face_count}"),
                    ));
                }
                ParentId::Face(_) => {
                    if (self.canonical_normals[i].norm() - 1.0).abs() > 1e-6 {
                        return Err(Error::validation(
                            "canonical_normals",
                            format!("gaussian {i} normal is not unit"),
                        ));
                    }
                }
                ParentId::Background => {}
            }
        }
        Ok(())
    }
}

/// Mean edge length over all faces of a posed mesh.
pub fn mean_edge_length(model: &BodyModel, body: &PosedBody) -> f64 {
    if model.faces.is_empty() {
        return 0.0;
    }
    let total: f64 = model
        .faces
        .iter()
        .map(|f| {
            let [a, b, c] = f.map(|i| body.vertices[i as usize]);
            (b - a).norm() + (c - b).norm() + (a - c).norm()
        })
        .sum();
    total / (3 * model.faces.len()) as f64
}

/// One Gaussian at the centroid of every canonical face.
///
/// `init_scale` defaults to the mean edge length of the mesh.
pub fn init_human_gaussians(
    model: &BodyModel,
    canonical: &PosedBody,
    sh_degree: usize,
    init_scale: Option<f64>,
) -> GaussianCloud {
    let f = canonical.face_count();
    let scale = init_scale.unwrap_or_else(|| mean_edge_length(model, canonical));
    let k = sh_coeff_count(sh_degree);
    GaussianCloud {
        sh_degree,
        centers: canonical.face_centers.clone(),
        rotations: canonical.face_rotations.iter().map(mat_to_quat).collect(),
        log_scales: vec![Vec3::repeat(scale.ln()); f],
        opacity_logits: vec![logit(INIT_OPACITY); f],
        // zero coefficients evaluate to mid-gray
        sh: vec![0.0; f * 3 * k],
        parents: (0..f as u32).map(ParentId::Face).collect(),
        canonical_normals: canonical.face_normals.clone(),
    }
}

/// `count` Gaussians uniformly distributed on a sphere around the origin.
pub fn init_background_gaussians(
    count: usize,
    radius: f64,
    seed: u64,
    sh_degree: usize,
) -> GaussianCloud {
    assert!(radius > 0.0, "background radius must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = sh_coeff_count(sh_degree);
    let spacing = if count > 0 {
        (4.0 * std::f64::consts::PI * radius * radius / count as f64).sqrt()
    } else {
        1.0
    };
    let mut cloud = GaussianCloud::empty(sh_degree);
    let dc_range = 0.2 / SH_C0;
    for _ in 0..count {
        let z: f64 = rng.random_range(-1.0..=1.0);
        let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let rxy = (1.0 - z * z).max(0.0).sqrt();
        let dir = Vec3::new(rxy * phi.cos(), rxy * phi.sin(), z);
        cloud.centers.push(dir.normalize() * radius);
        cloud.rotations.push(QUAT_IDENTITY);
        cloud.log_scales.push(Vec3::repeat((0.5 * spacing).ln()));
        cloud.opacity_logits.push(logit(INIT_OPACITY));
        for _c in 0..3 {
            cloud.sh.push(rng.random_range(-dc_range..dc_range));
            cloud.sh.extend(std::iter::repeat_n(0.0, k - 1));
        }
        cloud.parents.push(ParentId::Background);
        cloud.canonical_normals.push(Vec3::zeros());
    }
    cloud
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum PlyType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl PlyType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => PlyType::I8,
            "uchar" | "uint8" => PlyType::U8,
            "short" | "int16" => PlyType::I16,
            "ushort" | "uint16" => PlyType::U16,
            "int" | "int32" => PlyType::I32,
            "uint" | "uint32" => PlyType::U32,
            "float" | "float32" => PlyType::F32,
            "double" | "float64" => PlyType::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            PlyType::I8 | PlyType::U8 => 1,
            PlyType::I16 | PlyType::U16 => 2,
            PlyType::I32 | PlyType::U32 | PlyType::F32 => 4,
            PlyType::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            PlyType::I8 => b[0] as i8 as f64,
            PlyType::U8 => b[0] as f64,
            PlyType::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            PlyType::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            PlyType::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            PlyType::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            PlyType::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            PlyType::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

fn ply_property_names(k: usize) -> Vec<String> {
    let mut names: Vec<String> = ["x", "y", "z", "nx", "ny", "nz"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    names.extend((0..3).map(|c| format!("f_dc_{c}")));
    names.extend((0..3 * (k - 1)).map(|i| format!("f_rest_{i}")));
    names.push("opacity".into());
    names.extend((0..3).map(|c| format!("scale_{c}")));
    names.extend((0..4).map(|c| format!("rot_{c}")));
    names
}

/// Writes a binary little-endian PLY with 3D Gaussian splatting property
/// names, all stored as `double`, plus an `int parent` column (-1 =
/// background).
pub fn export_pointcloud(cloud: &GaussianCloud, path: &Path) -> Result<()> {
    let k = cloud.sh_per_channel();
    let names = ply_property_names(k);
    let mut out = Vec::new();
    writeln!(out, "ply").unwrap();
    writeln!(out, "format binary_little_endian 1.0").unwrap();
    writeln!(out, "element vertex {}", cloud.len()).unwrap();
    for n in &names {
        writeln!(out, "property double {n}").unwrap();
    }
    writeln!(out, "property int parent").unwrap();
    writeln!(out, "end_header").unwrap();
    for i in 0..cloud.len() {
        let sh = cloud.sh_row(i);
        let mut row: Vec<f64> = Vec::with_capacity(names.len());
        row.extend(cloud.centers[i].iter());
        row.extend(cloud.canonical_normals[i].iter());
        row.extend((0..3).map(|c| sh[c * k]));
        for c in 0..3 {
            row.extend_from_slice(&sh[c * k + 1..(c + 1) * k]);
        }
        row.push(cloud.opacity_logits[i]);
        row.extend(cloud.log_scales[i].iter());
        row.extend_from_slice(&cloud.rotations[i]);
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let parent = cloud.parents[i].to_i64() as i32;
        out.extend_from_slice(&parent.to_le_bytes());
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a binary little-endian Gaussian PLY. Float and double columns are
/// both accepted; `nx/ny/nz` and `parent` are optional (absent parent means
/// background).
pub fn import_pointcloud(path: &Path) -> Result<GaussianCloud> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut line = String::new();
    let mut props: Vec<(String, PlyType)> = Vec::new();
    let mut count: Option<usize> = None;
    let mut in_vertex = false;
    let mut first = true;
    loop {
        line.clear();
        let n = reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            return Err(Error::Format("PLY header not terminated".into()));
        }
        let t = line.trim();
        if first {
            if t != "ply" {
                return Err(Error::Format("missing `ply` magic".into()));
            }
            first = false;
            continue;
        }
        let parts: Vec<&str> = t.split_whitespace().collect();
        match parts.as_slice() {
            ["format", fmt, _] => {
                if *fmt != "binary_little_endian" {
                    return Err(Error::Format(format!("unsupported PLY format `{fmt}`")));
                }
            }
            ["element", name, n] => {
                in_vertex = *name == "vertex";
                if in_vertex {
                    count = Some(n.parse().map_err(|_| Error::Format("bad vertex count".into()))?);
                } else if n.parse::<usize>().ok() != Some(0) {
                    return Err(Error::Format(format!("unsupported element `{name}`")));
                }
            }
            ["property", "list", ..] => {
                return Err(Error::Format("list properties are not supported".into()));
            }
            ["property", ty, name] if in_vertex => {
                let ty = PlyType::parse(ty)
                    .ok_or_else(|| Error::Format(format!("unknown property type `{ty}`")))?;
                props.push((name.to_string(), ty));
            }
            ["end_header"] => break,
            _ => {}
        }
    }
    let count = count.ok_or_else(|| Error::Format("no vertex element".into()))?;

    let find = |n: &str| props.iter().position(|(p, _)| p == n);
    let rest_count = props.iter().filter(|(p, _)| p.starts_with("f_rest_")).count();
    if rest_count % 3 != 0 {
        return Err(Error::Format(format!("{rest_count} f_rest columns is not a multiple of 3")));
    }
    let k = rest_count / 3 + 1;
    let degree = (k as f64).sqrt().round() as usize - 1;
    if sh_coeff_count(degree) != k {
        return Err(Error::Format(format!("{k} SH coefficients is not a square")));
    }
    let mut required: Vec<String> = ["x", "y", "z", "opacity"].iter().map(|s| s.to_string()).collect();
    required.extend((0..3).map(|c| format!("f_dc_{c}")));
    required.extend((0..3 * (k - 1)).map(|i| format!("f_rest_{i}")));
    required.extend((0..3).map(|c| format!("scale_{c}")));
    required.extend((0..4).map(|c| format!("rot_{c}")));
    let missing: Vec<&String> = required.iter().filter(|r| find(r).is_none()).collect();
    if !missing.is_empty() {
        let list: Vec<&str> = missing.iter().map(|s| s.as_str()).collect();
        return Err(Error::Format(format!(
            "missing required properties: {}",
            list.join(", ")
        )));
    }
    let idx = |n: &str| find(n).unwrap();
    let col = |n: &str| find(n);

    let mut offsets = Vec::with_capacity(props.len());
    let mut stride = 0;
    for (_, t) in &props {
        offsets.push(stride);
        stride += t.size();
    }
    let mut data = vec![0u8; stride * count];
    reader
        .read_exact(&mut data)
        .map_err(|_| Error::Format("PLY payload truncated".into()))?;
    let get = |row: &[u8], c: usize| props[c].1.read(&row[offsets[c]..]);

    let mut cloud = GaussianCloud::empty(degree);
    let (ix, iy, iz) = (idx("x"), idx("y"), idx("z"));
    let normals = [col("nx"), col("ny"), col("nz")];
    let dc: Vec<usize> = (0..3).map(|c| idx(&format!("f_dc_{c}"))).collect();
    let rest: Vec<usize> = (0..3 * (k - 1)).map(|i| idx(&format!("f_rest_{i}"))).collect();
    let scales: Vec<usize> = (0..3).map(|c| idx(&format!("scale_{c}"))).collect();
    let rots: Vec<usize> = (0..4).map(|c| idx(&format!("rot_{c}"))).collect();
    let (iop, iparent) = (idx("opacity"), col("parent"));
    for row in data.chunks_exact(stride.max(1)).take(count) {
        cloud.centers.push(Vec3::new(get(row, ix), get(row, iy), get(row, iz)));
        let n = normals.map(|c| c.map_or(0.0, |c| get(row, c)));
        cloud.canonical_normals.push(Vec3::new(n[0], n[1], n[2]));
        for c in 0..3 {
            cloud.sh.push(get(row, dc[c]));
            for j in 0..k - 1 {
                cloud.sh.push(get(row, rest[c * (k - 1) + j]));
            }
        }
        cloud.opacity_logits.push(get(row, iop));
        cloud
            .log_scales
            .push(Vec3::new(get(row, scales[0]), get(row, scales[1]), get(row, scales[2])));
        cloud.rotations.push([
            get(row, rots[0]),
            get(row, rots[1]),
            get(row, rots[2]),
            get(row, rots[3]),
        ]);
        cloud.parents.push(match iparent {
            Some(c) => ParentId::from_i64(get(row, c) as i64),
            None => ParentId::Background,
        });
    }
    Ok(cloud)
}
