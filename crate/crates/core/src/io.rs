//! File formats: meshes, PNG images, pose/twist/intrinsics text, TOML
//! configuration, training datasets, sequence directories and trajectories.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera::CameraIntrinsics;
use crate::image::{DepthImage, RgbImage, RgbdImage};
use crate::mesh::{MeshError, TriangleMesh};
use crate::nn::{NetworkSpec, TrainConfig};
use crate::synth::{AugmentationParams, PerturbationParams, SequenceConfig, SynthConfig, TrainingPair};
use crate::tracker::{FrameRecord, GaussNewtonConfig, Trajectory};
use crate::{Pose, Twist, Vec3};

pub const DEFAULT_DEPTH_SCALE: f64 = 10000.0;
pub const DEFAULT_CUBE_SIDE: f64 = 0.1;
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {error}")]
    Io { path: PathBuf, error: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}: {error}")]
    Mesh { path: PathBuf, error: MeshError },
    #[error("{path}: invalid PNG: {message}")]
    Png { path: PathBuf, message: String },
    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |error| IoError::Io { path: path.to_path_buf(), error }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> IoError {
    IoError::Parse { path: path.to_path_buf(), line, message: message.into() }
}

fn format_err(path: &Path, message: impl Into<String>) -> IoError {
    IoError::Format { path: path.to_path_buf(), message: message.into() }
}

fn read_text(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(io_err(path))
}

/// Writes to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    write_atomic(path, bytes).map_err(io_err(path))
}

fn create_dir(path: &Path) -> Result<(), IoError> {
    fs::create_dir_all(path).map_err(io_err(path))
}

// ---------------------------------------------------------------- meshes

/// Loads an ASCII OBJ or PLY mesh, chosen by extension.
pub fn load_mesh(path: &Path) -> Result<TriangleMesh, IoError> {
    let text = read_text(path)?;
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("obj") => parse_obj(&text, path),
        Some("ply") => parse_ply(&text, path),
        _ => Err(format_err(path, "unsupported mesh extension (expected .obj or .ply)")),
    }
}

fn parse_f64(tok: Option<&str>, path: &Path, line: usize, what: &str) -> Result<f64, IoError> {
    let tok = tok.ok_or_else(|| parse_err(path, line, format!("missing {what}")))?;
    tok.parse::<f64>().map_err(|_| parse_err(path, line, format!("bad {what} `{tok}`")))
}

fn fan(face: &[usize], out: &mut Vec<[usize; 3]>) {
    for i in 1..face.len() - 1 {
        out.push([face[0], face[i], face[i + 1]]);
    }
}

/// OBJ subset: `v`, `vn` and `f` (fan-triangulated, negative indices
/// relative to the current vertex count); other directives are ignored.
pub fn parse_obj(text: &str, path: &Path) -> Result<TriangleMesh, IoError> {
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("");
        let mut toks = content.split_whitespace();
        match toks.next() {
            Some("v") => {
                let x = parse_f64(toks.next(), path, line, "x")?;
                let y = parse_f64(toks.next(), path, line, "y")?;
                let z = parse_f64(toks.next(), path, line, "z")?;
                vertices.push(Vec3::new(x, y, z));
            }
            Some("vn") => {
                for what in ["nx", "ny", "nz"] {
                    parse_f64(toks.next(), path, line, what)?;
                }
            }
            Some("f") => {
                let mut face = Vec::new();
                for tok in toks {
                    let idx_tok = tok.split('/').next().unwrap_or("");
                    let idx: i64 = idx_tok.parse().map_err(|_| parse_err(path, line, format!("bad face index `{tok}`")))?;
                    let n = vertices.len() as i64;
                    let resolved = if idx > 0 { idx - 1 } else { n + idx };
                    if idx == 0 || resolved < 0 || resolved >= n {
                        return Err(parse_err(path, line, format!("face index {idx} out of range for {n} vertices")));
                    }
                    face.push(resolved as usize);
                }
                if face.len() < 3 {
                    return Err(parse_err(path, line, "face needs at least 3 vertices"));
                }
                fan(&face, &mut triangles);
            }
            _ => {}
        }
    }
    TriangleMesh::new(vertices, triangles, None).map_err(|error| IoError::Mesh { path: path.to_path_buf(), error })
}

/// Vertices and 1-based faces; colors are not written.
pub fn format_obj(mesh: &TriangleMesh) -> String {
    let mut s = String::new();
    for v in &mesh.vertices {
        let _ = writeln!(s, "v {:.16e} {:.16e} {:.16e}", v.x, v.y, v.z);
    }
    for t in &mesh.triangles {
        let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
    }
    s
}

pub fn save_obj(path: &Path, mesh: &TriangleMesh) -> Result<(), IoError> {
    write_file(path, format_obj(mesh).as_bytes())
}

#[derive(Debug)]
struct PlyElement {
    name: String,
    count: usize,
    /// `(name, type)`; list properties have type `list`.
    props: Vec<(String, String)>,
}

/// ASCII PLY: vertex `x y z` with optional `red green blue` and face index
/// lists; other properties and elements are skipped.
pub fn parse_ply(text: &str, path: &Path) -> Result<TriangleMesh, IoError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(parse_err(path, 1, "missing `ply` magic")),
    }
    let mut elements: Vec<PlyElement> = Vec::new();
    let mut ascii = false;
    loop {
        let (line, l) = lines.next().ok_or_else(|| parse_err(path, 0, "header has no end_header"))?;
        let toks: Vec<&str> = l.split_whitespace().collect();
        match toks.as_slice() {
            ["format", "ascii", _] => ascii = true,
            ["format", fmt, _] => return Err(parse_err(path, line, format!("unsupported PLY format `{fmt}`"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => {
                let count = count.parse().map_err(|_| parse_err(path, line, format!("bad element count `{count}`")))?;
                elements.push(PlyElement { name: name.to_string(), count, props: Vec::new() });
            }
            ["property", "list", _, _, name] => {
                let el = elements.last_mut().ok_or_else(|| parse_err(path, line, "property before element"))?;
                el.props.push((name.to_string(), "list".into()));
            }
            ["property", ty, name] => {
                let el = elements.last_mut().ok_or_else(|| parse_err(path, line, "property before element"))?;
                el.props.push((name.to_string(), ty.to_string()));
            }
            ["end_header"] => break,
            _ => return Err(parse_err(path, line, format!("unrecognized header line `{l}`"))),
        }
    }
    if !ascii {
        return Err(parse_err(path, 1, "missing ascii format line"));
    }
    let mut vertices = Vec::new();
    let mut colors: Vec<[f64; 3]> = Vec::new();
    let mut triangles = Vec::new();
    let mut declared_vertices = 0;
    for el in &elements {
        let col = |n: &str| el.props.iter().position(|(p, _)| p == n);
        let rgb = [col("red"), col("green"), col("blue")];
        let has_color = rgb.iter().all(Option::is_some);
        let color_scale = |i: usize| if el.props[i].1.contains("char") { 255.0 } else { 1.0 };
        for _ in 0..el.count {
            let (line, l) = lines.next().ok_or_else(|| parse_err(path, 0, format!("file ends inside element `{}`", el.name)))?;
            let toks: Vec<&str> = l.split_whitespace().collect();
            match el.name.as_str() {
                "vertex" => {
                    if toks.len() < el.props.len() {
                        return Err(parse_err(path, line, format!("vertex has {} values, header declares {}", toks.len(), el.props.len())));
                    }
                    let get = |name: &str| -> Result<f64, IoError> {
                        let i = col(name).ok_or_else(|| parse_err(path, line, format!("vertex has no `{name}` property")))?;
                        parse_f64(Some(toks[i]), path, line, name)
                    };
                    vertices.push(Vec3::new(get("x")?, get("y")?, get("z")?));
                    if has_color {
                        let mut c = [0.0; 3];
                        for (k, idx) in rgb.iter().enumerate() {
                            let i = idx.unwrap_or(0);
                            c[k] = parse_f64(Some(toks[i]), path, line, "color")? / color_scale(i);
                        }
                        colors.push(c);
                    }
                }
                "face" => {
                    let n: usize = toks
                        .first()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| parse_err(path, line, "face line has no index count"))?;
                    if toks.len() < n + 1 || n < 3 {
                        return Err(parse_err(path, line, format!("face declares {n} indices, line has {}", toks.len().saturating_sub(1))));
                    }
                    let mut face = Vec::with_capacity(n);
                    for t in &toks[1..=n] {
                        let idx: usize = t.parse().map_err(|_| parse_err(path, line, format!("bad face index `{t}`")))?;
                        if idx >= declared_vertices {
                            return Err(parse_err(path, line, format!("face index {idx} out of range for {declared_vertices} vertices")));
                        }
                        face.push(idx);
                    }
                    fan(&face, &mut triangles);
                }
                _ => {}
            }
        }
        if el.name == "vertex" {
            declared_vertices = el.count;
        }
    }
    let colors = (!colors.is_empty()).then_some(colors);
    TriangleMesh::new(vertices, triangles, colors).map_err(|error| IoError::Mesh { path: path.to_path_buf(), error })
}

// ---------------------------------------------------------------- images

fn png_encode(width: usize, height: usize, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Result<Vec<u8>, String> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(depth);
        let mut w = enc.write_header().map_err(|e| e.to_string())?;
        w.write_image_data(data).map_err(|e| e.to_string())?;
    }
    Ok(out)
}

fn png_decode(path: &Path) -> Result<(png::OutputInfo, Vec<u8>), IoError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let png_err = |e: png::DecodingError| IoError::Png { path: path.to_path_buf(), message: e.to_string() };
    let mut dec = png::Decoder::new(std::io::BufReader::new(file));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(png_err)?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    buf.truncate(info.buffer_size());
    Ok((info, buf))
}

/// Depth in meters to 16-bit grayscale, `pixel = round(d * scale)`.
/// Values beyond 16 bits are clamped; the number of clamped pixels is returned.
pub fn save_depth_png(path: &Path, depth: &DepthImage, scale: f64) -> Result<usize, IoError> {
    let mut clamped = 0;
    let mut data = Vec::with_capacity(depth.data.len() * 2);
    for &d in &depth.data {
        let v = (d * scale).round();
        let q = if v > u16::MAX as f64 {
            clamped += 1;
            u16::MAX
        } else if v > 0.0 {
            v as u16
        } else {
            0
        };
        data.extend_from_slice(&q.to_be_bytes());
    }
    let bytes = png_encode(depth.width, depth.height, png::ColorType::Grayscale, png::BitDepth::Sixteen, &data)
        .map_err(|message| IoError::Png { path: path.to_path_buf(), message })?;
    write_file(path, &bytes)?;
    Ok(clamped)
}

pub fn load_depth_png(path: &Path, scale: f64) -> Result<DepthImage, IoError> {
    let (info, buf) = png_decode(path)?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
        return Err(IoError::Png {
            path: path.to_path_buf(),
            message: format!("depth must be 16-bit grayscale, got {:?} {:?}", info.bit_depth, info.color_type),
        });
    }
    let data = buf.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / scale).collect();
    DepthImage::from_data(info.width as usize, info.height as usize, data).map_err(|e| format_err(path, e.to_string()))
}

pub fn save_rgb_png(path: &Path, rgb: &RgbImage) -> Result<(), IoError> {
    let data: Vec<u8> = rgb.data.iter().flat_map(|c| c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)).collect();
    let bytes = png_encode(rgb.width, rgb.height, png::ColorType::Rgb, png::BitDepth::Eight, &data)
        .map_err(|message| IoError::Png { path: path.to_path_buf(), message })?;
    write_file(path, &bytes)
}

/// 8-bit RGB or RGBA (alpha dropped), values scaled to `[0, 1]`.
pub fn load_rgb_png(path: &Path) -> Result<RgbImage, IoError> {
    let (info, buf) = png_decode(path)?;
    let stride = match (info.color_type, info.bit_depth) {
        (png::ColorType::Rgb, png::BitDepth::Eight) => 3,
        (png::ColorType::Rgba, png::BitDepth::Eight) => 4,
        (c, b) => {
            return Err(IoError::Png { path: path.to_path_buf(), message: format!("RGB must be 8-bit RGB, got {b:?} {c:?}") })
        }
    };
    let data = buf.chunks_exact(stride).map(|p| [p[0], p[1], p[2]].map(|v| v as f64 / 255.0)).collect();
    RgbImage::from_data(info.width as usize, info.height as usize, data).map_err(|e| format_err(path, e.to_string()))
}

pub fn save_rgbd(prefix: &Path, img: &RgbdImage, scale: f64) -> Result<usize, IoError> {
    save_rgb_png(&suffixed(prefix, "_rgb.png"), &img.rgb)?;
    save_depth_png(&suffixed(prefix, "_depth.png"), &img.depth, scale)
}

pub fn load_rgbd(rgb: &Path, depth: &Path, scale: f64) -> Result<RgbdImage, IoError> {
    let c = load_rgb_png(rgb)?;
    let d = load_depth_png(depth, scale)?;
    RgbdImage::from_parts(c, d).map_err(|e| format_err(depth, e.to_string()))
}

fn suffixed(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

// ---------------------------------------------------------------- text

fn numbers(text: &str, path: &Path) -> Result<Vec<(usize, Vec<f64>)>, IoError> {
    let mut rows = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let row = content
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<f64>().map_err(|_| parse_err(path, i + 1, format!("bad number `{t}`"))))
            .collect::<Result<Vec<_>, _>>()?;
        rows.push((i + 1, row));
    }
    Ok(rows)
}

/// Four rows of four numbers with 17 significant digits.
pub fn format_pose(pose: &Pose) -> String {
    let mut s = String::new();
    for row in pose.to_matrix4() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        let _ = writeln!(s, "{}", cells.join(" "));
    }
    s
}

pub fn parse_pose(text: &str, path: &Path) -> Result<Pose, IoError> {
    let rows = numbers(text, path)?;
    if rows.len() != 4 {
        return Err(format_err(path, format!("pose needs 4 rows, found {}", rows.len())));
    }
    let mut m = [[0.0; 4]; 4];
    for (r, (line, row)) in rows.iter().enumerate() {
        if row.len() != 4 {
            return Err(parse_err(path, *line, format!("pose row needs 4 values, found {}", row.len())));
        }
        m[r].copy_from_slice(row);
    }
    let bottom = [0.0, 0.0, 0.0, 1.0];
    if m[3].iter().zip(bottom).any(|(a, b)| (a - b).abs() > 1e-9) {
        return Err(format_err(path, "last pose row must be 0 0 0 1"));
    }
    Pose::from_matrix4(m).map_err(|e| format_err(path, e.to_string()))
}

pub fn load_pose(path: &Path) -> Result<Pose, IoError> {
    parse_pose(&read_text(path)?, path)
}

pub fn save_pose(path: &Path, pose: &Pose) -> Result<(), IoError> {
    write_file(path, format_pose(pose).as_bytes())
}

/// One line `tx ty tz wx wy wz`.
pub fn format_twist(xi: &Twist) -> String {
    let cells: Vec<String> = xi.to_array().iter().map(|v| format!("{v:.16e}")).collect();
    format!("{}\n", cells.join(" "))
}

pub fn parse_twist(text: &str, path: &Path) -> Result<Twist, IoError> {
    let rows = numbers(text, path)?;
    let values: Vec<f64> = rows.into_iter().flat_map(|(_, r)| r).collect();
    let arr: [f64; 6] = values
        .as_slice()
        .try_into()
        .map_err(|_| format_err(path, format!("twist needs 6 values, found {}", values.len())))?;
    Ok(Twist::from_array(arr))
}

pub fn load_twist(path: &Path) -> Result<Twist, IoError> {
    parse_twist(&read_text(path)?, path)
}

pub fn save_twist(path: &Path, xi: &Twist) -> Result<(), IoError> {
    write_file(path, format_twist(xi).as_bytes())
}

/// One line `fx fy cx cy width height`.
pub fn format_intrinsics(k: &CameraIntrinsics) -> String {
    format!("{:.16e} {:.16e} {:.16e} {:.16e} {} {}\n", k.fx, k.fy, k.cx, k.cy, k.width, k.height)
}

pub fn parse_intrinsics(text: &str, path: &Path) -> Result<CameraIntrinsics, IoError> {
    let values: Vec<f64> = numbers(text, path)?.into_iter().flat_map(|(_, r)| r).collect();
    let [fx, fy, cx, cy, w, h]: [f64; 6] = values
        .as_slice()
        .try_into()
        .map_err(|_| format_err(path, format!("intrinsics need 6 values (fx fy cx cy width height), found {}", values.len())))?;
    if w.fract() != 0.0 || h.fract() != 0.0 || w < 1.0 || h < 1.0 {
        return Err(format_err(path, "image width and height must be positive integers"));
    }
    CameraIntrinsics::new(fx, fy, cx, cy, w as usize, h as usize).map_err(|e| format_err(path, e.to_string()))
}

pub fn load_intrinsics(path: &Path) -> Result<CameraIntrinsics, IoError> {
    parse_intrinsics(&read_text(path)?, path)
}

pub fn save_intrinsics(path: &Path, k: &CameraIntrinsics) -> Result<(), IoError> {
    write_file(path, format_intrinsics(k).as_bytes())
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| format_err(path, e.to_string()))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    serde_json::from_str(&read_text(path)?).map_err(|e| parse_err(path, e.line(), e.to_string()))
}

// ---------------------------------------------------------------- config

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// AUC threshold, meters.
    pub d_max: f64,
    /// Score with ADD-S instead of ADD.
    pub symmetric: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { d_max: crate::metrics::DEFAULT_DMAX, symmetric: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Object mesh (OBJ or PLY); a 0.1 m cube when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mesh: Option<PathBuf>,
    /// Camera intrinsics file; a 640×480 default camera when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub intrinsics: Option<PathBuf>,
    /// Depth PNG units per meter.
    pub depth_scale: f64,
    pub seed: u64,
    pub crop_size: usize,
    pub max_attempts: usize,
    pub perturbation: PerturbationParams,
    pub augmentation: AugmentationParams,
    pub network: NetworkSpec,
    pub train: TrainConfig,
    pub tracker: GaussNewtonConfig,
    pub eval: EvalConfig,
    pub sequence: SequenceConfig,
}

impl Default for Config {
    fn default() -> Self {
        let synth = SynthConfig::default();
        Self {
            mesh: None,
            intrinsics: None,
            depth_scale: DEFAULT_DEPTH_SCALE,
            seed: 0,
            crop_size: synth.crop_size,
            max_attempts: synth.max_attempts,
            perturbation: synth.perturbation,
            augmentation: synth.augmentation,
            network: NetworkSpec::default(),
            train: TrainConfig::default(),
            tracker: GaussNewtonConfig::default(),
            eval: EvalConfig::default(),
            sequence: SequenceConfig::default(),
        }
    }
}

struct RangeCheck(Vec<(String, String)>);

impl RangeCheck {
    fn check(&mut self, key: &str, value: f64, ok: bool, expect: &str) {
        if !ok || value.is_nan() {
            self.0.push((key.to_string(), format!("value {value} out of range, expected {expect}")));
        }
    }

    fn nonneg(&mut self, key: &str, v: f64) {
        self.check(key, v, v >= 0.0 && v.is_finite(), ">= 0");
    }

    fn positive(&mut self, key: &str, v: f64) {
        self.check(key, v, v > 0.0 && v.is_finite(), "> 0");
    }

    fn unit(&mut self, key: &str, v: f64) {
        self.check(key, v, (0.0..=1.0).contains(&v), "in [0, 1]");
    }
}

impl Config {
    /// Parses TOML text; relative paths are resolved against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, IoError> {
        let de = toml::Deserializer::new(text);
        let mut cfg: Config = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            let message = e.into_inner().message().trim().to_string();
            IoError::Config { key, message }
        })?;
        for p in [&mut cfg.mesh, &mut cfg.intrinsics].into_iter().flatten() {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads and validates a config file; referenced paths must exist.
    pub fn load(path: &Path) -> Result<Self, IoError> {
        let base = path.parent().unwrap_or(Path::new("."));
        let cfg = Self::from_toml(&read_text(path)?, base)?;
        for (key, p) in [("mesh", &cfg.mesh), ("intrinsics", &cfg.intrinsics)] {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(IoError::Config { key: key.into(), message: format!("file {} does not exist", p.display()) });
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_default()
    }

    /// Fails on the first out-of-range field, naming its key path.
    pub fn validate(&self) -> Result<(), IoError> {
        let mut c = RangeCheck(Vec::new());
        c.positive("depth_scale", self.depth_scale);
        c.check("crop_size", self.crop_size as f64, self.crop_size >= 8, ">= 8");
        c.check("max_attempts", self.max_attempts as f64, self.max_attempts >= 1, ">= 1");
        c.nonneg("perturbation.sigma_t", self.perturbation.sigma_t);
        c.nonneg("perturbation.sigma_w", self.perturbation.sigma_w);
        let a = &self.augmentation;
        c.nonneg("augmentation.depth_noise_sigma", a.depth_noise_sigma);
        c.unit("augmentation.missing_max", a.missing_max);
        c.check("augmentation.hue_shift", a.hue_shift, (0.0..=0.5).contains(&a.hue_shift), "in [0, 0.5]");
        c.unit("augmentation.sv_scale", a.sv_scale);
        c.nonneg("augmentation.rgb_noise_max", a.rgb_noise_max);
        c.unit("augmentation.blur_probability", a.blur_probability);
        c.nonneg("augmentation.blur_sigma_min", a.blur_sigma_min);
        c.check("augmentation.blur_sigma_max", a.blur_sigma_max, a.blur_sigma_max >= a.blur_sigma_min, ">= blur_sigma_min");
        c.positive("augmentation.brightness_min", a.brightness_min);
        c.check("augmentation.brightness_max", a.brightness_max, a.brightness_max >= a.brightness_min, ">= brightness_min");
        if let Err(e) = self.network.validate() {
            c.0.push(("network".into(), e.to_string()));
        }
        let t = &self.train;
        c.nonneg("train.lr", t.lr);
        c.check("train.batch_size", t.batch_size as f64, t.batch_size >= 1, ">= 1");
        c.check("train.beta1", t.beta1, (0.0..1.0).contains(&t.beta1), "in [0, 1)");
        c.check("train.beta2", t.beta2, (0.0..1.0).contains(&t.beta2), "in [0, 1)");
        c.positive("train.eps", t.eps);
        c.nonneg("train.loss.lambda1", t.loss.lambda1);
        c.nonneg("train.loss.lambda2", t.loss.lambda2);
        c.nonneg("train.target_loss", t.target_loss);
        let g = &self.tracker;
        c.check("tracker.max_iterations", g.max_iterations as f64, g.max_iterations >= 1, ">= 1");
        c.positive("tracker.convergence_tol", g.convergence_tol);
        c.positive("tracker.huber_delta", g.huber_delta);
        c.positive("tracker.max_correspondence_dist", g.max_correspondence_dist);
        c.nonneg("tracker.damping", g.damping);
        let nc = g.normal_compatibility;
        c.check("tracker.normal_compatibility", nc, (-1.0..=1.0).contains(&nc), "in [-1, 1]");
        c.positive("eval.d_max", self.eval.d_max);
        let s = &self.sequence;
        c.check("sequence.frames", s.frames as f64, s.frames >= 1, ">= 1");
        c.nonneg("sequence.motion_scale", s.motion_scale);
        c.nonneg("sequence.perturbation.sigma_t", s.perturbation.sigma_t);
        c.nonneg("sequence.perturbation.sigma_w", s.perturbation.sigma_w);
        c.nonneg("sequence.max_offset_t", s.max_offset_t);
        c.nonneg("sequence.max_offset_w", s.max_offset_w);
        c.nonneg("sequence.depth_noise_sigma", s.depth_noise_sigma);
        c.positive("sequence.distance", s.distance);
        match c.0.into_iter().next() {
            Some((key, message)) => Err(IoError::Config { key, message }),
            None => Ok(()),
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            perturbation: self.perturbation,
            augmentation: self.augmentation,
            crop_size: self.crop_size,
            max_attempts: self.max_attempts,
        }
    }

    pub fn load_mesh(&self) -> Result<TriangleMesh, IoError> {
        match &self.mesh {
            Some(p) => load_mesh(p),
            None => Ok(TriangleMesh::cube(DEFAULT_CUBE_SIDE)),
        }
    }

    pub fn camera(&self) -> Result<CameraIntrinsics, IoError> {
        match &self.intrinsics {
            Some(p) => load_intrinsics(p),
            None => Ok(CameraIntrinsics::default()),
        }
    }

    /// Annotated defaults, the contents of `config.example`.
    pub fn example() -> String {
        let mut s = String::from(
            "# se3track configuration. Every key is optional; the values below are the\n\
             # built-in defaults. Unknown keys are rejected.\n\
             #\n\
             # mesh = \"model.ply\"          # OBJ or PLY; a 0.1 m cube when absent\n\
             # intrinsics = \"intrinsics.txt\" # fx fy cx cy width height; 640x480 default camera when absent\n\
             #\n\
             # Units: meters, radians, pixels. depth_scale is depth PNG units per meter.\n\n",
        );
        s.push_str(&Self::default().to_toml());
        s
    }
}

// ---------------------------------------------------------------- datasets

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub version: u32,
    pub count: usize,
    pub seed: u64,
    pub crop_size: usize,
    pub depth_scale: f64,
}

fn pair_prefix(dir: &Path, index: usize) -> PathBuf {
    dir.join("pairs").join(format!("{index:06}"))
}

/// Writes one training pair under `dir/pairs/`; returns the number of
/// clamped depth pixels.
pub fn write_pair(dir: &Path, index: usize, pair: &TrainingPair, scale: f64) -> Result<usize, IoError> {
    create_dir(&dir.join("pairs"))?;
    let p = pair_prefix(dir, index);
    let clamped = save_rgbd(&suffixed(&p, "_prev"), &pair.img_prev, scale)? + save_rgbd(&suffixed(&p, "_cur"), &pair.img_cur, scale)?;
    save_twist(&suffixed(&p, "_twist.txt"), &pair.gt_twist)?;
    Ok(clamped)
}

pub fn write_dataset_meta(dir: &Path, meta: &DatasetMeta) -> Result<(), IoError> {
    save_json(&dir.join("meta.json"), meta)
}

pub fn read_pair(dir: &Path, index: usize, scale: f64) -> Result<TrainingPair, IoError> {
    let p = pair_prefix(dir, index);
    Ok(TrainingPair {
        img_prev: load_rgbd(&suffixed(&p, "_prev_rgb.png"), &suffixed(&p, "_prev_depth.png"), scale)?,
        img_cur: load_rgbd(&suffixed(&p, "_cur_rgb.png"), &suffixed(&p, "_cur_depth.png"), scale)?,
        gt_twist: load_twist(&suffixed(&p, "_twist.txt"))?,
    })
}

/// Reads `meta.json` and every pair it declares.
pub fn read_dataset(dir: &Path) -> Result<(DatasetMeta, Vec<TrainingPair>), IoError> {
    let meta: DatasetMeta = load_json(&dir.join("meta.json"))?;
    if meta.version != DATASET_VERSION {
        return Err(format_err(&dir.join("meta.json"), format!("unsupported dataset version {}", meta.version)));
    }
    let pairs = (0..meta.count).map(|i| read_pair(dir, i, meta.depth_scale)).collect::<Result<_, _>>()?;
    Ok((meta, pairs))
}

// ---------------------------------------------------------------- sequences

#[derive(Debug, Clone)]
pub struct SequenceDir {
    pub frames: Vec<RgbdImage>,
    /// Present when every frame has a `NNNNNN_gt.txt`.
    pub gt: Option<Vec<Pose>>,
    pub intrinsics: CameraIntrinsics,
}

fn frame_path(dir: &Path, i: usize, suffix: &str) -> PathBuf {
    dir.join(format!("{i:06}{suffix}"))
}

/// Indices `0..n` of files named `NNNNNN<suffix>`; gaps are an error.
fn contiguous_frames(dir: &Path, suffix: &str) -> Result<usize, IoError> {
    let mut idx = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let name = entry.map_err(io_err(dir))?.file_name();
        let Some(name) = name.to_str() else { continue };
        if let Some(stem) = name.strip_suffix(suffix) {
            if stem.len() == 6 && stem.bytes().all(|b| b.is_ascii_digit()) {
                idx.push(stem.parse::<usize>().unwrap_or(usize::MAX));
            }
        }
    }
    idx.sort_unstable();
    for (expect, got) in idx.iter().enumerate() {
        if *got != expect {
            return Err(format_err(dir, format!("frame numbering has a gap: expected {expect:06}{suffix}, found {got:06}{suffix}")));
        }
    }
    Ok(idx.len())
}

pub fn write_sequence(dir: &Path, frames: &[RgbdImage], gt: Option<&[Pose]>, k: &CameraIntrinsics, scale: f64) -> Result<(), IoError> {
    create_dir(dir)?;
    save_intrinsics(&dir.join("intrinsics.txt"), k)?;
    for (i, f) in frames.iter().enumerate() {
        save_rgbd(&dir.join(format!("{i:06}")), f, scale)?;
    }
    if let Some(gt) = gt {
        for (i, p) in gt.iter().enumerate() {
            save_pose(&frame_path(dir, i, "_gt.txt"), p)?;
        }
    }
    Ok(())
}

pub fn read_sequence(dir: &Path, scale: f64) -> Result<SequenceDir, IoError> {
    let n = contiguous_frames(dir, "_rgb.png")?;
    if n == 0 {
        return Err(format_err(dir, "no frames (expected 000000_rgb.png ...)"));
    }
    let intrinsics = load_intrinsics(&dir.join("intrinsics.txt"))?;
    let frames: Vec<RgbdImage> = (0..n)
        .map(|i| load_rgbd(&frame_path(dir, i, "_rgb.png"), &frame_path(dir, i, "_depth.png"), scale))
        .collect::<Result<_, _>>()?;
    if let Some(bad) = frames.iter().position(|f| f.width() != intrinsics.width || f.height() != intrinsics.height) {
        return Err(format_err(&frame_path(dir, bad, "_rgb.png"), "frame size differs from intrinsics"));
    }
    Ok(SequenceDir { frames, gt: read_poses(dir, "_gt.txt", n)?, intrinsics })
}

/// `NNNNNN<suffix>` poses if all `n` exist, `None` if none exist.
fn read_poses(dir: &Path, suffix: &str, n: usize) -> Result<Option<Vec<Pose>>, IoError> {
    let found = contiguous_frames(dir, suffix)?;
    if found == 0 {
        return Ok(None);
    }
    if found != n {
        return Err(format_err(dir, format!("{found} `{suffix}` files for {n} frames")));
    }
    (0..n).map(|i| load_pose(&frame_path(dir, i, suffix))).collect::<Result<_, _>>().map(Some)
}

// ---------------------------------------------------------------- trajectories

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryEntry {
    pub frame: usize,
    /// Row-major object-to-camera transform.
    pub pose: [[f64; 4]; 4],
    pub lost: bool,
    pub twist_norm: f64,
    pub residual_rms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryFile {
    pub estimator: String,
    pub frames: Vec<TrajectoryEntry>,
}

impl TrajectoryFile {
    pub fn from_trajectory(estimator: &str, traj: &Trajectory) -> Self {
        let frames = traj
            .poses
            .iter()
            .zip(&traj.records)
            .map(|(p, r)| TrajectoryEntry {
                frame: r.frame,
                pose: p.to_matrix4(),
                lost: r.lost,
                twist_norm: r.twist_norm,
                residual_rms: r.residual_rms,
            })
            .collect();
        Self { estimator: estimator.to_string(), frames }
    }

    pub fn poses(&self, path: &Path) -> Result<Vec<Pose>, IoError> {
        self.frames
            .iter()
            .map(|f| Pose::from_matrix4(f.pose).map_err(|e| format_err(path, format!("frame {}: {e}", f.frame))))
            .collect()
    }

    pub fn lost_flags(&self) -> Vec<bool> {
        self.frames.iter().map(|f| f.lost).collect()
    }
}

/// Writes `trajectory.json`, per-frame `NNNNNN_pose.txt` and `timing.json`.
pub fn write_trajectory(dir: &Path, estimator: &str, traj: &Trajectory) -> Result<(), IoError> {
    create_dir(dir)?;
    save_json(&dir.join("trajectory.json"), &TrajectoryFile::from_trajectory(estimator, traj))?;
    for (i, p) in traj.poses.iter().enumerate() {
        save_pose(&frame_path(dir, i, "_pose.txt"), p)?;
    }
    let timing: Vec<&FrameRecord> = traj.records.iter().collect();
    save_json(&dir.join("timing.json"), &timing)
}

/// Predicted poses and lost flags from `trajectory.json`, or else from
/// `NNNNNN_pose.txt` or `NNNNNN_gt.txt` files (no frames lost).
pub fn read_predictions(dir: &Path) -> Result<(Vec<Pose>, Vec<bool>), IoError> {
    let json = dir.join("trajectory.json");
    if json.exists() {
        let t: TrajectoryFile = load_json(&json)?;
        return Ok((t.poses(&json)?, t.lost_flags()));
    }
    for suffix in ["_pose.txt", "_gt.txt"] {
        let n = contiguous_frames(dir, suffix)?;
        if let Some(poses) = read_poses(dir, suffix, n)? {
            let lost = vec![false; poses.len()];
            return Ok((poses, lost));
        }
    }
    Err(format_err(dir, "no trajectory.json, NNNNNN_pose.txt or NNNNNN_gt.txt files"))
}

/// Ground-truth poses from `NNNNNN_gt.txt` files.
pub fn read_ground_truth(dir: &Path) -> Result<Vec<Pose>, IoError> {
    let n = contiguous_frames(dir, "_gt.txt")?;
    read_poses(dir, "_gt.txt", n)?.ok_or_else(|| format_err(dir, "no NNNNNN_gt.txt files"))
}

/// Per-frame `frame,add,adds,lost` table.
pub fn report_csv(report: &crate::metrics::EvalReport) -> String {
    let mut s = String::from("frame,add,adds,lost\n");
    for (i, (a, b)) in report.add.iter().zip(&report.adds).enumerate() {
        let cell = |v: &f64| if v.is_finite() { format!("{v:.17e}") } else { "inf".into() };
        let _ = writeln!(s, "{i},{},{},{}", cell(a), cell(b), !a.is_finite());
    }
    s
}

pub fn write_report(path: &Path, report: &crate::metrics::EvalReport) -> Result<(), IoError> {
    save_json(path, report)?;
    write_file(&path.with_extension("csv"), report_csv(report).as_bytes())
}
