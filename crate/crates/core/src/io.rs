//! File formats: ASL/EuRoC sequence directories, trajectory text files and
//! ASCII PLY point clouds.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion, Vector2, Vector3};
use thiserror::Error;

use crate::eval::{EvalError, Trajectory};
use crate::geometry::{CameraModel, Se3};
use crate::image::GrayImage;
use crate::synthetic::Sequence;
use crate::KeyframeId;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("missing file or directory: {}", .0.display())]
    Missing(PathBuf),
    #[error("sequence {} lists no images", .0.display())]
    EmptySequence(PathBuf),
    #[error("{}: timestamps not strictly increasing at line {line}", path.display())]
    NonMonotonic { path: PathBuf, line: usize },
    #[error("calibration {}: {reason}", path.display())]
    Calibration { path: PathBuf, reason: String },
    #[error("{}:{line}: {reason}", path.display())]
    Format { path: PathBuf, line: usize, reason: String },
    #[error("image {}: {reason}", path.display())]
    Image { path: PathBuf, reason: String },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {source}", path.display())]
    Trajectory { path: PathBuf, source: EvalError },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, line: usize, reason: impl Into<String>) -> IoError {
    IoError::Format {
        path: path.to_path_buf(),
        line,
        reason: reason.into(),
    }
}

/// Radial-tangential distortion coefficients (k1, k2, p1, p2).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Distortion {
    pub k1: f64,
    pub k2: f64,
    pub p1: f64,
    pub p2: f64,
}

impl Distortion {
    pub fn is_zero(&self) -> bool {
        [self.k1, self.k2, self.p1, self.p2].iter().all(|&c| c == 0.0)
    }

    /// Maps undistorted normalized coordinates to distorted ones.
    pub fn distort(&self, x: f64, y: f64) -> (f64, f64) {
        let r2 = x * x + y * y;
        let radial = 1.0 + self.k1 * r2 + self.k2 * r2 * r2;
        (
            x * radial + 2.0 * self.p1 * x * y + self.p2 * (r2 + 2.0 * x * x),
            y * radial + self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * x * y,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub camera: CameraModel,
    pub distortion: Distortion,
}

/// Resampling map from distorted input images to pinhole images with the
/// same intrinsics.
#[derive(Debug, Clone)]
pub struct Undistorter {
    width: usize,
    height: usize,
    source: Vec<Vector2<f64>>,
}

impl Undistorter {
    pub fn new(calibration: &Calibration) -> Self {
        let cam = &calibration.camera;
        let mut source = Vec::with_capacity(cam.width * cam.height);
        for y in 0..cam.height {
            for x in 0..cam.width {
                let xn = (x as f64 - cam.cx) / cam.fx;
                let yn = (y as f64 - cam.cy) / cam.fy;
                let (xd, yd) = calibration.distortion.distort(xn, yn);
                source.push(Vector2::new(cam.fx * xd + cam.cx, cam.fy * yd + cam.cy));
            }
        }
        Undistorter {
            width: cam.width,
            height: cam.height,
            source,
        }
    }

    /// Bilinear resampling; sources outside the image take the nearest border value.
    pub fn apply(&self, image: &GrayImage) -> GrayImage {
        let (w, h) = (image.width(), image.height());
        GrayImage::from_fn(self.width, self.height, |x, y| {
            let s = self.source[y * self.width + x];
            let u = s.x.clamp(0.0, (w - 1) as f64);
            let v = s.y.clamp(0.0, (h - 1) as f64);
            let (x0, y0) = ((u.floor() as usize).min(w.saturating_sub(2)), (v.floor() as usize).min(h.saturating_sub(2)));
            let (fx, fy) = (u - x0 as f64, v - y0 as f64);
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let top = image.get(x0, y0) as f64 * (1.0 - fx) + image.get(x1, y0) as f64 * fx;
            let bottom = image.get(x0, y1) as f64 * (1.0 - fx) + image.get(x1, y1) as f64 * fx;
            (top * (1.0 - fy) + bottom * fy) as f32
        })
    }
}

/// Values of a `key: [a, b, ...]` line.
fn flow_sequence(text: &str, key: &str) -> Option<Vec<f64>> {
    let line = text.lines().find(|l| l.trim_start().starts_with(&format!("{key}:")))?;
    let value = line.split_once(':')?.1;
    let value = value.split('#').next()?.trim();
    let inner = value.strip_prefix('[')?.strip_suffix(']')?;
    inner.split(',').map(|v| v.trim().parse().ok()).collect()
}

/// Reads the intrinsics, distortion and resolution of an ASL `sensor.yaml`.
pub fn read_calibration(path: &Path) -> Result<Calibration, IoError> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => IoError::Missing(path.to_path_buf()),
        _ => IoError::Io {
            path: path.to_path_buf(),
            source: e,
        },
    })?;
    let bad = |reason: &str| IoError::Calibration {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let intr = flow_sequence(&text, "intrinsics").ok_or_else(|| bad("missing or malformed `intrinsics`"))?;
    let res = flow_sequence(&text, "resolution").ok_or_else(|| bad("missing or malformed `resolution`"))?;
    if intr.len() != 4 || res.len() != 2 {
        return Err(bad("`intrinsics` needs 4 values and `resolution` 2"));
    }
    if res.iter().any(|&r| r < 1.0 || r.fract() != 0.0) {
        return Err(bad("`resolution` must be positive integers"));
    }
    let model = text
        .lines()
        .find_map(|l| l.trim_start().strip_prefix("distortion_model:"))
        .map(|m| m.split('#').next().unwrap_or("").trim().to_string());
    let coeffs = flow_sequence(&text, "distortion_coefficients");
    let distortion = match (model.as_deref(), coeffs) {
        (_, None) => Distortion {
            k1: 0.0,
            k2: 0.0,
            p1: 0.0,
            p2: 0.0,
        },
        (Some("radial-tangential") | None, Some(c)) if c.len() >= 4 => Distortion {
            k1: c[0],
            k2: c[1],
            p1: c[2],
            p2: c[3],
        },
        (Some(m), Some(_)) if m != "radial-tangential" => return Err(bad(&format!("unsupported distortion model `{m}`"))),
        _ => return Err(bad("`distortion_coefficients` needs 4 values")),
    };
    let camera = CameraModel::new(intr[0], intr[1], intr[2], intr[3], res[0] as usize, res[1] as usize);
    if !camera.is_valid() {
        return Err(bad("invalid intrinsics"));
    }
    Ok(Calibration { camera, distortion })
}

/// Ordered image records of an ASL camera directory.
#[derive(Debug, Clone)]
pub struct SequenceSource {
    pub root: PathBuf,
    /// (timestamp in nanoseconds, image path).
    pub records: Vec<(u64, PathBuf)>,
    pub calibration: Calibration,
    undistorter: Option<Undistorter>,
}

/// Seconds from integer nanoseconds.
pub fn ns_to_seconds(ns: u64) -> f64 {
    ns as f64 / 1e9
}

impl SequenceSource {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn timestamp(&self, i: usize) -> f64 {
        ns_to_seconds(self.records[i].0)
    }

    /// Camera seen by the pipeline (pinhole after undistortion).
    pub fn camera(&self) -> CameraModel {
        self.calibration.camera
    }

    pub fn load_image(&self, i: usize) -> Result<GrayImage, IoError> {
        let path = &self.records[i].1;
        let img_err = |reason: String| IoError::Image {
            path: path.clone(),
            reason,
        };
        let luma = image::open(path).map_err(|e| img_err(e.to_string()))?.into_luma8();
        let (w, h) = (luma.width() as usize, luma.height() as usize);
        let cam = &self.calibration.camera;
        if (w, h) != (cam.width, cam.height) {
            return Err(img_err(format!("size {w}x{h} differs from calibrated {}x{}", cam.width, cam.height)));
        }
        let gray = GrayImage::from_luma8(w, h, luma.as_raw()).map_err(|e| img_err(e.to_string()))?;
        Ok(match &self.undistorter {
            Some(u) => u.apply(&gray),
            None => gray,
        })
    }

    /// Lazily loaded (seconds, image) pairs.
    pub fn frames(&self) -> impl Iterator<Item = Result<(f64, GrayImage), IoError>> + Send + '_ {
        (0..self.len()).map(|i| self.load_image(i).map(|img| (self.timestamp(i), img)))
    }
}

fn camera_dir(dir: &Path) -> Result<PathBuf, IoError> {
    for candidate in [dir.join("cam0"), dir.join("mav0").join("cam0")] {
        if candidate.join("data.csv").is_file() {
            return Ok(candidate);
        }
    }
    if !dir.is_dir() {
        return Err(IoError::Missing(dir.to_path_buf()));
    }
    Err(IoError::Missing(dir.join("cam0").join("data.csv")))
}

/// Opens an ASL directory (either the `mav0` folder or its parent). Images
/// are undistorted at load unless `assume_undistorted` is set or the
/// calibration has no distortion.
pub fn load_sequence(dir: &Path, assume_undistorted: bool) -> Result<SequenceSource, IoError> {
    let cam_dir = camera_dir(dir)?;
    let calibration = read_calibration(&cam_dir.join("sensor.yaml"))?;
    let csv_path = cam_dir.join("data.csv");
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(&csv_path)
        .map_err(|e| format_err(&csv_path, 0, e.to_string()))?;
    let mut records: Vec<(u64, PathBuf)> = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| format_err(&csv_path, e.position().map_or(0, |p| p.line() as usize), e.to_string()))?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        if row.len() < 2 {
            return Err(format_err(&csv_path, line, "expected `timestamp,filename`"));
        }
        let ns: u64 = row[0].parse().map_err(|_| format_err(&csv_path, line, format!("bad timestamp `{}`", &row[0])))?;
        if records.last().is_some_and(|&(prev, _)| ns <= prev) {
            return Err(IoError::NonMonotonic { path: csv_path, line });
        }
        let image = cam_dir.join("data").join(&row[1]);
        if !image.is_file() {
            return Err(IoError::Missing(image));
        }
        records.push((ns, image));
    }
    if records.is_empty() {
        return Err(IoError::EmptySequence(csv_path));
    }
    let undistorter = (!assume_undistorted && !calibration.distortion.is_zero()).then(|| Undistorter::new(&calibration));
    Ok(SequenceSource {
        root: dir.to_path_buf(),
        records,
        calibration,
        undistorter,
    })
}

/// Unit quaternion (x, y, z, w) with w ≥ 0.
fn canonical_quaternion(pose: &Se3) -> [f64; 4] {
    let q = pose.quaternion();
    let s = if q.w < 0.0 { -1.0 } else { 1.0 };
    [q.i * s, q.j * s, q.k * s, q.w * s]
}

/// One `timestamp tx ty tz qx qy qz qw` line per pose.
pub fn format_trajectory(poses: &[(f64, Se3)]) -> String {
    let mut out = String::new();
    for (t, p) in poses {
        let q = canonical_quaternion(p);
        let v = p.translation;
        writeln!(out, "{} {} {} {} {} {} {} {}", t, v.x, v.y, v.z, q[0], q[1], q[2], q[3]).expect("writing to a string");
    }
    out
}

pub fn write_trajectory(path: &Path, poses: &[(f64, Se3)]) -> Result<(), IoError> {
    fs::write(path, format_trajectory(poses)).map_err(io_err(path))
}

fn pose_from(t: [f64; 3], q: [f64; 4], path: &Path, line: usize) -> Result<Se3, IoError> {
    let [qx, qy, qz, qw] = q;
    let quat = Quaternion::new(qw, qx, qy, qz);
    let norm = quat.norm();
    if !(norm.is_finite() && (norm - 1.0).abs() < 1e-3) {
        return Err(format_err(path, line, format!("quaternion norm {norm} is not 1")));
    }
    Ok(Se3::from_quaternion(&UnitQuaternion::from_quaternion(quat), Vector3::from(t)))
}

/// Reads a trajectory. Text files use `timestamp tx ty tz qx qy qz qw`
/// (seconds); `.csv` files use the ASL ground-truth layout
/// `timestamp_ns, px, py, pz, qw, qx, qy, qz, ...`.
pub fn read_trajectory(path: &Path) -> Result<Trajectory, IoError> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => IoError::Missing(path.to_path_buf()),
        _ => IoError::Io {
            path: path.to_path_buf(),
            source: e,
        },
    })?;
    let asl = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let raw = raw.trim();
        if raw.is_empty() || raw.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = raw.split(|c: char| c == ',' || c.is_whitespace()).filter(|f| !f.is_empty()).collect();
        if fields.len() < 8 {
            return Err(format_err(path, line, format!("expected 8 fields, found {}", fields.len())));
        }
        let num = |k: usize| fields[k].parse::<f64>().map_err(|_| format_err(path, line, format!("bad number `{}`", fields[k])));
        let (t, pose) = if asl {
            let ns: u64 = fields[0].parse().map_err(|_| format_err(path, line, format!("bad timestamp `{}`", fields[0])))?;
            (ns_to_seconds(ns), pose_from([num(1)?, num(2)?, num(3)?], [num(5)?, num(6)?, num(7)?, num(4)?], path, line)?)
        } else {
            (num(0)?, pose_from([num(1)?, num(2)?, num(3)?], [num(4)?, num(5)?, num(6)?, num(7)?], path, line)?)
        };
        entries.push((t, pose));
    }
    Trajectory::new(entries).map_err(|source| IoError::Trajectory {
        path: path.to_path_buf(),
        source,
    })
}

/// ASCII PLY with `x y z` and the host keyframe id.
pub fn format_pointcloud(points: &[(Vector3<f64>, KeyframeId)]) -> String {
    let mut out = String::new();
    out += "ply\nformat ascii 1.0\n";
    writeln!(out, "element vertex {}", points.len()).expect("writing to a string");
    out += "property double x\nproperty double y\nproperty double z\nproperty int host\nend_header\n";
    for (p, host) in points {
        writeln!(out, "{} {} {} {}", p.x, p.y, p.z, host).expect("writing to a string");
    }
    out
}

pub fn write_pointcloud(path: &Path, points: &[(Vector3<f64>, KeyframeId)]) -> Result<(), IoError> {
    fs::write(path, format_pointcloud(points)).map_err(io_err(path))
}

/// Vertex positions of an ASCII PLY file.
pub fn read_pointcloud(path: &Path) -> Result<Vec<Vector3<f64>>, IoError> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => IoError::Missing(path.to_path_buf()),
        _ => IoError::Io {
            path: path.to_path_buf(),
            source: e,
        },
    })?;
    let mut lines = text.lines().enumerate();
    if lines.next().map(|(_, l)| l.trim()) != Some("ply") {
        return Err(format_err(path, 1, "not a PLY file"));
    }
    let mut count = None;
    let mut properties: Vec<String> = Vec::new();
    let mut in_vertex = false;
    let mut header_end = None;
    for (i, l) in lines.by_ref() {
        let f: Vec<&str> = l.split_whitespace().collect();
        match f.as_slice() {
            ["format", kind, ..] if *kind != "ascii" => return Err(format_err(path, i + 1, "only ASCII PLY is supported")),
            ["element", "vertex", n] => {
                count = Some(n.parse::<usize>().map_err(|_| format_err(path, i + 1, "bad vertex count"))?);
                in_vertex = true;
            }
            ["element", ..] => in_vertex = false,
            ["property", .., name] if in_vertex => properties.push(name.to_string()),
            ["end_header"] => {
                header_end = Some(i + 1);
                break;
            }
            _ => {}
        }
    }
    let header_end = header_end.ok_or_else(|| format_err(path, 0, "missing end_header"))?;
    let count = count.ok_or_else(|| format_err(path, header_end, "no vertex element"))?;
    let idx = |name: &str| {
        properties
            .iter()
            .position(|p| p == name)
            .ok_or_else(|| format_err(path, header_end, format!("vertex has no `{name}` property")))
    };
    let (ix, iy, iz) = (idx("x")?, idx("y")?, idx("z")?);
    let mut points = Vec::with_capacity(count);
    for (i, l) in lines.take(count) {
        let f: Vec<f64> = l
            .split_whitespace()
            .map(|v| v.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| format_err(path, i + 1, "bad vertex value"))?;
        if f.len() < properties.len() {
            return Err(format_err(path, i + 1, "too few vertex values"));
        }
        points.push(Vector3::new(f[ix], f[iy], f[iz]));
    }
    if points.len() != count {
        return Err(format_err(path, header_end, format!("expected {count} vertices, found {}", points.len())));
    }
    Ok(points)
}

/// Spacing of the reference surface samples written next to synthetic sequences.
pub const SURFACE_SPACING: f64 = 0.01;

fn rate_hz(timestamps_ns: &[u64]) -> f64 {
    match timestamps_ns {
        [first, .., last] => ((timestamps_ns.len() - 1) as f64 * 1e9 / (last - first) as f64).round(),
        _ => 0.0,
    }
}

/// Writes a rendered sequence as an ASL directory: `mav0/cam0/{data.csv,
/// sensor.yaml, data/*.png}`, plus `groundtruth.txt` (camera poses) and
/// `surface.ply` (reference surface samples) at the top level.
pub fn write_asl(sequence: &Sequence, dir: &Path) -> Result<(), IoError> {
    let cam_dir = dir.join("mav0").join("cam0");
    let data_dir = cam_dir.join("data");
    fs::create_dir_all(&data_dir).map_err(io_err(&data_dir))?;
    let cam = &sequence.camera;
    let yaml = format!(
        "%YAML:1.0\nsensor_type: camera\ncomment: rendered synthetic sequence\nrate_hz: {}\nresolution: [{}, {}]\ncamera_model: pinhole\nintrinsics: [{}, {}, {}, {}] #fu, fv, cu, cv\ndistortion_model: radial-tangential\ndistortion_coefficients: [0, 0, 0, 0]\n",
        rate_hz(&sequence.timestamps_ns),
        cam.width,
        cam.height,
        cam.fx,
        cam.fy,
        cam.cx,
        cam.cy
    );
    let yaml_path = cam_dir.join("sensor.yaml");
    fs::write(&yaml_path, yaml).map_err(io_err(&yaml_path))?;
    let mut csv = String::from("#timestamp [ns],filename\n");
    for (ns, frame) in sequence.timestamps_ns.iter().zip(&sequence.frames) {
        let name = format!("{ns}.png");
        let path = data_dir.join(&name);
        let img = image::GrayImage::from_raw(cam.width as u32, cam.height as u32, frame.image.to_luma8()).expect("buffer matches dimensions");
        img.save(&path).map_err(|e| IoError::Image {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        writeln!(csv, "{ns},{name}").expect("writing to a string");
    }
    let csv_path = cam_dir.join("data.csv");
    fs::write(&csv_path, csv).map_err(io_err(&csv_path))?;
    let gt: Vec<(f64, Se3)> = sequence.timestamps_ns.iter().map(|&ns| ns_to_seconds(ns)).zip(sequence.poses.iter().copied()).collect();
    write_trajectory(&dir.join("groundtruth.txt"), &gt)?;
    let surface: Vec<(Vector3<f64>, KeyframeId)> = sequence.scene.surface_samples(SURFACE_SPACING).into_iter().map(|p| (p, 0)).collect();
    write_pointcloud(&dir.join("surface.ply"), &surface)
}
