//! Procedurally textured planar scenes rendered with exact geometry, for use
//! as a ground-truth oracle.

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{so3_exp, CameraModel, Se3};
use crate::image::GrayImage;
use crate::photometric::AffineBrightness;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("camera center lies inside an occluder")]
    CameraInsideGeometry,
    #[error("trajectory needs at least 2 frames")]
    TooFewFrames,
    #[error("unknown trajectory kind '{0}'")]
    UnknownKind(String),
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn lattice(seed: u64, ix: i64, iy: i64) -> f64 {
    let h = splitmix(seed ^ splitmix((ix as u64).wrapping_mul(0x1000_0000_01B3) ^ splitmix(iy as u64)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

const NOISE_CELL: f64 = 0.45;

/// Multi-frequency procedural texture in surface coordinates (scene units).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub seed: u64,
    /// (frequency in cycles per unit, orientation in radians, phase, amplitude)
    pub gratings: [(f64, f64, f64, f64); 3],
    /// Lattice spacing of the value noise, in scene units.
    pub noise_cell: f64,
    pub noise_amplitude: f64,
    pub base: f64,
}

impl Texture {
    pub fn random(seed: u64) -> Self {
        let r = |k: u64| lattice(seed, k as i64, 7);
        let freqs = [0.6, 0.9 * std::f64::consts::SQRT_2, 1.6];
        let mut gratings = [(0.0, 0.0, 0.0, 0.0); 3];
        for (i, g) in gratings.iter_mut().enumerate() {
            *g = (
                freqs[i] * (0.85 + 0.3 * r(4 * i as u64)),
                std::f64::consts::PI * r(4 * i as u64 + 1),
                std::f64::consts::TAU * r(4 * i as u64 + 2),
                10.0 + 6.0 * r(4 * i as u64 + 3),
            );
        }
        Texture {
            seed,
            gratings,
            noise_cell: NOISE_CELL,
            noise_amplitude: 70.0,
            base: 110.0 + 20.0 * (r(99) - 0.5),
        }
    }

    fn value_noise(&self, u: f64, v: f64, cell: f64, seed: u64) -> f64 {
        let (x, y) = (u / cell, v / cell);
        let (x0, y0) = (x.floor(), y.floor());
        let (tx, ty) = (smooth(x - x0), smooth(y - y0));
        let (ix, iy) = (x0 as i64, y0 as i64);
        let a = lattice(seed, ix, iy);
        let b = lattice(seed, ix + 1, iy);
        let c = lattice(seed, ix, iy + 1);
        let d = lattice(seed, ix + 1, iy + 1);
        (1.0 - ty) * ((1.0 - tx) * a + tx * b) + ty * ((1.0 - tx) * c + tx * d) - 0.5
    }

    pub fn eval(&self, u: f64, v: f64) -> f64 {
        let mut value = self.base;
        for &(f, theta, phase, amp) in &self.gratings {
            let s = u * theta.cos() + v * theta.sin();
            value += amp * (std::f64::consts::TAU * f * s + phase).sin();
        }
        value += self.noise_amplitude * self.value_noise(u, v, self.noise_cell, self.seed);
        value += 0.5 * self.noise_amplitude * self.value_noise(u, v, 2.7 * self.noise_cell, self.seed ^ 0x5555);
        value
    }
}

/// Textured parallelogram origin + s·edge_u + t·edge_v, s, t ∈ [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quad {
    pub origin: [f64; 3],
    pub edge_u: [f64; 3],
    pub edge_v: [f64; 3],
    pub texture: Texture,
}

/// A hit along a ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub distance: f64,
    pub quad: usize,
    pub surface: Vector2<f64>,
}

impl Quad {
    pub fn new(origin: Vector3<f64>, edge_u: Vector3<f64>, edge_v: Vector3<f64>, texture: Texture) -> Self {
        Quad {
            origin: origin.into(),
            edge_u: edge_u.into(),
            edge_v: edge_v.into(),
            texture,
        }
    }

    fn vectors(&self) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
        (self.origin.into(), self.edge_u.into(), self.edge_v.into())
    }

    pub fn normal(&self) -> Vector3<f64> {
        let (_, a, b) = self.vectors();
        a.cross(&b).normalize()
    }

    /// Ray parameter and (s, t) of the intersection, if inside the quad.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let (o, a, b) = self.vectors();
        let m = Matrix3::from_columns(&[a, b, -dir]);
        let sol = m.lu().solve(&(origin - o))?;
        let (s, t, dist) = (sol.x, sol.y, sol.z);
        if dist > 1e-9 && (0.0..=1.0).contains(&s) && (0.0..=1.0).contains(&t) {
            Some((dist, s, t))
        } else {
            None
        }
    }

    pub fn point(&self, s: f64, t: f64) -> Vector3<f64> {
        let (o, a, b) = self.vectors();
        o + a * s + b * t
    }

    pub fn corners(&self) -> [Vector3<f64>; 4] {
        [self.point(0.0, 0.0), self.point(1.0, 0.0), self.point(1.0, 1.0), self.point(0.0, 1.0)]
    }
}

/// Axis-aligned box occluder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Occluder {
    pub center: [f64; 3],
    pub half: [f64; 3],
}

impl Occluder {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|k| (p[k] - self.center[k]).abs() < self.half[k])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub quads: Vec<Quad>,
    pub occluders: Vec<Occluder>,
    /// Characteristic length used to express tolerances.
    pub scale: f64,
}

/// Rendered image and per-pixel camera-frame depth (infinite where nothing is hit).
#[derive(Debug, Clone)]
pub struct Rendered {
    pub image: GrayImage,
    pub depth: Vec<f64>,
}

impl Scene {
    /// A single fronto-parallel plane z = `depth` spanning ±`half` in x and y.
    pub fn plane(depth: f64, half: f64, seed: u64) -> Self {
        Scene {
            quads: vec![Quad::new(
                Vector3::new(-half, -half, depth),
                Vector3::new(2.0 * half, 0.0, 0.0),
                Vector3::new(0.0, 2.0 * half, 0.0),
                Texture::random(seed),
            )],
            occluders: Vec::new(),
            scale: depth,
        }
    }

    /// A closed room (x right, y down, z forward) with two boxes on the
    /// floor. The camera is expected near the origin looking along +z.
    pub fn room(seed: u64) -> Self {
        let (x0, x1) = (-2.5, 2.5);
        let (y0, y1) = (-1.5, 1.5);
        let (z0, z1) = (-2.0, 3.5);
        let tex = |k: u64| Texture::random(splitmix(seed.wrapping_add(k)));
        let mut scene = Scene {
            quads: vec![
                // front, back, left, right, ceiling, floor
                Quad::new(Vector3::new(x0, y0, z1), Vector3::new(x1 - x0, 0.0, 0.0), Vector3::new(0.0, y1 - y0, 0.0), tex(1)),
                Quad::new(Vector3::new(x0, y0, z0), Vector3::new(x1 - x0, 0.0, 0.0), Vector3::new(0.0, y1 - y0, 0.0), tex(2)),
                Quad::new(Vector3::new(x0, y0, z0), Vector3::new(0.0, 0.0, z1 - z0), Vector3::new(0.0, y1 - y0, 0.0), tex(3)),
                Quad::new(Vector3::new(x1, y0, z0), Vector3::new(0.0, 0.0, z1 - z0), Vector3::new(0.0, y1 - y0, 0.0), tex(4)),
                Quad::new(Vector3::new(x0, y0, z0), Vector3::new(x1 - x0, 0.0, 0.0), Vector3::new(0.0, 0.0, z1 - z0), tex(5)),
                Quad::new(Vector3::new(x0, y1, z0), Vector3::new(x1 - x0, 0.0, 0.0), Vector3::new(0.0, 0.0, z1 - z0), tex(6)),
            ],
            occluders: Vec::new(),
            scale: 3.0,
        };
        scene.add_box(Vector3::new(-1.1, 1.05, 2.4), Vector3::new(0.45, 0.45, 0.45), splitmix(seed ^ 11));
        scene.add_box(Vector3::new(1.2, 1.15, 1.9), Vector3::new(0.35, 0.35, 0.3), splitmix(seed ^ 12));
        scene
    }

    /// Adds the six faces of an axis-aligned box.
    pub fn add_box(&mut self, center: Vector3<f64>, half: Vector3<f64>, seed: u64) {
        let lo = center - half;
        let size = half * 2.0;
        let ex = Vector3::new(size.x, 0.0, 0.0);
        let ey = Vector3::new(0.0, size.y, 0.0);
        let ez = Vector3::new(0.0, 0.0, size.z);
        let faces = [
            (lo, ex, ey),
            (lo + ez, ex, ey),
            (lo, ez, ey),
            (lo + ex, ez, ey),
            (lo, ex, ez),
            (lo + ey, ex, ez),
        ];
        for (k, (o, a, b)) in faces.into_iter().enumerate() {
            self.quads.push(Quad::new(o, a, b, Texture::random(splitmix(seed.wrapping_add(k as u64)))));
        }
        self.occluders.push(Occluder {
            center: center.into(),
            half: half.into(),
        });
    }

    /// Nearest intersection along a world-space ray.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (i, q) in self.quads.iter().enumerate() {
            if let Some((d, s, t)) = q.intersect(origin, dir) {
                if best.is_none_or(|b| d < b.distance) {
                    let (_, a, b) = q.vectors();
                    best = Some(Hit {
                        distance: d,
                        quad: i,
                        surface: Vector2::new(s * a.norm(), t * b.norm()),
                    });
                }
            }
        }
        best
    }

    /// Texture radiance seen along a ray, if anything is hit.
    pub fn radiance(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        self.intersect(origin, dir)
            .map(|h| self.quads[h.quad].texture.eval(h.surface.x, h.surface.y))
    }

    /// Renders I = e^a · radiance + b + N(0, noise²) with `supersample`²
    /// rays per pixel; depth is taken along the central ray.
    pub fn render(
        &self,
        cam: &CameraModel,
        pose: &Se3,
        affine: AffineBrightness,
        noise_sigma: f64,
        noise_seed: u64,
        supersample: usize,
    ) -> Result<Rendered, SynthError> {
        let center = pose.translation;
        if self.occluders.iter().any(|o| o.contains(&center)) {
            return Err(SynthError::CameraInsideGeometry);
        }
        let ss = supersample.max(1);
        let gain = affine.a.exp();
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let normal = Normal::new(0.0, noise_sigma.max(0.0)).expect("finite noise sigma");
        let mut data = Vec::with_capacity(cam.width * cam.height);
        let mut depth = Vec::with_capacity(cam.width * cam.height);
        for y in 0..cam.height {
            for x in 0..cam.width {
                let mut acc = 0.0;
                let mut n = 0;
                for sy in 0..ss {
                    for sx in 0..ss {
                        let off = |k: usize| (k as f64 + 0.5) / ss as f64 - 0.5;
                        let u = Vector2::new(x as f64 + off(sx), y as f64 + off(sy));
                        let dir = pose.rotation * cam.unproject_ray(&u);
                        if let Some(r) = self.radiance(&center, &dir) {
                            acc += r;
                            n += 1;
                        }
                    }
                }
                let radiance = if n > 0 { acc / n as f64 } else { 0.0 };
                let noise = if noise_sigma > 0.0 { normal.sample(&mut rng) } else { 0.0 };
                data.push((gain * radiance + affine.b + noise) as f32);
                let ray = cam.unproject_ray(&Vector2::new(x as f64, y as f64));
                let z = self
                    .intersect(&center, &(pose.rotation * ray))
                    .map_or(f64::INFINITY, |h| h.distance);
                depth.push(z);
            }
        }
        Ok(Rendered {
            image: GrayImage::new(cam.width, cam.height, data).expect("sized buffer"),
            depth,
        })
    }

    /// Camera-frame depth of the surface seen through `pixel`.
    pub fn depth_at(&self, cam: &CameraModel, pose: &Se3, pixel: &Vector2<f64>) -> Option<f64> {
        let ray = cam.unproject_ray(pixel);
        self.intersect(&pose.translation, &(pose.rotation * ray)).map(|h| h.distance)
    }

    /// Index of the quad seen through `pixel`.
    pub fn quad_at(&self, cam: &CameraModel, pose: &Se3, pixel: &Vector2<f64>) -> Option<usize> {
        let ray = cam.unproject_ray(pixel);
        self.intersect(&pose.translation, &(pose.rotation * ray)).map(|h| h.quad)
    }

    /// `true` when every pixel within `radius` of `pixel` sees the same quad.
    pub fn is_interior(&self, cam: &CameraModel, pose: &Se3, pixel: &Vector2<f64>, radius: f64) -> bool {
        let center = self.quad_at(cam, pose, pixel);
        center.is_some()
            && [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)]
                .iter()
                .all(|&(dx, dy)| self.quad_at(cam, pose, &(pixel + Vector2::new(dx, dy) * radius)) == center)
    }

    /// Points on every quad on a grid of at most `spacing` between neighbours.
    pub fn surface_samples(&self, spacing: f64) -> Vec<Vector3<f64>> {
        let mut out = Vec::new();
        for q in &self.quads {
            let (_, a, b) = q.vectors();
            let nu = (a.norm() / spacing).ceil().max(1.0) as usize;
            let nv = (b.norm() / spacing).ceil().max(1.0) as usize;
            for i in 0..=nu {
                for j in 0..=nv {
                    out.push(q.point(i as f64 / nu as f64, j as f64 / nv as f64));
                }
            }
        }
        out
    }

    /// Two triangles per quad.
    pub fn triangles(&self) -> Vec<[Vector3<f64>; 3]> {
        self.quads
            .iter()
            .flat_map(|q| {
                let c = q.corners();
                [[c[0], c[1], c[2]], [c[0], c[2], c[3]]]
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectoryKind {
    Line,
    Orbit,
    RevisitLoop,
}

impl std::str::FromStr for TrajectoryKind {
    type Err = SynthError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "line" => Ok(TrajectoryKind::Line),
            "orbit" => Ok(TrajectoryKind::Orbit),
            "revisit-loop" | "loop" => Ok(TrajectoryKind::RevisitLoop),
            other => Err(SynthError::UnknownKind(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryParams {
    /// Line: travel along x. Orbit: radius. Loop: lateral semi-axis.
    pub extent: f64,
    /// Loop: forward semi-axis. Orbit: distance of the target from the origin.
    pub depth_extent: f64,
    /// Loop: amplitude of the yaw oscillation, radians.
    pub yaw_amplitude: f64,
}

impl Default for TrajectoryParams {
    fn default() -> Self {
        TrajectoryParams {
            extent: 0.8,
            depth_extent: 0.5,
            yaw_amplitude: 0.12,
        }
    }
}

fn yaw(angle: f64) -> Matrix3<f64> {
    so3_exp(&Vector3::new(0.0, angle, 0.0))
}

/// World-from-camera poses along a smooth path.
pub fn make_trajectory(kind: TrajectoryKind, n: usize, params: &TrajectoryParams) -> Result<Vec<Se3>, SynthError> {
    if n < 2 {
        return Err(SynthError::TooFewFrames);
    }
    let poses = (0..n)
        .map(|i| {
            let s = i as f64 / (n - 1) as f64;
            match kind {
                TrajectoryKind::Line => Se3::from_translation(Vector3::new(params.extent * s, 0.0, 0.0)),
                TrajectoryKind::Orbit => {
                    let target = Vector3::new(0.0, 0.0, params.depth_extent);
                    let angle = 0.6 * (s - 0.5);
                    let c = target + Vector3::new(angle.sin(), 0.0, -angle.cos()) * params.extent;
                    Se3::new(yaw(angle), c)
                }
                TrajectoryKind::RevisitLoop => {
                    let phase = std::f64::consts::TAU * s;
                    let c = Vector3::new(
                        params.extent * phase.sin(),
                        0.1 * params.extent * (2.0 * phase).sin(),
                        params.depth_extent * (1.0 - phase.cos()),
                    );
                    Se3::new(yaw(params.yaw_amplitude * phase.sin()), c)
                }
            }
        })
        .collect();
    Ok(poses)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SequenceConfig {
    pub kind: TrajectoryKind,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub noise_sigma: f64,
    /// Peak |a| of the injected exposure drift.
    pub affine_a: f64,
    /// Peak |b| of the injected offset drift.
    pub affine_b: f64,
    pub fps: f64,
    pub seed: u64,
    pub supersample: usize,
    pub trajectory: TrajectoryParams,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        SequenceConfig {
            kind: TrajectoryKind::RevisitLoop,
            frames: 100,
            width: 160,
            height: 120,
            focal: 120.0,
            noise_sigma: 1.0,
            affine_a: 0.15,
            affine_b: 6.0,
            fps: 20.0,
            seed: 1,
            supersample: 3,
            trajectory: TrajectoryParams::default(),
        }
    }
}

/// Rendered frames with their ground truth.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub scene: Scene,
    pub camera: CameraModel,
    pub timestamps_ns: Vec<u64>,
    pub poses: Vec<Se3>,
    pub affines: Vec<AffineBrightness>,
    pub frames: Vec<Rendered>,
}

impl Sequence {
    pub fn timestamp(&self, i: usize) -> f64 {
        self.timestamps_ns[i] as f64 / 1e9
    }
}

/// Smooth per-frame exposure and offset drift.
pub fn affine_drift(n: usize, peak_a: f64, peak_b: f64, seed: u64) -> Vec<AffineBrightness> {
    let pa = std::f64::consts::TAU * lattice(seed, 1, 2);
    let pb = std::f64::consts::TAU * lattice(seed, 3, 4);
    (0..n)
        .map(|i| {
            let s = i as f64 / n.max(1) as f64;
            AffineBrightness::new(
                peak_a * (std::f64::consts::TAU * 1.3 * s + pa).sin(),
                peak_b * (std::f64::consts::TAU * 0.7 * s + pb).sin(),
            )
        })
        .collect()
}

pub fn default_camera(width: usize, height: usize, focal: f64) -> CameraModel {
    CameraModel::new(
        focal,
        focal,
        (width as f64 - 1.0) / 2.0,
        (height as f64 - 1.0) / 2.0,
        width,
        height,
    )
}

/// Renders a complete sequence in the room scene.
pub fn generate(config: &SequenceConfig) -> Result<Sequence, SynthError> {
    let scene = Scene::room(config.seed);
    let camera = default_camera(config.width, config.height, config.focal);
    let poses = make_trajectory(config.kind, config.frames, &config.trajectory)?;
    let affines = affine_drift(config.frames, config.affine_a, config.affine_b, config.seed);
    let period_ns = (1e9 / config.fps).round() as u64;
    let timestamps_ns: Vec<u64> = (0..config.frames as u64).map(|i| 1_000_000_000 + i * period_ns).collect();
    let frames = poses
        .iter()
        .zip(&affines)
        .enumerate()
        .map(|(i, (pose, affine))| {
            scene.render(
                &camera,
                pose,
                *affine,
                config.noise_sigma,
                splitmix(config.seed ^ (i as u64 + 1)),
                config.supersample,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Sequence {
        scene,
        camera,
        timestamps_ns,
        poses,
        affines,
        frames,
    })
}
