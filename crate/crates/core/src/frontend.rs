//! Frame tracking against the local map, keyframe decisions, epipolar
//! search for candidate points, point activation and map bootstrap.

use std::sync::Arc;

use nalgebra::{Matrix3x6, SMatrix, SVector, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{hat, relative, Se3, Twist};
use crate::image::{scale_to_level, select_candidates, CandidateSelection, PatchPattern, Pyramid, PATCH_SIZE};
use crate::lmcw::DistanceMap;
use crate::map::{CandidatePoint, Map};
use crate::pba::{self, Gauge, InverseDepthPrior, PbaConfig, PbaFrame, PbaObservation, PbaPoint, PbaProblem, PbaReport};
use crate::photometric::{patch_residuals, AffineBrightness, FrameView, INTERIOR_MARGIN};
use crate::{KeyframeId, PointId};

type Matrix8 = SMatrix<f64, 8, 8>;
type Vector8 = SVector<f64, 8>;

/// Point of the local map expressed in the reference keyframe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackingPoint {
    pub pixel: Vector2<f64>,
    pub rho: f64,
}

/// Immutable snapshot published by mapping: the latest keyframe and the
/// window points visible in it.
#[derive(Debug, Clone)]
pub struct LocalMap {
    pub reference: KeyframeId,
    pub pyramid: Arc<Pyramid>,
    /// World-from-reference.
    pub pose: Se3,
    pub affine: AffineBrightness,
    pub points: Vec<TrackingPoint>,
}

impl LocalMap {
    /// Projects the live points hosted in `hosts` into `reference`.
    pub fn from_map(map: &Map, hosts: &[KeyframeId], reference: KeyframeId) -> Self {
        let kf = map.keyframe(reference);
        let cam = kf.camera();
        let inv = kf.pose.inverse();
        let margin = INTERIOR_MARGIN + 1.0;
        let mut points = Vec::new();
        for &h in hosts {
            for &pid in &map.keyframe(h).hosted {
                let p = map.point(pid);
                if !p.is_live() {
                    continue;
                }
                let local = inv.transform(&map.world_point(p));
                if local.z <= 0.0 {
                    continue;
                }
                let u = cam.project_unchecked(&local);
                if cam.contains(&u, margin) {
                    points.push(TrackingPoint { pixel: u, rho: 1.0 / local.z });
                }
            }
        }
        LocalMap {
            reference,
            pyramid: kf.pyramid.clone(),
            pose: kf.pose,
            affine: kf.affine,
            points,
        }
    }

    pub fn mean_inverse_depth(&self) -> f64 {
        if self.points.is_empty() {
            return 0.0;
        }
        self.points.iter().map(|p| p.rho).sum::<f64>() / self.points.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackerConfig {
    /// Pyramid levels used, coarsest first; clamped to the pyramid depth.
    pub levels: usize,
    pub max_iterations: usize,
    pub huber: f64,
    pub gradient_c: f64,
    /// |e| above which a residual counts as an outlier.
    pub inlier_threshold: f64,
    pub min_inlier_ratio: f64,
    pub initial_damping: f64,
    pub convergence: f64,
    /// Level-0 RMS robust residual above which tracking counts as diverged.
    pub max_rmse: f64,
    /// Largest plausible |a_frame − a_reference|.
    pub max_log_gain: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            levels: 4,
            max_iterations: 20,
            huber: 9.0,
            gradient_c: 50.0,
            inlier_threshold: 27.0,
            min_inlier_ratio: 0.3,
            initial_damping: 1e-3,
            convergence: 1e-5,
            max_rmse: 20.0,
            max_log_gain: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackedFrame {
    pub timestamp: f64,
    pub reference: KeyframeId,
    /// World-from-frame.
    pub pose: Se3,
    /// Frame-from-reference.
    pub relative: Se3,
    pub affine: AffineBrightness,
    /// Level-0 robust energy.
    pub energy: f64,
    pub rmse: f64,
    pub inlier_ratio: f64,
    pub iterations: usize,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrackingError {
    #[error("local map has no points")]
    NoPoints,
    #[error("initial guess is not finite")]
    InvalidGuess,
    #[error("tracking lost (inlier ratio {inlier_ratio:.2}, rmse {rmse:.2})")]
    Lost { inlier_ratio: f64, rmse: f64 },
}

#[derive(Debug, Clone, Copy)]
struct ReferenceResidual {
    point: Vector3<f64>,
    intensity: f64,
    /// ∇I_r · ∂π/∂p · [I | −[p]×].
    j_geo: Vector6<f64>,
    gradient_weight: f64,
}

fn huber_weight(e: f64, k: f64) -> f64 {
    let a = e.abs();
    if a <= k {
        1.0
    } else {
        k / a
    }
}

fn huber_cost(e: f64, k: f64) -> f64 {
    let a = e.abs();
    if a <= k {
        a * a
    } else {
        2.0 * k * a - k * k
    }
}

struct LevelEval {
    energy: f64,
    valid: usize,
    inliers: usize,
}

/// Inverse-compositional direct image alignment against a [`LocalMap`].
pub struct Tracker<'a> {
    local: &'a LocalMap,
    config: TrackerConfig,
    levels: Vec<Vec<ReferenceResidual>>,
}

impl<'a> Tracker<'a> {
    /// Precomputes reference intensities and geometric Jacobians per level.
    pub fn new(local: &'a LocalMap, config: TrackerConfig) -> Self {
        let n_levels = config.levels.clamp(1, local.pyramid.n_levels());
        let levels = (0..n_levels)
            .map(|l| {
                let level = local.pyramid.level(l);
                let cam = &level.camera;
                let mut out = Vec::with_capacity(local.points.len() * PATCH_SIZE);
                for tp in &local.points {
                    let center = scale_to_level(&tp.pixel, l);
                    for off in PatchPattern::SPREAD.iter() {
                        let u = center + off;
                        let Some(s) = level.sample(&u) else { continue };
                        let p = cam.unproject_ray(&u) / tp.rho;
                        let mut d = Matrix3x6::zeros();
                        d.fixed_view_mut::<3, 3>(0, 0).copy_from(&nalgebra::Matrix3::identity());
                        d.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-hat(&p)));
                        let j = s.gradient.transpose() * cam.projection_jacobian(&p) * d;
                        out.push(ReferenceResidual {
                            point: p,
                            intensity: s.intensity,
                            j_geo: j.transpose(),
                            gradient_weight: crate::photometric::gradient_weight(&s.gradient, config.gradient_c),
                        });
                    }
                }
                out
            })
            .collect();
        Tracker { local, config, levels }
    }

    fn penalty(&self) -> f64 {
        huber_cost(self.config.inlier_threshold, self.config.huber)
    }

    fn evaluate(&self, pyramid: &Pyramid, level: usize, t_fr: &Se3, affine: &AffineBrightness) -> LevelEval {
        let lvl = pyramid.level(level);
        let alpha = (affine.a - self.local.affine.a).exp();
        let mut out = LevelEval {
            energy: 0.0,
            valid: 0,
            inliers: 0,
        };
        for r in &self.levels[level] {
            let q = t_fr.transform(&r.point);
            let value = (q.z > 0.0)
                .then(|| lvl.camera.project_unchecked(&q))
                .filter(|u| lvl.is_inside(u, 1.0))
                .and_then(|u| lvl.intensity(&u));
            match value {
                Some(i_f) => {
                    let e = i_f - affine.b - alpha * (r.intensity - self.local.affine.b);
                    out.energy += r.gradient_weight * huber_cost(e, self.config.huber);
                    out.valid += 1;
                    if e.abs() <= self.config.inlier_threshold {
                        out.inliers += 1;
                    }
                }
                None => out.energy += r.gradient_weight * self.penalty(),
            }
        }
        out
    }

    fn normal_equations(&self, pyramid: &Pyramid, level: usize, t_fr: &Se3, affine: &AffineBrightness) -> (Matrix8, Vector8) {
        let lvl = pyramid.level(level);
        let alpha = (affine.a - self.local.affine.a).exp();
        let mut h = Matrix8::zeros();
        let mut g = Vector8::zeros();
        for r in &self.levels[level] {
            let q = t_fr.transform(&r.point);
            if q.z <= 0.0 {
                continue;
            }
            let u = lvl.camera.project_unchecked(&q);
            if !lvl.is_inside(&u, 1.0) {
                continue;
            }
            let Some(i_f) = lvl.intensity(&u) else { continue };
            let centered = r.intensity - self.local.affine.b;
            let e = i_f - affine.b - alpha * centered;
            let w = r.gradient_weight * huber_weight(e, self.config.huber);
            let mut j = Vector8::zeros();
            j.fixed_rows_mut::<6>(0).copy_from(&(-alpha * r.j_geo));
            j[6] = -alpha * centered;
            j[7] = -1.0;
            h += j * j.transpose() * w;
            g += j * (w * e);
        }
        (h, g)
    }

    /// Aligns `frame` starting from `guess` (frame-from-reference) and the
    /// frame brightness `affine`.
    pub fn track(&self, frame: &Pyramid, guess: &Se3, affine: AffineBrightness, timestamp: f64) -> Result<TrackedFrame, TrackingError> {
        if self.local.points.is_empty() {
            return Err(TrackingError::NoPoints);
        }
        if !guess.translation.iter().all(|x| x.is_finite()) || !guess.rotation.iter().all(|x| x.is_finite()) {
            return Err(TrackingError::InvalidGuess);
        }
        let mut t_fr = *guess;
        let mut aff = affine;
        let mut iterations = 0;
        let top = self.levels.len().min(frame.n_levels());
        for level in (0..top).rev() {
            let mut current = self.evaluate(frame, level, &t_fr, &aff).energy;
            let mut lambda = self.config.initial_damping;
            for _ in 0..self.config.max_iterations {
                iterations += 1;
                let (h, g) = self.normal_equations(frame, level, &t_fr, &aff);
                let mut damped = h;
                for i in 0..8 {
                    damped[(i, i)] = if h[(i, i)] > 0.0 { h[(i, i)] * (1.0 + lambda) } else { 1.0 };
                }
                let Some(chol) = damped.cholesky() else {
                    lambda *= 10.0;
                    continue;
                };
                let delta = -chol.solve(&g);
                let step = Twist(Vector6::from_fn(|i, _| -delta[i]));
                let cand_pose = t_fr * Se3::exp(&step);
                let cand_aff = AffineBrightness::new(aff.a + delta[6], aff.b + delta[7]);
                let cand = self.evaluate(frame, level, &cand_pose, &cand_aff).energy;
                if cand <= current {
                    let decrease = if current > 0.0 { (current - cand) / current } else { 0.0 };
                    t_fr = cand_pose.normalized();
                    aff = cand_aff;
                    current = cand;
                    lambda = (lambda * 0.5).max(1e-10);
                    if decrease < self.config.convergence || delta.norm() < 1e-8 {
                        break;
                    }
                } else {
                    lambda *= 10.0;
                    if lambda > 1e8 {
                        break;
                    }
                }
            }
        }
        let eval = self.evaluate(frame, 0, &t_fr, &aff);
        let total = self.levels[0].len().max(1);
        let inlier_ratio = eval.inliers as f64 / total as f64;
        let rmse = if eval.valid > 0 {
            (eval.energy / eval.valid as f64).sqrt()
        } else {
            f64::INFINITY
        };
        let diverged = !eval.energy.is_finite() || rmse > self.config.max_rmse || (aff.a - self.local.affine.a).abs() > self.config.max_log_gain;
        if diverged || inlier_ratio < self.config.min_inlier_ratio {
            return Err(TrackingError::Lost { inlier_ratio, rmse });
        }
        Ok(TrackedFrame {
            timestamp,
            reference: self.local.reference,
            pose: self.local.pose * t_fr.inverse(),
            relative: t_fr,
            affine: aff,
            energy: eval.energy,
            rmse,
            inlier_ratio,
            iterations,
        })
    }
}

/// Convenience wrapper around [`Tracker`].
pub fn track_frame(
    frame: &Pyramid,
    local: &LocalMap,
    guess: &Se3,
    affine: AffineBrightness,
    timestamp: f64,
    config: &TrackerConfig,
) -> Result<TrackedFrame, TrackingError> {
    Tracker::new(local, *config).track(frame, guess, affine, timestamp)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeyframeWeights {
    pub visibility: f64,
    pub translation: f64,
    pub brightness: f64,
}

impl Default for KeyframeWeights {
    fn default() -> Self {
        KeyframeWeights {
            visibility: 1.0 / 0.7,
            translation: 1.0 / 0.12,
            brightness: 1.0 / 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyframeScores {
    pub s_u: f64,
    pub s_t: f64,
    pub s_a: f64,
    pub weights: KeyframeWeights,
}

impl KeyframeScores {
    pub fn combined(&self) -> f64 {
        self.weights.visibility * (1.0 - self.s_u) + self.weights.translation * self.s_t + self.weights.brightness * self.s_a
    }

    pub fn needs_keyframe(&self) -> bool {
        self.combined() > 1.0
    }
}

/// Visibility, parallax and brightness scores of a tracked frame relative to
/// the reference keyframe of `local`.
pub fn keyframe_scores(local: &LocalMap, relative: &Se3, affine: &AffineBrightness, weights: KeyframeWeights) -> KeyframeScores {
    let cam = local.pyramid.camera();
    let mut sum = 0.0;
    for tp in &local.points {
        let p = cam.unproject_ray(&tp.pixel) / tp.rho;
        let q = relative.transform(&p);
        if q.z > 0.0 && cam.contains(&cam.project_unchecked(&q), 0.0) {
            sum += (q.z / p.z).min(1.0);
        }
    }
    let n = local.points.len();
    KeyframeScores {
        s_u: if n > 0 { sum / n as f64 } else { 0.0 },
        s_t: relative.translation.norm() * local.mean_inverse_depth(),
        s_a: (affine.a - local.affine.a).abs(),
        weights,
    }
}

pub fn keyframe_decision(local: &LocalMap, tracked: &TrackedFrame, weights: KeyframeWeights) -> (bool, KeyframeScores) {
    let s = keyframe_scores(local, &tracked.relative, &tracked.affine, weights);
    (s.needs_keyframe(), s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpipolarConfig {
    /// Sample spacing along the segment, pixels.
    pub step: f64,
    /// Segments shorter than this carry no depth information.
    pub min_segment: f64,
    /// A second minimum within this factor of the best marks the match ambiguous.
    pub ambiguity_ratio: f64,
    /// Minimum pixel distance between best and second-best samples.
    pub min_separation: f64,
    /// Cap on the pixel uncertainty used to shrink the interval.
    pub max_uncertainty: f64,
    /// Matches whose RMS residual exceeds this are rejected.
    pub max_error: f64,
}

impl Default for EpipolarConfig {
    fn default() -> Self {
        EpipolarConfig {
            step: 1.0,
            min_segment: 1.5,
            ambiguity_ratio: 1.25,
            min_separation: 2.0,
            max_uncertainty: 10.0,
            max_error: 12.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchOutcome {
    Updated,
    LowParallax,
    OutOfImage,
    Ambiguous,
    NoMatch,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchResult {
    pub outcome: SearchOutcome,
    /// Refined match in the target image.
    pub pixel: Option<Vector2<f64>>,
    /// Index of the best discrete sample.
    pub best_index: Option<usize>,
    pub best_cost: f64,
    pub second_cost: f64,
    pub samples: usize,
}

impl SearchResult {
    fn without_match(outcome: SearchOutcome) -> Self {
        SearchResult {
            outcome,
            pixel: None,
            best_index: None,
            best_cost: f64::INFINITY,
            second_cost: f64::INFINITY,
            samples: 0,
        }
    }
}

/// The part of an epipolar line swept by an inverse-depth interval, clipped
/// to the target image. The target point is π(A + ρB).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpipolarSegment {
    pub start: Vector2<f64>,
    pub end: Vector2<f64>,
    /// The image border cut the segment at this end.
    pub clipped_start: bool,
    pub clipped_end: bool,
    a: Vector3<f64>,
    b: Vector3<f64>,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

impl EpipolarSegment {
    pub fn length(&self) -> f64 {
        (self.end - self.start).norm()
    }

    pub fn direction(&self) -> Vector2<f64> {
        (self.end - self.start) / self.length()
    }

    pub fn point_at(&self, t: f64) -> Vector2<f64> {
        self.start + (self.end - self.start) * t
    }

    /// Inverse depth whose projection is `pixel`, which must lie on the line.
    pub fn rho_at(&self, pixel: &Vector2<f64>) -> f64 {
        let d = self.end - self.start;
        let (s, ac, bc) = if d.x.abs() >= d.y.abs() {
            ((pixel.x - self.cx) / self.fx, self.a.x, self.b.x)
        } else {
            ((pixel.y - self.cy) / self.fy, self.a.y, self.b.y)
        };
        (ac - s * self.a.z) / (s * self.b.z - bc)
    }

    fn depth_positive(&self, rho: f64) -> bool {
        rho > 0.0 && rho.is_finite() && self.a.z + rho * self.b.z > 0.0
    }
}

/// Clips the segment p0–p1 to [lo, hi]² box coordinates; returns parameters.
fn clip_segment(p0: &Vector2<f64>, p1: &Vector2<f64>, lo: &Vector2<f64>, hi: &Vector2<f64>) -> Option<(f64, f64)> {
    let d = p1 - p0;
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for k in 0..2 {
        if d[k].abs() < 1e-12 {
            if p0[k] < lo[k] || p0[k] > hi[k] {
                return None;
            }
            continue;
        }
        let (a, b) = ((lo[k] - p0[k]) / d[k], (hi[k] - p0[k]) / d[k]);
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    (t0 <= t1).then_some((t0, t1))
}

/// Epipolar segment of `pixel` (host, level 0) for ρ ∈ [rho_min, rho_max].
/// `Err(LowParallax)` if the unclipped segment is shorter than
/// `min_segment`, `Err(OutOfImage)` if nothing of it is inside.
pub fn epipolar_segment(
    host: &FrameView,
    target: &FrameView,
    pixel: &Vector2<f64>,
    rho_min: f64,
    rho_max: f64,
    min_segment: f64,
) -> Result<EpipolarSegment, SearchOutcome> {
    let t_th = relative(target.pose, host.pose);
    let a = t_th.rotation * host.level.camera.unproject_ray(pixel);
    let b = t_th.translation;
    let cam = &target.level.camera;
    if a.z <= 0.0 && b.z <= 0.0 {
        return Err(SearchOutcome::OutOfImage);
    }
    let mut lo = rho_min;
    let mut hi = rho_max;
    // keep A_z + ρ B_z > 0 with a small margin
    if b.z < 0.0 {
        hi = hi.min(0.999 * a.z / -b.z);
    } else if a.z <= 0.0 {
        lo = lo.max(1.001 * -a.z / b.z);
    }
    if !(lo < hi) {
        return Err(SearchOutcome::OutOfImage);
    }
    let proj = |rho: f64| cam.project_unchecked(&(a + b * rho));
    let (p0, p1) = (proj(lo), proj(hi));
    if (p1 - p0).norm() < min_segment {
        return Err(SearchOutcome::LowParallax);
    }
    let margin = INTERIOR_MARGIN + 2.0;
    let box_lo = Vector2::new(margin, margin);
    let box_hi = Vector2::new(cam.width as f64 - 1.0 - margin, cam.height as f64 - 1.0 - margin);
    let (t0, t1) = clip_segment(&p0, &p1, &box_lo, &box_hi).ok_or(SearchOutcome::OutOfImage)?;
    let d = p1 - p0;
    let mut seg = EpipolarSegment {
        start: p0 + d * t0,
        end: p0 + d * t1,
        clipped_start: t0 > 0.0,
        clipped_end: t1 < 1.0,
        a,
        b,
        fx: cam.fx,
        fy: cam.fy,
        cx: cam.cx,
        cy: cam.cy,
    };
    if seg.length() < 1e-9 {
        // a single in-image point still defines its own depth
        seg.end = seg.start + d / d.norm() * 1e-9;
    }
    Ok(seg)
}

/// Sum of squared residuals of the patch at inverse depth `rho`; infinite if
/// any pattern pixel is invalid.
pub fn epipolar_cost(host: &FrameView, target: &FrameView, pixel: &Vector2<f64>, rho: f64, pattern: &PatchPattern) -> f64 {
    let evals = patch_residuals(host, target, pixel, rho, pattern, 1.0, false);
    let mut sum = 0.0;
    for e in &evals {
        if !e.valid {
            return f64::INFINITY;
        }
        sum += e.residual * e.residual;
    }
    sum
}

/// Discrete samples of the search: (pixel, ρ, cost).
pub fn epipolar_samples(
    host: &FrameView,
    target: &FrameView,
    pixel: &Vector2<f64>,
    segment: &EpipolarSegment,
    step: f64,
    pattern: &PatchPattern,
) -> Vec<(Vector2<f64>, f64, f64)> {
    let n = (segment.length() / step).ceil().max(1.0) as usize;
    (0..=n)
        .map(|k| {
            let u = segment.point_at(k as f64 / n as f64);
            let rho = segment.rho_at(&u);
            let cost = if segment.depth_positive(rho) {
                epipolar_cost(host, target, pixel, rho, pattern)
            } else {
                f64::INFINITY
            };
            (u, rho, cost)
        })
        .collect()
}

/// Searches the epipolar segment of `candidate` in `target` and shrinks its
/// inverse-depth interval around the best match.
pub fn epipolar_search(
    candidate: &mut CandidatePoint,
    host: &FrameView,
    target: &FrameView,
    pattern: &PatchPattern,
    config: &EpipolarConfig,
) -> SearchResult {
    let segment = match epipolar_segment(host, target, &candidate.pixel, candidate.rho_min, candidate.rho_max, config.min_segment) {
        Ok(s) => s,
        Err(outcome) => return SearchResult::without_match(outcome),
    };
    let samples = epipolar_samples(host, target, &candidate.pixel, &segment, config.step, pattern);
    let n = samples.len() - 1;
    let spacing = segment.length() / n.max(1) as f64;
    let Some((best, &(_, _, best_cost))) = samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.2.is_finite())
        .min_by(|a, b| a.1 .2.total_cmp(&b.1 .2))
    else {
        return SearchResult::without_match(SearchOutcome::OutOfImage);
    };
    let second_cost = samples
        .iter()
        .enumerate()
        .filter(|(k, _)| (*k as f64 - best as f64).abs() * spacing >= config.min_separation)
        .map(|(_, s)| s.2)
        .fold(f64::INFINITY, f64::min);
    let mut result = SearchResult {
        outcome: SearchOutcome::Updated,
        pixel: Some(samples[best].0),
        best_index: Some(best),
        best_cost,
        second_cost,
        samples: samples.len(),
    };
    // a minimum on a border-clipped end is not bracketed: the match may lie outside
    if (best == 0 && segment.clipped_start) || (best == n && segment.clipped_end) {
        result.outcome = SearchOutcome::OutOfImage;
        return result;
    }
    if best_cost / PATCH_SIZE as f64 > config.max_error * config.max_error {
        result.outcome = SearchOutcome::NoMatch;
        return result;
    }
    // with no competitor outside the separation window the match cannot be told apart
    if !second_cost.is_finite() || second_cost <= config.ambiguity_ratio * best_cost {
        result.outcome = SearchOutcome::Ambiguous;
        return result;
    }
    // parabolic refinement in sample units
    let mut offset = 0.0;
    if best > 0 && best < n {
        let (cl, cr) = (samples[best - 1].2, samples[best + 1].2);
        let denom = cl - 2.0 * best_cost + cr;
        if cl.is_finite() && cr.is_finite() && denom > 0.0 {
            offset = (0.5 * (cl - cr) / denom).clamp(-0.5, 0.5);
        }
    }
    let t = (best as f64 + offset) / n.max(1) as f64;
    let matched = segment.point_at(t);
    let rho_best = {
        let r = segment.rho_at(&matched);
        if segment.depth_positive(r) {
            r
        } else {
            samples[best].1
        }
    };
    result.pixel = Some(matched);
    // uncertainty from the gradient component along the line
    let dir = segment.direction();
    let normal = Vector2::new(-dir.y, dir.x);
    let (mut along, mut across) = (0.0, 0.0);
    for off in pattern.iter() {
        if let Some(s) = target.level.sample(&(matched + off)) {
            along += s.gradient.dot(&dir).powi(2);
            across += s.gradient.dot(&normal).powi(2);
        }
    }
    let k = if along > 1e-12 {
        (0.5 + 0.5 * (along + across) / along).min(config.max_uncertainty)
    } else {
        config.max_uncertainty
    };
    let toward_start = segment.rho_at(&(matched - dir * k));
    let toward_end = segment.rho_at(&(matched + dir * k));
    let mut new_min = candidate.rho_min;
    let mut new_max = candidate.rho_max;
    // the segment runs from ρ_min to ρ_max, so ρ grows along `dir`
    if segment.depth_positive(toward_start) && toward_start <= rho_best {
        new_min = new_min.max(toward_start);
    }
    if segment.depth_positive(toward_end) && toward_end >= rho_best {
        new_max = new_max.min(toward_end);
    }
    if new_min <= new_max {
        candidate.rho_min = new_min;
        candidate.rho_max = new_max;
    }
    candidate.rho = rho_best.clamp(candidate.rho_min, candidate.rho_max);
    candidate.quality = if best_cost > 0.0 { second_cost / best_cost } else { f64::MAX };
    candidate.observations += 1;
    result
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivationConfig {
    pub max_width_ratio: f64,
    pub min_observations: u32,
    /// Minimum second-best over best cost ratio of the last match.
    pub min_quality: f64,
    /// Distance in level-0 pixels from the nearest point for a pixel to count as depleted.
    pub radius: f64,
}

impl Default for ActivationConfig {
    fn default() -> Self {
        ActivationConfig {
            max_width_ratio: 0.3,
            min_observations: 1,
            min_quality: 1.25,
            radius: 8.0,
        }
    }
}

impl ActivationConfig {
    pub fn is_distinctive(&self, c: &CandidatePoint) -> bool {
        c.observations >= self.min_observations && c.quality >= self.min_quality && c.width_ratio() < self.max_width_ratio
    }
}

/// Promotes distinctive candidates of `hosts` that project into depleted
/// pixels of `latest`. `distance` is updated with every activation so new
/// points keep their spacing.
pub fn activate_points(map: &mut Map, hosts: &[KeyframeId], latest: KeyframeId, distance: &mut DistanceMap, config: &ActivationConfig) -> Vec<PointId> {
    let latest_kf = map.keyframe(latest);
    let cam = *latest_kf.camera();
    let to_latest = latest_kf.pose.inverse();
    let mut activated = Vec::new();
    for &h in hosts {
        let host = map.keyframe(h);
        let host_pose = host.pose;
        let host_cam = *host.camera();
        let candidates = host.candidates.clone();
        let mut keep = Vec::with_capacity(candidates.len());
        for c in candidates {
            let mut promote = false;
            if config.is_distinctive(&c) {
                let world = host_pose.transform(&(host_cam.unproject_ray(&c.pixel) / c.rho));
                let q = to_latest.transform(&world);
                if q.z > 0.0 {
                    let u = cam.project_unchecked(&q);
                    if cam.contains(&u, INTERIOR_MARGIN) && distance.is_depleted(&u, config.radius) {
                        distance.add_projections(&[u]);
                        promote = true;
                    }
                }
            }
            if promote {
                activated.push(map.add_point(h, c.pixel, c.rho, latest));
            } else {
                keep.push(c);
            }
        }
        map.keyframe_mut(h).candidates = keep;
    }
    activated
}

/// Fresh candidates for a keyframe with the interval [rho_min, rho_max].
pub fn new_candidates(pyramid: &Pyramid, count: usize, selection: &CandidateSelection, rho_min: f64, rho_max: f64) -> Vec<CandidatePoint> {
    select_candidates(pyramid.image(), count, selection)
        .into_iter()
        .map(|c| CandidatePoint::new(Vector2::new(c.x as f64, c.y as f64), rho_min, rho_max, c.gradient))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    /// Median translational flow (normalized image units) needed before the
    /// second keyframe is created.
    pub min_parallax: f64,
    pub max_frames: usize,
    /// Weight of the ρ = 1 prior while parallax is zero.
    pub prior_weight: f64,
    /// Prior weight left for the final two-frame solve.
    pub final_prior_weight: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            min_parallax: 0.06,
            max_frames: 40,
            prior_weight: 100.0,
            final_prior_weight: 0.01,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BootstrapError {
    #[error("no candidate points in the first frame")]
    NoCandidates,
    #[error("insufficient parallax after {frames} frames (reached {parallax:.4})")]
    InsufficientParallax { frames: usize, parallax: f64 },
    #[error("bootstrap optimization failed: {0}")]
    Optimization(#[from] pba::PbaError),
}

#[derive(Debug, Clone)]
pub struct BootstrapFrame {
    pub timestamp: f64,
    pub pyramid: Arc<Pyramid>,
    pub pose: Se3,
    pub affine: AffineBrightness,
}

#[derive(Debug, Clone)]
pub struct BootstrapResult {
    pub first: BootstrapFrame,
    pub second: BootstrapFrame,
    /// Points hosted in the first frame: pixel, ρ, and whether the
    /// observation in the second frame survived outlier removal.
    pub points: Vec<(Vector2<f64>, f64, bool)>,
    /// Poses of the frames consumed before the second keyframe.
    pub intermediate: Vec<(f64, Se3)>,
    pub parallax: f64,
    pub report: PbaReport,
}

/// Median over points of the image displacement caused by the translation
/// alone, in normalized image units; rotation and the depth scale cancel.
fn translational_parallax(problem: &PbaProblem, pose: &Se3) -> f64 {
    let cam = problem.frames[0].pyramid.camera();
    let to_frame = pose.inverse();
    let mut flows: Vec<f64> = problem
        .points
        .iter()
        .filter_map(|p| {
            let ray = to_frame.rotation * cam.unproject_ray(&p.pixel);
            let moved = ray + to_frame.translation * p.rho;
            (ray.z > 0.0 && moved.z > 0.0).then(|| (moved.xy() / moved.z - ray.xy() / ray.z).norm())
        })
        .collect();
    if flows.is_empty() {
        return 0.0;
    }
    flows.sort_by(f64::total_cmp);
    flows[flows.len() / 2]
}

/// Incremental two-view initialization: the first frame's candidates start
/// at ρ = 1 under a prior that relaxes as parallax accumulates.
pub struct Bootstrapper {
    first: BootstrapFrame,
    points: Vec<PbaPoint>,
    pose: Se3,
    affine: AffineBrightness,
    prior_weight: f64,
    frames: usize,
    parallax: f64,
    intermediate: Vec<(f64, Se3)>,
    config: BootstrapConfig,
    pba: PbaConfig,
}

impl Bootstrapper {
    pub fn new(
        pyramid: Arc<Pyramid>,
        timestamp: f64,
        candidates: usize,
        selection: &CandidateSelection,
        config: BootstrapConfig,
        pba: PbaConfig,
    ) -> Result<Self, BootstrapError> {
        let selected = select_candidates(pyramid.image(), candidates, selection);
        if selected.is_empty() {
            return Err(BootstrapError::NoCandidates);
        }
        let points = selected
            .iter()
            .enumerate()
            .map(|(i, c)| PbaPoint {
                id: i,
                host: 0,
                pixel: Vector2::new(c.x as f64, c.y as f64),
                rho: 1.0,
                fixed: false,
                prior: None,
            })
            .collect();
        Ok(Bootstrapper {
            first: BootstrapFrame {
                timestamp,
                pyramid,
                pose: Se3::identity(),
                affine: AffineBrightness::default(),
            },
            points,
            pose: Se3::identity(),
            affine: AffineBrightness::default(),
            prior_weight: config.prior_weight,
            frames: 0,
            parallax: 0.0,
            intermediate: Vec::new(),
            config,
            pba,
        })
    }

    pub fn first(&self) -> &BootstrapFrame {
        &self.first
    }

    fn problem(&self, pyramid: &Arc<Pyramid>, pose: Se3, weight: f64, gauge: Gauge) -> PbaProblem {
        let frames = vec![
            PbaFrame {
                id: 0,
                pyramid: self.first.pyramid.clone(),
                pose: Se3::identity(),
                affine: AffineBrightness::default(),
                fixed: false,
            },
            PbaFrame {
                id: 1,
                pyramid: pyramid.clone(),
                pose,
                affine: self.affine,
                fixed: false,
            },
        ];
        let points = self
            .points
            .iter()
            .map(|p| PbaPoint {
                prior: (weight > 0.0).then_some(InverseDepthPrior { mean: 1.0, weight }),
                ..p.clone()
            })
            .collect();
        let observations = (0..self.points.len()).map(|i| PbaObservation { point: i, target: 1 }).collect();
        PbaProblem {
            frames,
            points,
            observations,
            gauge,
            pattern: PatchPattern::SPREAD,
        }
    }

    /// Consumes the next frame. Returns the initialization once the
    /// parallax threshold is met.
    pub fn push(&mut self, pyramid: Arc<Pyramid>, timestamp: f64) -> Result<Option<BootstrapResult>, BootstrapError> {
        self.frames += 1;
        let guess = self.pose;
        let anchor = Gauge::Anchor {
            frame: 0,
            mean_inverse_depth: None,
        };
        let mut problem = self.problem(&pyramid, guess, self.prior_weight, anchor);
        pba::solve(&mut problem, &self.pba)?;
        let pose = problem.frames[1].pose;
        self.parallax = translational_parallax(&problem, &pose);
        self.pose = pose;
        self.affine = problem.frames[1].affine;
        for (dst, src) in self.points.iter_mut().zip(&problem.points) {
            dst.rho = src.rho;
        }
        if self.parallax >= self.config.min_parallax {
            let gauge = Gauge::Anchor {
                frame: 0,
                mean_inverse_depth: Some(1.0),
            };
            let mut problem = self.problem(&pyramid, self.pose, self.config.final_prior_weight, gauge);
            let report = pba::solve(&mut problem, &self.pba)?;
            let scale = report.rescale.map_or(1.0, |(_, s)| s);
            let removed: std::collections::BTreeSet<PointId> = report.removed_observations.iter().map(|&(p, _)| p).collect();
            let points = problem.points.iter().map(|p| (p.pixel, p.rho, !removed.contains(&p.id))).collect();
            let intermediate = self
                .intermediate
                .iter()
                .map(|&(t, p)| (t, Se3::new(p.rotation, p.translation * scale)))
                .collect();
            return Ok(Some(BootstrapResult {
                first: self.first.clone(),
                second: BootstrapFrame {
                    timestamp,
                    pyramid,
                    pose: problem.frames[1].pose,
                    affine: problem.frames[1].affine,
                },
                points,
                intermediate,
                parallax: self.parallax,
                report,
            }));
        }
        if self.frames >= self.config.max_frames {
            return Err(BootstrapError::InsufficientParallax {
                frames: self.frames,
                parallax: self.parallax,
            });
        }
        self.intermediate.push((timestamp, self.pose));
        let relax = (1.0 - self.parallax / self.config.min_parallax).max(0.0);
        self.prior_weight = (self.config.prior_weight * relax * relax).max(self.config.final_prior_weight);
        Ok(None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CameraModel;
    use crate::image::GrayImage;
    use crate::lmcw::DistanceMap;
    use crate::synthetic::{default_camera, Scene};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const SCALE: f64 = 3.0;

    fn selection() -> CandidateSelection {
        CandidateSelection {
            block_size: 8,
            threshold_margin: 2.0,
            ..Default::default()
        }
    }

    fn render(scene: &Scene, cam: &CameraModel, pose: &Se3, affine: AffineBrightness, noise: f64, seed: u64) -> (Arc<Pyramid>, Vec<f64>) {
        let r = scene.render(cam, pose, affine, noise, seed, 3).unwrap();
        (Arc::new(Pyramid::build(r.image, *cam, 4).unwrap()), r.depth)
    }

    fn ground_truth_local_map(scene: &Scene, cam: &CameraModel, pose: &Se3) -> LocalMap {
        let (pyramid, depth) = render(scene, cam, pose, AffineBrightness::default(), 0.0, 0);
        let dense = CandidateSelection {
            block_size: 4,
            threshold_margin: 1.0,
            ..Default::default()
        };
        let points = select_candidates(pyramid.image(), 2000, &dense)
            .into_iter()
            .filter(|c| scene.is_interior(cam, pose, &Vector2::new(c.x as f64, c.y as f64), 3.0))
            .map(|c| TrackingPoint {
                pixel: Vector2::new(c.x as f64, c.y as f64),
                rho: 1.0 / depth[c.y * cam.width + c.x],
            })
            .collect();
        LocalMap {
            reference: 0,
            pyramid,
            pose: *pose,
            affine: AffineBrightness::default(),
            points,
        }
    }

    fn twist(v: [f64; 6]) -> Twist {
        Twist(Vector6::from_row_slice(&v))
    }

    #[test]
    fn identical_frame_tracks_to_identity() {
        let scene = Scene::room(3);
        let cam = default_camera(160, 120, 120.0);
        let local = ground_truth_local_map(&scene, &cam, &Se3::identity());
        let t = track_frame(&local.pyramid, &local, &Se3::identity(), AffineBrightness::default(), 0.0, &TrackerConfig::default()).unwrap();
        assert!(t.relative.translation.norm() < 1e-9);
        assert!(t.affine.a.abs() < 1e-9 && t.affine.b.abs() < 1e-9);
        assert!(t.energy < 1e-12);
        assert!((t.inlier_ratio - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tracks_known_motion() {
        let scene = Scene::room(4);
        let cam = default_camera(160, 120, 120.0);
        let local = ground_truth_local_map(&scene, &cam, &Se3::identity());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for k in 0..5 {
            let truth = Se3::exp(&twist([0.04 * k as f64, -0.01, 0.05, 0.01, -0.02 * k as f64, 0.005]));
            let (frame, _) = render(&scene, &cam, &truth, AffineBrightness::default(), 1.0, 10 + k);
            let t_fr_true = truth.inverse();
            let noise = twist([
                rng.random_range(-0.01..0.01),
                rng.random_range(-0.01..0.01),
                rng.random_range(-0.01..0.01),
                rng.random_range(-0.003..0.003),
                rng.random_range(-0.003..0.003),
                rng.random_range(-0.003..0.003),
            ]);
            let guess = t_fr_true.left_perturbed(&noise);
            let t = track_frame(&frame, &local, &guess, AffineBrightness::default(), 0.0, &TrackerConfig::default()).unwrap();
            let err = (t.pose.translation - truth.translation).norm();
            assert!(err < 0.001 * SCALE, "frame {k}: {err}");
        }
    }

    #[test]
    fn recovers_global_brightness_gain() {
        let scene = Scene::room(5);
        let cam = default_camera(160, 120, 120.0);
        let local = ground_truth_local_map(&scene, &cam, &Se3::identity());
        let truth = Se3::exp(&twist([0.02, 0.0, 0.03, 0.0, 0.01, 0.0]));
        let (frame, _) = render(&scene, &cam, &truth, AffineBrightness::new(0.2, 0.0), 1.0, 3);
        let t = track_frame(&frame, &local, &truth.inverse(), AffineBrightness::default(), 0.0, &TrackerConfig::default()).unwrap();
        assert!((t.affine.a - 0.2).abs() < 0.01, "{:?}", t.affine);
        assert!((t.pose.translation - truth.translation).norm() < 0.001 * SCALE);
    }

    #[test]
    fn empty_local_map_is_an_error() {
        let scene = Scene::room(3);
        let cam = default_camera(160, 120, 120.0);
        let mut local = ground_truth_local_map(&scene, &cam, &Se3::identity());
        local.points.clear();
        let r = track_frame(&local.pyramid.clone(), &local, &Se3::identity(), AffineBrightness::default(), 0.0, &TrackerConfig::default());
        assert_eq!(r.unwrap_err(), TrackingError::NoPoints);
    }

    #[test]
    fn unrelated_image_is_lost() {
        let scene = Scene::room(3);
        let cam = default_camera(160, 120, 120.0);
        let local = ground_truth_local_map(&scene, &cam, &Se3::identity());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noise: Vec<f32> = (0..160 * 120).map(|_| rng.random_range(0.0..255.0)).collect();
        let flat = Pyramid::build(GrayImage::from_fn(160, 120, |x, y| noise[y * 160 + x]), cam, 4).unwrap();
        let r = track_frame(&flat, &local, &Se3::identity(), AffineBrightness::default(), 0.0, &TrackerConfig::default());
        assert!(matches!(r, Err(TrackingError::Lost { .. })), "{r:?}");
    }

    fn plane_local_map(rho: f64, n: usize) -> LocalMap {
        let cam = CameraModel::new(100.0, 100.0, 79.5, 59.5, 160, 120);
        let img = GrayImage::from_fn(160, 120, |x, y| ((x * 7 + y * 3) % 50) as f32);
        LocalMap {
            reference: 0,
            pyramid: Arc::new(Pyramid::build(img, cam, 1).unwrap()),
            pose: Se3::identity(),
            affine: AffineBrightness::default(),
            points: (0..n)
                .map(|i| TrackingPoint {
                    pixel: Vector2::new(40.0 + (i % 10) as f64 * 8.0, 30.0 + (i / 10) as f64 * 6.0),
                    rho,
                })
                .collect(),
        }
    }

    #[test]
    fn zero_motion_scores() {
        let local = plane_local_map(0.5, 50);
        let s = keyframe_scores(&local, &Se3::identity(), &AffineBrightness::default(), KeyframeWeights::default());
        assert_eq!(s.s_t, 0.0);
        assert_eq!(s.s_a, 0.0);
        assert!((s.s_u - 1.0).abs() < 1e-12);
        assert!(!s.needs_keyframe());
    }

    #[test]
    fn parallax_score_definition() {
        let local = plane_local_map(0.5, 50);
        let moved = Se3::from_translation(Vector3::new(0.6, 0.0, -0.8));
        let s = keyframe_scores(&local, &moved, &AffineBrightness::new(0.1, 3.0), KeyframeWeights::default());
        assert!((s.s_t - 0.5).abs() < 1e-12);
        assert!((s.s_a - 0.1).abs() < 1e-12);
        assert!(s.needs_keyframe());
    }

    #[test]
    fn visibility_score_bounded_and_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let local = plane_local_map(0.4, 60);
        for _ in 0..200 {
            let rel = Se3::exp(&twist([
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
            ]));
            let aff = AffineBrightness::new(rng.random_range(-0.5..0.5), 0.0);
            let a = keyframe_scores(&local, &rel, &aff, KeyframeWeights::default());
            let b = keyframe_scores(&local, &rel, &aff, KeyframeWeights::default());
            assert!(a.s_u <= 1.0 && a.s_u >= 0.0);
            assert!(a.s_t >= 0.0 && a.s_a >= 0.0);
            assert_eq!(a, b);
        }
    }

    struct PlaneViews {
        scene: Scene,
        cam: CameraModel,
        host: (Arc<Pyramid>, Se3, Vec<f64>),
    }

    fn plane_views() -> PlaneViews {
        let scene = Scene::plane(2.5, 3.0, 7);
        let cam = default_camera(160, 120, 120.0);
        let pose = Se3::identity();
        let (pyr, depth) = render(&scene, &cam, &pose, AffineBrightness::default(), 0.0, 0);
        PlaneViews {
            scene,
            cam,
            host: (pyr, pose, depth),
        }
    }

    fn view<'a>(pyr: &'a Pyramid, pose: &'a Se3) -> FrameView<'a> {
        FrameView {
            level: pyr.level(0),
            pose,
            affine: AffineBrightness::default(),
        }
    }

    #[test]
    fn pure_rotation_is_low_parallax() {
        let pv = plane_views();
        let rotated = Se3::exp(&twist([0.0, 0.0, 0.0, 0.0, 0.05, 0.0]));
        let (frame, _) = render(&pv.scene, &pv.cam, &rotated, AffineBrightness::default(), 0.0, 0);
        let mut c = CandidatePoint::new(Vector2::new(80.0, 60.0), 0.1, 2.0, 10.0);
        let before = c;
        let r = epipolar_search(&mut c, &view(&pv.host.0, &pv.host.1), &view(&frame, &rotated), &PatchPattern::SPREAD, &EpipolarConfig::default());
        assert_eq!(r.outcome, SearchOutcome::LowParallax);
        assert_eq!(c, before);
    }

    #[test]
    fn converges_on_textured_plane() {
        let pv = plane_views();
        let plane_selection = CandidateSelection {
            threshold_margin: 1.0,
            ..selection()
        };
        let cands = new_candidates(&pv.host.0, 200, &plane_selection, 0.05, 3.0);
        assert!(cands.len() > 50);
        let mut cands: Vec<CandidatePoint> = cands
            .into_iter()
            .filter(|c| pv.scene.is_interior(&pv.cam, &pv.host.1, &c.pixel, 3.0))
            .collect();
        let frames: Vec<(Arc<Pyramid>, Se3)> = (1..=5)
            .map(|k| {
                let pose = Se3::exp(&twist([0.08 * k as f64, 0.02 * k as f64, 0.0, 0.0, 0.0, 0.0]));
                (render(&pv.scene, &pv.cam, &pose, AffineBrightness::default(), 1.0, k).0, pose)
            })
            .collect();
        for c in cands.iter_mut() {
            for (pyr, pose) in &frames {
                let before = *c;
                epipolar_search(c, &view(&pv.host.0, &pv.host.1), &view(pyr, pose), &PatchPattern::SPREAD, &EpipolarConfig::default());
                assert!(c.rho_min >= before.rho_min && c.rho_max <= before.rho_max, "interval widened");
            }
        }
        // converged: passes the activation predicate after at least 3 matches
        let converged = ActivationConfig {
            min_observations: 3,
            ..ActivationConfig::default()
        };
        let mut errs: Vec<f64> = cands
            .iter()
            .filter(|c| converged.is_distinctive(c))
            .map(|c| {
                let z = pv.host.2[c.pixel.y as usize * 160 + c.pixel.x as usize];
                (c.rho * z - 1.0).abs()
            })
            .collect();
        assert!(errs.len() * 2 > cands.len(), "{} of {} converged", errs.len(), cands.len());
        errs.sort_by(f64::total_cmp);
        let median = errs[errs.len() / 2];
        let p90 = errs[errs.len() * 9 / 10];
        assert!(median < 0.01 && p90 < 0.01, "median {median} p90 {p90}");
    }

    #[test]
    fn best_sample_matches_exhaustive_search() {
        let pv = plane_views();
        let pose = Se3::exp(&twist([0.08, 0.02, 0.0, 0.0, 0.01, 0.0]));
        let (frame, _) = render(&pv.scene, &pv.cam, &pose, AffineBrightness::default(), 1.0, 3);
        let host = view(&pv.host.0, &pv.host.1);
        let target = view(&frame, &pose);
        let mut checked = 0;
        let plane_selection = CandidateSelection {
            threshold_margin: 1.0,
            ..selection()
        };
        for c in new_candidates(&pv.host.0, 60, &plane_selection, 0.1, 2.0) {
            let mut cand = c;
            let r = epipolar_search(&mut cand, &host, &target, &PatchPattern::SPREAD, &EpipolarConfig::default());
            let Some(best) = r.best_index else { continue };
            // exhaustive oracle: walk the same segment independently
            let seg = epipolar_segment(&host, &target, &c.pixel, c.rho_min, c.rho_max, 1.5).unwrap();
            let n = seg.length().ceil().max(1.0) as usize;
            let mut oracle = (usize::MAX, f64::INFINITY);
            for k in 0..=n {
                let rho = seg.rho_at(&seg.point_at(k as f64 / n as f64));
                let cost = if rho > 0.0 { epipolar_cost(&host, &target, &c.pixel, rho, &PatchPattern::SPREAD) } else { f64::INFINITY };
                if cost < oracle.1 {
                    oracle = (k, cost);
                }
            }
            assert_eq!(best, oracle.0);
            assert_eq!(r.best_cost, oracle.1);
            checked += 1;
        }
        assert!(checked > 20);
    }

    #[test]
    fn out_of_image_segment() {
        let pv = plane_views();
        // target looks away from the host's field of view
        let pose = Se3::exp(&twist([0.0, 0.0, 0.0, 0.0, 2.5, 0.0]));
        let (frame, _) = render(&Scene::room(1), &pv.cam, &Se3::identity(), AffineBrightness::default(), 0.0, 0);
        let mut c = CandidatePoint::new(Vector2::new(80.0, 60.0), 0.2, 2.0, 10.0);
        let r = epipolar_search(&mut c, &view(&pv.host.0, &pv.host.1), &view(&frame, &pose), &PatchPattern::SPREAD, &EpipolarConfig::default());
        assert_eq!(r.outcome, SearchOutcome::OutOfImage);
    }

    fn map_with_points(grid: usize) -> (Map, KeyframeId, KeyframeId) {
        let scene = Scene::room(2);
        let cam = default_camera(160, 120, 120.0);
        let mut map = Map::new();
        let (p0, d0) = render(&scene, &cam, &Se3::identity(), AffineBrightness::default(), 0.0, 0);
        let k0 = map.add_keyframe(0.0, p0, Se3::identity(), AffineBrightness::default());
        let pose1 = Se3::from_translation(Vector3::new(0.05, 0.0, 0.0));
        let (p1, _) = render(&scene, &cam, &pose1, AffineBrightness::default(), 0.0, 0);
        let k1 = map.add_keyframe(1.0, p1, pose1, AffineBrightness::default());
        for y in (10..110).step_by(grid) {
            for x in (10..150).step_by(grid) {
                map.add_point(k0, Vector2::new(x as f64, y as f64), 1.0 / d0[y * 160 + x], k0);
            }
        }
        (map, k0, k1)
    }

    fn distinctive(pixel: Vector2<f64>, rho: f64) -> CandidatePoint {
        CandidatePoint {
            pixel,
            rho_min: rho * 0.95,
            rho_max: rho * 1.05,
            rho,
            quality: 3.0,
            observations: 2,
            gradient: 20.0,
        }
    }

    #[test]
    fn fully_mapped_view_activates_nothing() {
        let (mut map, k0, k1) = map_with_points(4);
        let cands: Vec<CandidatePoint> = (0..40).map(|i| distinctive(Vector2::new(20.0 + 3.0 * i as f64, 60.0), 0.4)).collect();
        map.keyframe_mut(k0).candidates = cands;
        let mut dm = crate::lmcw::Lmcw::new(Default::default()).distance_map(&map, &[k0], k1);
        let act = activate_points(&mut map, &[k0], k1, &mut dm, &ActivationConfig::default());
        assert!(act.is_empty());
        assert_eq!(map.keyframe(k0).candidates.len(), 40);
    }

    #[test]
    fn activation_respects_predicates() {
        let (mut map, k0, k1) = map_with_points(30);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cands: Vec<CandidatePoint> = (0..300)
            .map(|_| {
                let mut c = distinctive(Vector2::new(rng.random_range(8.0..152.0), rng.random_range(8.0..112.0)), rng.random_range(0.2..0.8));
                c.quality = rng.random_range(1.0..2.0);
                c.observations = rng.random_range(0..3);
                let w = rng.random_range(0.0..0.6);
                c.rho_min = c.rho * (1.0 - w / 2.0);
                c.rho_max = c.rho * (1.0 + w / 2.0);
                c
            })
            .collect();
        map.keyframe_mut(k0).candidates = cands.clone();
        let lmcw = crate::lmcw::Lmcw::new(Default::default());
        let initial = lmcw.distance_map(&map, &[k0], k1);
        let mut dm = initial.clone();
        let config = ActivationConfig::default();
        let act = activate_points(&mut map, &[k0], k1, &mut dm, &config);
        assert!(!act.is_empty());
        let kf1 = map.keyframe(k1);
        for id in &act {
            let p = map.point(*id);
            let c = cands.iter().find(|c| c.pixel == p.pixel).unwrap();
            assert!(config.is_distinctive(c));
            let q = kf1.pose.inverse().transform(&map.world_point(p));
            let u = kf1.camera().project_unchecked(&q);
            assert!(initial.is_depleted(&u, config.radius));
            assert_eq!(p.created_at, k1);
        }
        assert_eq!(map.keyframe(k0).candidates.len() + act.len(), cands.len());
        let _ = DistanceMap::EMPTY;
    }

    fn bootstrap_sequence(motion: Vector3<f64>, frames: usize) -> Result<BootstrapResult, BootstrapError> {
        let scene = Scene::room(6);
        let cam = default_camera(160, 120, 120.0);
        let (p0, _) = render(&scene, &cam, &Se3::identity(), AffineBrightness::default(), 1.0, 0);
        let mut b = Bootstrapper::new(p0, 0.0, 400, &selection(), BootstrapConfig::default(), PbaConfig::default())?;
        for k in 1..=frames {
            let pose = Se3::from_translation(motion * k as f64);
            let (p, _) = render(&scene, &cam, &pose, AffineBrightness::default(), 1.0, k as u64);
            if let Some(r) = b.push(p, k as f64)? {
                return Ok(r);
            }
        }
        panic!("bootstrap neither finished nor failed");
    }

    #[test]
    fn static_camera_fails_bootstrap() {
        let r = bootstrap_sequence(Vector3::zeros(), 100);
        assert!(matches!(r, Err(BootstrapError::InsufficientParallax { frames: 40, .. })), "{r:?}");
    }

    #[test]
    fn bootstrap_normalizes_scale() {
        let r = bootstrap_sequence(Vector3::new(0.02, 0.0, 0.005), 40).unwrap();
        let rhos: Vec<f64> = r.points.iter().map(|p| p.1).collect();
        let mean = rhos.iter().sum::<f64>() / rhos.len() as f64;
        assert!((mean - 1.0).abs() < 1e-6, "{mean}");
        assert!(r.parallax >= BootstrapConfig::default().min_parallax);
        // direction of motion is recovered
        let dir = r.second.pose.translation.normalize();
        let truth = Vector3::new(0.02, 0.0, 0.005).normalize();
        assert!(dir.dot(&truth) > 0.99, "{dir:?}");
    }
}
