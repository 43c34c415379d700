//! The full pipeline: bootstrap, per-frame tracking, candidate tracing,
//! keyframe insertion with window selection, point activation and windowed
//! optimization. Tracking and mapping exchange messages; the sequential mode
//! interleaves them deterministically, the two-stream mode runs them on
//! separate threads.

use std::collections::VecDeque;
use std::sync::mpsc;
use std::sync::Arc;
use std::time::Instant;

use log::{debug, info, warn};
use nalgebra::Vector3;
use serde::Serialize;
use thiserror::Error;

use crate::config::Config;
use crate::frontend::{
    activate_points, epipolar_search, keyframe_decision, new_candidates, BootstrapError, BootstrapResult, Bootstrapper, LocalMap, SearchOutcome,
    TrackedFrame, Tracker, TrackingError,
};
use crate::geometry::{CameraModel, Se3};
use crate::image::{GrayImage, ImageError, PatchPattern, Pyramid};
use crate::lmcw::{Lmcw, Window};
use crate::map::Map;
use crate::pba::{self, Gauge, PbaProblem};
use crate::photometric::{AffineBrightness, FrameView, INTERIOR_MARGIN};
use crate::KeyframeId;

/// Coarsest pyramid level side length, pixels.
const MIN_LEVEL_SIZE: usize = 16;
/// Frames remembered by the tracker to rebase onto a delayed keyframe.
const HISTORY: usize = 64;

#[derive(Debug, Error)]
pub enum SystemError {
    #[error("bootstrap failed: {0}")]
    Bootstrap(#[from] BootstrapError),
    #[error("input ended after {frames} frames, before bootstrap completed")]
    InputEndedDuringBootstrap { frames: usize },
    #[error("tracking lost at frame {frame} (t = {timestamp:.6} s): {source}")]
    TrackingLost {
        frame: usize,
        timestamp: f64,
        source: TrackingError,
    },
    #[error("invalid image: {0}")]
    Image(#[from] ImageError),
    #[error("input error: {0}")]
    Input(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RunMode {
    #[default]
    Sequential,
    TwoStreams,
}

/// Pose of one input frame, stored relative to its reference keyframe so
/// that it follows later corrections of that keyframe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FrameRecord {
    pub timestamp: f64,
    pub reference: KeyframeId,
    /// Frame-from-reference.
    #[serde(skip)]
    pub relative: Se3,
    pub a: f64,
    pub b: f64,
    pub keyframe: bool,
    pub inlier_ratio: f64,
}

/// One mapping step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowRecord {
    pub keyframe: KeyframeId,
    pub timestamp: f64,
    pub temporal: Vec<KeyframeId>,
    pub covisible: Vec<KeyframeId>,
    pub fixed: Vec<KeyframeId>,
    pub dropped: Option<KeyframeId>,
    pub activated: usize,
    /// Observations created in the new keyframe.
    pub observations_added: usize,
    /// Of those, observations of points hosted by covisible keyframes.
    pub covisible_observations: usize,
    pub removed_points: usize,
    pub live_points: usize,
    pub new_candidates: usize,
    pub pba_iterations: usize,
    pub pba_initial_energy: f64,
    pub pba_final_energy: f64,
    pub pba_reverted: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StageTiming {
    pub count: usize,
    pub total_ms: f64,
    pub mean_ms: f64,
    pub max_ms: f64,
}

impl StageTiming {
    fn add(&mut self, ms: f64) {
        self.count += 1;
        self.total_ms += ms;
        self.max_ms = self.max_ms.max(ms);
        self.mean_ms = self.total_ms / self.count as f64;
    }
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunReport {
    pub frames: usize,
    pub bootstrap_frames: usize,
    pub keyframes: usize,
    pub live_points: usize,
    pub tracking_retries: usize,
    /// Mean number of frames between consecutive keyframes.
    pub keyframe_interval_frames: f64,
    pub tracking: StageTiming,
    pub local_pba: StageTiming,
    /// Whole mapping step per keyframe (window, activation, optimization).
    pub keyframe_mapping: StageTiming,
    pub candidate_tracing: StageTiming,
    pub global_pba_iterations: Option<usize>,
    pub windows: Vec<WindowRecord>,
}

/// Result of a completed run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub map: Map,
    pub frames: Vec<FrameRecord>,
    pub report: RunReport,
}

impl RunOutput {
    /// World-from-camera keyframe poses in creation order.
    pub fn keyframe_trajectory(&self) -> Vec<(f64, Se3)> {
        self.map.keyframes().map(|kf| (kf.timestamp, kf.pose)).collect()
    }

    /// World-from-camera poses of every input frame.
    pub fn frame_trajectory(&self) -> Vec<(f64, Se3)> {
        self.frames
            .iter()
            .map(|r| (r.timestamp, self.map.keyframe(r.reference).pose * r.relative.inverse()))
            .collect()
    }

    /// World positions of live points with their host keyframe.
    pub fn point_cloud(&self) -> Vec<(Vector3<f64>, KeyframeId)> {
        self.map.live_points().map(|p| (self.map.world_point(p), p.host)).collect()
    }
}

/// Snapshot sent from mapping to tracking after every keyframe.
#[derive(Debug, Clone)]
struct Snapshot {
    local: Arc<LocalMap>,
    /// Timestamp of the frame that became the reference keyframe.
    keyframe_timestamp: f64,
    /// Scale applied to the map since the previous snapshot.
    rescale: f64,
}

/// Message sent from tracking to mapping for every frame.
struct FrameMessage {
    index: usize,
    tracked: TrackedFrame,
    pyramid: Arc<Pyramid>,
    make_keyframe: bool,
}

fn build_pyramid(image: GrayImage, camera: &CameraModel, config: &Config) -> Result<Arc<Pyramid>, SystemError> {
    if image.width() != camera.width || image.height() != camera.height {
        return Err(SystemError::Input(format!(
            "image is {}x{}, calibration expects {}x{}",
            image.width(),
            image.height(),
            camera.width,
            camera.height
        )));
    }
    let levels = Pyramid::max_levels_for(camera.width, camera.height, config.pyramid_levels, MIN_LEVEL_SIZE);
    Ok(Arc::new(Pyramid::build(image, *camera, levels)?))
}

/// Tracking half: motion model and the latest snapshot.
struct FrontEnd {
    config: Config,
    snapshot: Snapshot,
    /// Recent frames: (timestamp, reference, frame-from-reference).
    history: VecDeque<(f64, KeyframeId, Se3)>,
    /// Last frame relative to the snapshot reference.
    last_relative: Se3,
    last_affine: AffineBrightness,
    /// Camera motion between the last two frames, newest-from-previous.
    velocity: Se3,
    /// A keyframe was requested and its snapshot has not arrived yet.
    pending_keyframe: bool,
    retries: usize,
    timing: StageTiming,
}

impl FrontEnd {
    fn new(config: Config, snapshot: Snapshot, velocity: Se3, affine: AffineBrightness) -> Self {
        let mut history = VecDeque::new();
        history.push_back((snapshot.keyframe_timestamp, snapshot.local.reference, Se3::identity()));
        FrontEnd {
            config,
            snapshot,
            history,
            last_relative: Se3::identity(),
            last_affine: affine,
            velocity,
            pending_keyframe: false,
            retries: 0,
            timing: StageTiming::default(),
        }
    }

    fn update_snapshot(&mut self, snapshot: Snapshot) {
        let s = snapshot.rescale;
        let scale = |p: &Se3| Se3::new(p.rotation, p.translation * s);
        self.velocity = scale(&self.velocity);
        self.last_relative = scale(&self.last_relative);
        for h in self.history.iter_mut() {
            h.2 = scale(&h.2);
        }
        // rebase the last frame onto the new reference through the frame it was created from
        let old_reference = self.snapshot.local.reference;
        let base = self
            .history
            .iter()
            .find(|h| h.0 == snapshot.keyframe_timestamp && h.1 == old_reference)
            .map(|h| h.2);
        self.last_relative = match base {
            Some(kf_from_old) => self.last_relative * kf_from_old.inverse(),
            None => Se3::identity(),
        };
        let new_reference = snapshot.local.reference;
        self.history.retain(|h| h.0 >= snapshot.keyframe_timestamp);
        for h in self.history.iter_mut() {
            if let Some(kf_from_old) = base {
                h.2 = h.2 * kf_from_old.inverse();
            }
            h.1 = new_reference;
        }
        if new_reference != old_reference {
            self.pending_keyframe = false;
        }
        self.snapshot = snapshot;
    }

    fn track(&mut self, index: usize, timestamp: f64, pyramid: Arc<Pyramid>) -> Result<FrameMessage, SystemError> {
        let start = Instant::now();
        let local = self.snapshot.local.clone();
        let guess = self.velocity * self.last_relative;
        let tracker = Tracker::new(&local, self.config.tracker());
        let tracked = match tracker.track(&pyramid, &guess, self.last_affine, timestamp) {
            Ok(t) => t,
            Err(first) => {
                warn!("frame {index}: {first}; retrying without motion prior");
                self.retries += 1;
                let mut retry = self.config.tracker();
                retry.levels = pyramid.n_levels();
                retry.max_iterations *= 2;
                Tracker::new(&local, retry)
                    .track(&pyramid, &self.last_relative, self.last_affine, timestamp)
                    .map_err(|source| SystemError::TrackingLost { frame: index, timestamp, source })?
            }
        };
        self.velocity = tracked.relative * self.last_relative.inverse();
        self.last_relative = tracked.relative;
        self.last_affine = tracked.affine;
        self.history.push_back((timestamp, local.reference, tracked.relative));
        while self.history.len() > HISTORY {
            self.history.pop_front();
        }
        let (wanted, scores) = keyframe_decision(&local, &tracked, self.config.keyframe_weights());
        let make_keyframe = wanted && !self.pending_keyframe;
        if make_keyframe {
            self.pending_keyframe = true;
            debug!(
                "frame {index}: keyframe (s_u {:.3}, s_t {:.3}, s_a {:.3})",
                scores.s_u, scores.s_t, scores.s_a
            );
        }
        self.timing.add(elapsed_ms(start));
        Ok(FrameMessage {
            index,
            tracked,
            pyramid,
            make_keyframe,
        })
    }
}

/// Mapping half: owns the map, the window and the frame records.
struct BackEnd {
    config: Config,
    map: Map,
    lmcw: Lmcw,
    records: Vec<FrameRecord>,
    report: RunReport,
    pattern: PatchPattern,
}

impl BackEnd {
    fn new(config: Config) -> Self {
        BackEnd {
            config,
            map: Map::new(),
            lmcw: Lmcw::new(config.lmcw()),
            records: Vec::new(),
            report: RunReport::default(),
            pattern: PatchPattern::SPREAD,
        }
    }

    /// Builds the initial two-keyframe map. Returns the first snapshot.
    fn initialize(&mut self, boot: BootstrapResult) -> Snapshot {
        let kf0 = self.map.add_keyframe(boot.first.timestamp, boot.first.pyramid.clone(), boot.first.pose, boot.first.affine);
        let kf1 = self.map.add_keyframe(boot.second.timestamp, boot.second.pyramid.clone(), boot.second.pose, boot.second.affine);
        for &(pixel, rho, kept) in &boot.points {
            if kept {
                let pid = self.map.add_point(kf0, pixel, rho, kf1);
                self.map.add_observation(pid, kf1);
            }
        }
        let record = |timestamp: f64, reference: KeyframeId, relative: Se3, affine: AffineBrightness, keyframe: bool| FrameRecord {
            timestamp,
            reference,
            relative,
            a: affine.a,
            b: affine.b,
            keyframe,
            inlier_ratio: 1.0,
        };
        self.records.push(record(boot.first.timestamp, kf0, Se3::identity(), boot.first.affine, true));
        for &(t, pose) in &boot.intermediate {
            self.records.push(record(t, kf0, pose.inverse(), boot.first.affine, false));
        }
        self.records.push(record(boot.second.timestamp, kf1, Se3::identity(), boot.second.affine, true));
        self.report.bootstrap_frames = self.records.len();
        self.lmcw.insert(&self.map, kf0);
        let rescale = self.mapping_step(kf1);
        Snapshot {
            local: Arc::new(self.local_map(kf1)),
            keyframe_timestamp: boot.second.timestamp,
            rescale,
        }
    }

    fn local_map(&self, reference: KeyframeId) -> LocalMap {
        let window = self.active_window(reference);
        LocalMap::from_map(&self.map, &window, reference)
    }

    fn active_window(&self, latest: KeyframeId) -> Vec<KeyframeId> {
        self.report
            .windows
            .last()
            .filter(|w| w.keyframe == latest)
            .map(|w| {
                let mut a: Vec<KeyframeId> = w.temporal.iter().chain(&w.covisible).copied().collect();
                a.sort_unstable();
                a
            })
            .unwrap_or_else(|| self.lmcw.temporal().to_vec())
    }

    /// Handles one tracked frame. Returns a snapshot when a keyframe was made.
    fn process(&mut self, msg: FrameMessage) -> Option<Snapshot> {
        let FrameMessage {
            index,
            tracked,
            pyramid,
            make_keyframe,
        } = msg;
        let pose = self.map.keyframe(tracked.reference).pose * tracked.relative.inverse();
        self.trace_candidates(&pyramid, &pose, tracked.affine);
        if !make_keyframe {
            self.records.push(FrameRecord {
                timestamp: tracked.timestamp,
                reference: tracked.reference,
                relative: tracked.relative,
                a: tracked.affine.a,
                b: tracked.affine.b,
                keyframe: false,
                inlier_ratio: tracked.inlier_ratio,
            });
            return None;
        }
        let kf = self.map.add_keyframe(tracked.timestamp, pyramid, pose, tracked.affine);
        self.records.push(FrameRecord {
            timestamp: tracked.timestamp,
            reference: kf,
            relative: Se3::identity(),
            a: tracked.affine.a,
            b: tracked.affine.b,
            keyframe: true,
            inlier_ratio: tracked.inlier_ratio,
        });
        debug!("frame {index} becomes keyframe {kf}");
        let rescale = self.mapping_step(kf);
        Some(Snapshot {
            local: Arc::new(self.local_map(kf)),
            keyframe_timestamp: tracked.timestamp,
            rescale,
        })
    }

    /// Epipolar search of the candidates of every temporal keyframe in the frame.
    fn trace_candidates(&mut self, pyramid: &Pyramid, pose: &Se3, affine: AffineBrightness) {
        let start = Instant::now();
        let epipolar = self.config.epipolar();
        let target = FrameView {
            level: pyramid.level(0),
            pose,
            affine,
        };
        let mut counts = [0usize; 5];
        for host_id in self.lmcw.temporal().to_vec() {
            let host_kf = self.map.keyframe(host_id);
            let (host_pyramid, host_pose, host_affine) = (host_kf.pyramid.clone(), host_kf.pose, host_kf.affine);
            let host = FrameView {
                level: host_pyramid.level(0),
                pose: &host_pose,
                affine: host_affine,
            };
            let mut candidates = std::mem::take(&mut self.map.keyframe_mut(host_id).candidates);
            for c in candidates.iter_mut() {
                let r = epipolar_search(c, &host, &target, &self.pattern, &epipolar);
                counts[match r.outcome {
                    SearchOutcome::Updated => 0,
                    SearchOutcome::LowParallax => 1,
                    SearchOutcome::OutOfImage => 2,
                    SearchOutcome::Ambiguous => 3,
                    SearchOutcome::NoMatch => 4,
                }] += 1;
            }
            self.map.keyframe_mut(host_id).candidates = candidates;
        }
        debug!("candidate tracing: updated {} low-parallax {} out {} ambiguous {} no-match {}", counts[0], counts[1], counts[2], counts[3], counts[4]);
        self.report.candidate_tracing.add(elapsed_ms(start));
    }

    /// Window selection, activation, observation bookkeeping and the
    /// windowed optimization for the new keyframe. Returns the scale applied
    /// to the map by the gauge.
    fn mapping_step(&mut self, latest: KeyframeId) -> f64 {
        let start = Instant::now();
        let window = self.lmcw.insert(&self.map, latest);
        if let Some(dropped) = window.dropped {
            self.map.keyframe_mut(dropped).candidates.clear();
        }
        let active = window.active();

        let hosts: Vec<KeyframeId> = window.temporal.iter().copied().filter(|&id| id != latest).collect();
        let mut distance = self.lmcw.distance_map(&self.map, &active, latest);
        let activated = activate_points(&mut self.map, &hosts, latest, &mut distance, &self.config.activation());

        let (observations_added, covisible_observations) = self.add_observations(&window);

        let pba_start = Instant::now();
        let mut problem = PbaProblem::from_map(&self.map, &active, &window.fixed, self.pattern);
        if let Gauge::Anchor { frame, .. } = problem.gauge {
            // hold the current scale instead of renormalizing it
            let mean = if problem.points.is_empty() {
                1.0
            } else {
                problem.points.iter().map(|p| p.rho).sum::<f64>() / problem.points.len() as f64
            };
            problem.gauge = Gauge::Anchor {
                frame,
                mean_inverse_depth: Some(mean),
            };
        }
        let mut rescale = 1.0;
        let (mut iterations, mut e0, mut e1, mut reverted) = (0, 0.0, 0.0, false);
        match pba::solve(&mut problem, &self.config.pba()) {
            Ok(report) => {
                problem.write_back(&mut self.map, &report);
                if let Some((_, s)) = report.rescale {
                    rescale = s;
                    for r in self.records.iter_mut() {
                        r.relative.translation *= s;
                    }
                }
                iterations = report.total_iterations();
                e0 = report.initial_energy;
                e1 = report.final_energy;
                reverted = report.reverted;
            }
            Err(e) => warn!("keyframe {latest}: window optimization skipped: {e}"),
        }
        self.report.local_pba.add(elapsed_ms(pba_start));

        let removed = self.map.enforce_maturity(latest);

        let kf = self.map.keyframe(latest);
        let mean_rho = LocalMap::from_map(&self.map, &active, latest).mean_inverse_depth();
        let mean_rho = if mean_rho > 0.0 { mean_rho } else { 1.0 };
        let candidates = new_candidates(
            &kf.pyramid,
            self.config.candidates_per_keyframe,
            &self.config.selection(),
            self.config.candidate_rho_min_factor * mean_rho,
            self.config.candidate_rho_max_factor * mean_rho,
        );
        let new_candidates = candidates.len();
        let timestamp = kf.timestamp;
        self.map.keyframe_mut(latest).candidates = candidates;

        let record = WindowRecord {
            keyframe: latest,
            timestamp,
            temporal: window.temporal.clone(),
            covisible: window.covisible.clone(),
            fixed: window.fixed.clone(),
            dropped: window.dropped,
            activated: activated.len(),
            observations_added,
            covisible_observations,
            removed_points: removed.len(),
            live_points: self.map.n_live_points(),
            new_candidates,
            pba_iterations: iterations,
            pba_initial_energy: e0,
            pba_final_energy: e1,
            pba_reverted: reverted,
        };
        info!(
            "keyframe {latest}: temporal {:?} covisible {:?} fixed {:?} activated {} obs +{} ({} covisible) removed {} live {} pba {} it",
            record.temporal,
            record.covisible,
            record.fixed,
            record.activated,
            record.observations_added,
            record.covisible_observations,
            record.removed_points,
            record.live_points,
            record.pba_iterations
        );
        self.report.windows.push(record);
        self.report.keyframe_mapping.add(elapsed_ms(start));
        rescale
    }

    /// Adds an observation for every live point of an active keyframe that
    /// projects inside another active keyframe. Returns the number added to
    /// the latest keyframe and, of those, the ones hosted by covisible keyframes.
    fn add_observations(&mut self, window: &Window) -> (usize, usize) {
        let active = window.active();
        let margin = INTERIOR_MARGIN + self.pattern.radius() as f64;
        let mut pending = Vec::new();
        for &h in &active {
            let host = self.map.keyframe(h);
            for &pid in &host.hosted {
                let p = self.map.point(pid);
                if !p.is_live() {
                    continue;
                }
                let w = self.map.world_point(p);
                for &t in &active {
                    if t == h || p.has_observation(t) || p.rejected.contains(&t) {
                        continue;
                    }
                    let target = self.map.keyframe(t);
                    let q = target.pose.inverse().transform(&w);
                    if q.z <= 0.0 {
                        continue;
                    }
                    if target.camera().contains(&target.camera().project_unchecked(&q), margin) {
                        pending.push((pid, h, t));
                    }
                }
            }
        }
        let (mut latest_added, mut covisible_added) = (0, 0);
        for (pid, h, t) in pending {
            if self.map.add_observation(pid, t) && t == window.latest {
                latest_added += 1;
                if window.covisible.contains(&h) {
                    covisible_added += 1;
                }
            }
        }
        (latest_added, covisible_added)
    }

    fn finish(mut self, front: &FrontEnd, frames: usize) -> RunOutput {
        if self.config.global_pba {
            match pba::global_pba(&mut self.map, &self.config.pba(), self.pattern) {
                Ok(r) => {
                    if let Some((_, s)) = r.rescale {
                        for rec in self.records.iter_mut() {
                            rec.relative.translation *= s;
                        }
                    }
                    self.report.global_pba_iterations = Some(r.total_iterations());
                }
                Err(e) => warn!("global optimization skipped: {e}"),
            }
        }
        self.report.frames = frames;
        self.report.keyframes = self.map.n_keyframes();
        self.report.live_points = self.map.n_live_points();
        self.report.tracking = front.timing;
        self.report.tracking_retries = front.retries;
        self.report.keyframe_interval_frames = if self.report.keyframes > 1 {
            (frames - 1) as f64 / (self.report.keyframes - 1) as f64
        } else {
            0.0
        };
        RunOutput {
            map: self.map,
            frames: self.records,
            report: self.report,
        }
    }
}

/// Feeds frames to the bootstrapper until it produces the initial map.
/// Returns the result and the number of frames consumed.
fn bootstrap<I>(frames: &mut I, camera: &CameraModel, config: &Config) -> Result<(BootstrapResult, usize), SystemError>
where
    I: Iterator<Item = Result<(f64, GrayImage), SystemError>>,
{
    let (t0, image) = frames.next().ok_or(SystemError::InputEndedDuringBootstrap { frames: 0 })??;
    let mut boot = Bootstrapper::new(
        build_pyramid(image, camera, config)?,
        t0,
        config.bootstrap_candidates,
        &config.selection(),
        config.bootstrap(),
        config.pba(),
    )?;
    let mut consumed = 1;
    loop {
        let (t, image) = frames.next().ok_or(SystemError::InputEndedDuringBootstrap { frames: consumed })??;
        consumed += 1;
        if let Some(result) = boot.push(build_pyramid(image, camera, config)?, t)? {
            info!("bootstrap done after {consumed} frames (parallax {:.4})", result.parallax);
            return Ok((result, consumed));
        }
    }
}

/// Velocity of the last bootstrap step, newest-from-previous.
fn bootstrap_velocity(boot: &BootstrapResult) -> Se3 {
    let previous = boot.intermediate.last().map_or(boot.first.pose, |&(_, p)| p);
    boot.second.pose.inverse() * previous
}

/// Runs the pipeline over `frames`, which must be timestamp-ordered images
/// matching `camera`.
pub fn run<I>(frames: I, camera: &CameraModel, config: &Config, mode: RunMode) -> Result<RunOutput, SystemError>
where
    I: Iterator<Item = Result<(f64, GrayImage), SystemError>> + Send,
{
    let mut frames = frames;
    let (boot, consumed) = bootstrap(&mut frames, camera, config)?;
    let velocity = bootstrap_velocity(&boot);
    let affine = boot.second.affine;
    let mut back = BackEnd::new(*config);
    let snapshot = back.initialize(boot);
    let mut front = FrontEnd::new(*config, snapshot, velocity, affine);
    match mode {
        RunMode::Sequential => {
            let mut index = consumed;
            for item in frames {
                let (t, image) = item?;
                let msg = front.track(index, t, build_pyramid(image, camera, config)?)?;
                if let Some(snapshot) = back.process(msg) {
                    front.update_snapshot(snapshot);
                }
                index += 1;
            }
            Ok(back.finish(&front, index))
        }
        RunMode::TwoStreams => run_two_streams(frames, camera, config, front, back, consumed),
    }
}

fn run_two_streams<I>(frames: I, camera: &CameraModel, config: &Config, front: FrontEnd, mut back: BackEnd, consumed: usize) -> Result<RunOutput, SystemError>
where
    I: Iterator<Item = Result<(f64, GrayImage), SystemError>> + Send,
{
    let (frame_tx, frame_rx) = mpsc::channel::<Result<FrameMessage, SystemError>>();
    let (snap_tx, snap_rx) = mpsc::channel::<Snapshot>();
    std::thread::scope(|scope| {
        let tracking = scope.spawn(move || {
            let mut front = front;
            let mut index = consumed;
            for item in frames {
                while let Ok(s) = snap_rx.try_recv() {
                    front.update_snapshot(s);
                }
                let msg = item.and_then(|(t, image)| build_pyramid(image, camera, config).and_then(|p| front.track(index, t, p)));
                let failed = msg.is_err();
                if frame_tx.send(msg).is_err() || failed {
                    break;
                }
                index += 1;
            }
            (front, index)
        });
        let mut failure = None;
        for msg in frame_rx {
            match msg {
                Ok(msg) => {
                    if let Some(snapshot) = back.process(msg) {
                        // tracking may have finished already; the snapshot is then unused
                        let _ = snap_tx.send(snapshot);
                    }
                }
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            }
        }
        let (front, frames_seen) = tracking.join().expect("tracking thread panicked");
        match failure {
            Some(e) => Err(e),
            None => Ok(back.finish(&front, frames_seen)),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate, SequenceConfig, TrajectoryKind};

    fn frames(seq: &crate::synthetic::Sequence) -> impl Iterator<Item = Result<(f64, GrayImage), SystemError>> + Send + '_ {
        seq.frames.iter().enumerate().map(|(i, f)| Ok((seq.timestamp(i), f.image.clone())))
    }

    #[test]
    fn static_camera_fails_bootstrap() {
        let seq = generate(&SequenceConfig {
            kind: TrajectoryKind::Line,
            frames: 12,
            trajectory: crate::synthetic::TrajectoryParams {
                extent: 0.0,
                ..Default::default()
            },
            ..Default::default()
        })
        .unwrap();
        let config = Config {
            bootstrap_max_frames: 8,
            ..Config::synthetic()
        };
        let err = run(frames(&seq), &seq.camera, &config, RunMode::Sequential).unwrap_err();
        assert!(matches!(err, SystemError::Bootstrap(BootstrapError::InsufficientParallax { .. })), "{err}");
        let short = run(frames(&seq).take(5), &seq.camera, &Config::synthetic(), RunMode::Sequential).unwrap_err();
        assert!(matches!(short, SystemError::InputEndedDuringBootstrap { frames: 5 }), "{short}");
    }

    #[test]
    fn mismatched_image_size_is_an_input_error() {
        let seq = generate(&SequenceConfig {
            frames: 3,
            ..Default::default()
        })
        .unwrap();
        let wrong = crate::synthetic::default_camera(80, 60, 60.0);
        let err = run(frames(&seq), &wrong, &Config::synthetic(), RunMode::Sequential).unwrap_err();
        assert!(matches!(err, SystemError::Input(_)), "{err}");
    }
}
