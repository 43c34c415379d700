//! Coarse-to-fine photometric bundle adjustment: IRLS Levenberg–Marquardt
//! over keyframe poses, affine brightness and inverse depths, with the point
//! block eliminated by the Schur complement.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SVector, Vector2, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Se3, Twist};
use crate::image::{scale_to_level, PatchPattern, Pyramid, PATCH_SIZE};
use crate::map::{Map, DISCARD_OUTLIER_PIXELS, REMOVE_OUTLIER_PIXELS};
use crate::photometric::{patch_residuals, AffineBrightness, FrameView, ResidualEval, DEFAULT_GRADIENT_C};
use crate::robust::{fit_keyframe_models, ErrorModel, ModelKind, ResidualSample};
use crate::{KeyframeId, PointId};

/// Parameters per keyframe block: twist (6), a, b.
pub const BLOCK: usize = 8;
pub type Vector8 = SVector<f64, BLOCK>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PbaError {
    #[error("problem has no optimizable keyframe")]
    NoActiveKeyframes,
    #[error("problem has no observations")]
    NoObservations,
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PbaConfig {
    pub n_levels: usize,
    pub max_iterations: usize,
    pub initial_damping: f64,
    pub damping_up: f64,
    pub damping_down: f64,
    /// Relative energy decrease below which an accepted step counts as small.
    pub convergence: f64,
    pub gradient_c: f64,
    pub model: ModelKind,
}

impl Default for PbaConfig {
    fn default() -> Self {
        PbaConfig {
            n_levels: 2,
            max_iterations: 50,
            initial_damping: 1e-4,
            damping_up: 10.0,
            damping_down: 0.5,
            convergence: 1e-5,
            gradient_c: DEFAULT_GRADIENT_C,
            model: ModelKind::Tdist,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PbaFrame {
    pub id: KeyframeId,
    pub pyramid: Arc<Pyramid>,
    pub pose: Se3,
    pub affine: AffineBrightness,
    pub fixed: bool,
}

/// Quadratic penalty weight · (ρ − mean)².
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverseDepthPrior {
    pub mean: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PbaPoint {
    pub id: PointId,
    /// Index into `PbaProblem::frames`.
    pub host: usize,
    pub pixel: Vector2<f64>,
    pub rho: f64,
    pub fixed: bool,
    pub prior: Option<InverseDepthPrior>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PbaObservation {
    pub point: usize,
    pub target: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Gauge {
    /// Fixed keyframes pin pose, brightness and scale.
    FixedKeyframes,
    /// No fixed keyframes: `frame` is held constant and afterwards the mean
    /// inverse depth of the free points is rescaled to the given value.
    Anchor { frame: usize, mean_inverse_depth: Option<f64> },
}

#[derive(Debug, Clone)]
pub struct PbaProblem {
    pub frames: Vec<PbaFrame>,
    pub points: Vec<PbaPoint>,
    pub observations: Vec<PbaObservation>,
    pub gauge: Gauge,
    pub pattern: PatchPattern,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LevelReport {
    pub level: usize,
    pub iterations: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub initial_energy: f64,
    pub final_energy: f64,
    pub discarded_observations: usize,
    /// Norm of every accepted increment, in order.
    pub update_norms: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PbaReport {
    /// Coarsest level first.
    pub levels: Vec<LevelReport>,
    /// Level-0 energy of the initial estimate under the level-0 models.
    pub initial_energy: f64,
    /// Level-0 energy of the returned estimate under the same models.
    pub final_energy: f64,
    /// The solve ended above the initial energy and was undone.
    pub reverted: bool,
    /// Scale applied about the anchor frame's center by the gauge step.
    pub rescale: Option<(KeyframeId, f64)>,
    /// Inlier masks at the final estimate, per (point, target).
    pub masks: Vec<(PointId, KeyframeId, u8)>,
    /// Observations to delete: too many outlier pixels at the final estimate.
    pub removed_observations: Vec<(PointId, KeyframeId)>,
    /// Points that had no information in some step.
    pub excluded_points: Vec<PointId>,
    pub models: BTreeMap<KeyframeId, ErrorModel>,
}

impl PbaReport {
    pub fn total_iterations(&self) -> usize {
        self.levels.iter().map(|l| l.iterations).sum()
    }
}

/// One linearized residual with its Jacobian split by parameter block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearizedResidual {
    pub observation: usize,
    pub residual: f64,
    /// Gradient weight times IRLS weight.
    pub weight: f64,
    pub host_block: Option<usize>,
    pub target_block: Option<usize>,
    pub j_host: Vector8,
    pub j_target: Vector8,
    /// Index of the optimized point, if its depth is free.
    pub point: Option<usize>,
    pub j_rho: f64,
}

#[derive(Debug, Clone)]
struct Layout {
    block_of_frame: Vec<Option<usize>>,
    frame_of_block: Vec<usize>,
    pinned: Vec<bool>,
}

impl Layout {
    fn new(problem: &PbaProblem) -> Self {
        let mut block_of_frame = vec![None; problem.frames.len()];
        let mut frame_of_block = Vec::new();
        for (i, f) in problem.frames.iter().enumerate() {
            if !f.fixed {
                block_of_frame[i] = Some(frame_of_block.len());
                frame_of_block.push(i);
            }
        }
        let mut pinned = vec![false; frame_of_block.len()];
        if let Gauge::Anchor { frame, .. } = problem.gauge {
            if let Some(b) = block_of_frame.get(frame).copied().flatten() {
                pinned[b] = true;
            }
        }
        Layout {
            block_of_frame,
            frame_of_block,
            pinned,
        }
    }

    fn n_blocks(&self) -> usize {
        self.frame_of_block.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct State {
    poses: Vec<Se3>,
    affines: Vec<AffineBrightness>,
    rhos: Vec<f64>,
}

impl State {
    fn of(problem: &PbaProblem) -> Self {
        State {
            poses: problem.frames.iter().map(|f| f.pose).collect(),
            affines: problem.frames.iter().map(|f| f.affine).collect(),
            rhos: problem.points.iter().map(|p| p.rho).collect(),
        }
    }

    fn apply(&self, inc: &Increment, layout: &Layout, problem: &PbaProblem) -> State {
        let mut next = self.clone();
        for (b, &f) in layout.frame_of_block.iter().enumerate() {
            if layout.pinned[b] {
                continue;
            }
            let d = inc.cameras.fixed_rows::<BLOCK>(BLOCK * b);
            let twist = Twist(Vector6::new(d[0], d[1], d[2], d[3], d[4], d[5]));
            next.poses[f] = self.poses[f].left_perturbed(&twist);
            next.affines[f].a += d[6];
            next.affines[f].b += d[7];
        }
        for (i, p) in problem.points.iter().enumerate() {
            if p.fixed {
                continue;
            }
            let candidate = self.rhos[i] + inc.points[i];
            // a step through zero is halved instead; the energy test decides
            next.rhos[i] = if candidate > 0.0 { candidate } else { 0.5 * self.rhos[i] };
        }
        next
    }
}

/// Camera and point increments of one LM step.
#[derive(Debug, Clone, PartialEq)]
pub struct Increment {
    pub cameras: DVector<f64>,
    pub points: Vec<f64>,
    /// Points whose depth had no information and were left unchanged.
    pub excluded: Vec<usize>,
}

impl Increment {
    pub fn norm(&self) -> f64 {
        (self.cameras.norm_squared() + self.points.iter().map(|x| x * x).sum::<f64>()).sqrt()
    }
}

/// Normal equations H δ = −b with the point block kept diagonal.
#[derive(Debug, Clone)]
pub struct NormalEquations {
    pub h_cc: DMatrix<f64>,
    pub b_c: DVector<f64>,
    pub h_pp: Vec<f64>,
    pub b_p: Vec<f64>,
    /// Per point: sparse camera coupling (block, 8-vector).
    pub h_cp: Vec<Vec<(usize, Vector8)>>,
    pub pinned: Vec<bool>,
}

impl NormalEquations {
    pub fn new(n_blocks: usize, n_points: usize, pinned: Vec<bool>) -> Self {
        NormalEquations {
            h_cc: DMatrix::zeros(BLOCK * n_blocks, BLOCK * n_blocks),
            b_c: DVector::zeros(BLOCK * n_blocks),
            h_pp: vec![0.0; n_points],
            b_p: vec![0.0; n_points],
            h_cp: vec![Vec::new(); n_points],
            pinned,
        }
    }

    pub fn n_blocks(&self) -> usize {
        self.pinned.len()
    }

    /// Dimension of the reduced camera system.
    pub fn reduced_dimension(&self) -> usize {
        BLOCK * self.n_blocks()
    }

    fn add_coupling(&mut self, point: usize, block: usize, v: Vector8) {
        let row = &mut self.h_cp[point];
        match row.iter_mut().find(|(b, _)| *b == block) {
            Some((_, acc)) => *acc += v,
            None => row.push((block, v)),
        }
    }

    pub fn add_residual(&mut self, r: &LinearizedResidual) {
        let w = r.weight;
        let blocks = [(r.host_block, r.j_host), (r.target_block, r.j_target)];
        for &(bi, ji) in &blocks {
            let Some(bi) = bi else { continue };
            let mut rows = self.b_c.fixed_rows_mut::<BLOCK>(BLOCK * bi);
            rows += ji * (w * r.residual);
            for &(bj, jj) in &blocks {
                let Some(bj) = bj else { continue };
                let mut view = self.h_cc.fixed_view_mut::<BLOCK, BLOCK>(BLOCK * bi, BLOCK * bj);
                view += ji * jj.transpose() * w;
            }
        }
        if let Some(p) = r.point {
            self.h_pp[p] += w * r.j_rho * r.j_rho;
            self.b_p[p] += w * r.j_rho * r.residual;
            for &(bi, ji) in &blocks {
                if let Some(bi) = bi {
                    self.add_coupling(p, bi, ji * (w * r.j_rho));
                }
            }
        }
    }

    pub fn add_prior(&mut self, point: usize, weight: f64, residual: f64) {
        self.h_pp[point] += weight;
        self.b_p[point] += weight * residual;
    }

    fn damped_camera_diagonal(&self, lambda: f64, i: usize) -> f64 {
        let d = self.h_cc[(i, i)];
        if d > 0.0 {
            d * (1.0 + lambda)
        } else {
            1.0
        }
    }

    /// Solves the damped system through the reduced camera system.
    /// Returns `None` when the reduced matrix is not positive definite.
    pub fn solve(&self, lambda: f64) -> Option<Increment> {
        let n = self.reduced_dimension();
        let mut s = self.h_cc.clone();
        let mut rhs = self.b_c.clone();
        for i in 0..n {
            s[(i, i)] = self.damped_camera_diagonal(lambda, i);
        }
        let mut excluded = Vec::new();
        let mut hpp_damped = vec![0.0; self.h_pp.len()];
        for (p, coupling) in self.h_cp.iter().enumerate() {
            let h = self.h_pp[p] * (1.0 + lambda);
            if h <= 0.0 {
                excluded.push(p);
                continue;
            }
            hpp_damped[p] = h;
            let inv = 1.0 / h;
            for &(bi, vi) in coupling {
                let mut r = rhs.fixed_rows_mut::<BLOCK>(BLOCK * bi);
                r -= vi * (self.b_p[p] * inv);
                for &(bj, vj) in coupling {
                    let mut view = s.fixed_view_mut::<BLOCK, BLOCK>(BLOCK * bi, BLOCK * bj);
                    view -= vi * vj.transpose() * inv;
                }
            }
        }
        self.pin(&mut s, &mut rhs);
        let cameras = -s.cholesky()?.solve(&rhs);
        let points = self
            .h_cp
            .iter()
            .enumerate()
            .map(|(p, coupling)| {
                if hpp_damped[p] <= 0.0 {
                    return 0.0;
                }
                let mut acc = self.b_p[p];
                for &(b, v) in coupling {
                    acc += v.dot(&cameras.fixed_rows::<BLOCK>(BLOCK * b));
                }
                -acc / hpp_damped[p]
            })
            .collect();
        Some(Increment {
            cameras,
            points,
            excluded,
        })
    }

    fn pin(&self, s: &mut DMatrix<f64>, rhs: &mut DVector<f64>) {
        let n = s.nrows();
        for (b, &pinned) in self.pinned.iter().enumerate() {
            if !pinned {
                continue;
            }
            for k in BLOCK * b..BLOCK * (b + 1) {
                for j in 0..n {
                    s[(k, j)] = 0.0;
                    s[(j, k)] = 0.0;
                }
                s[(k, k)] = 1.0;
                rhs[k] = 0.0;
            }
        }
    }

    /// The full damped system over cameras and points, with the same
    /// damping, pinning and point exclusion as [`NormalEquations::solve`].
    pub fn to_dense(&self, lambda: f64) -> (DMatrix<f64>, DVector<f64>) {
        let nc = self.reduced_dimension();
        let np = self.h_pp.len();
        let mut h = DMatrix::zeros(nc + np, nc + np);
        let mut b = DVector::zeros(nc + np);
        h.view_mut((0, 0), (nc, nc)).copy_from(&self.h_cc);
        b.rows_mut(0, nc).copy_from(&self.b_c);
        for i in 0..nc {
            h[(i, i)] = self.damped_camera_diagonal(lambda, i);
        }
        for p in 0..np {
            let k = nc + p;
            let d = self.h_pp[p] * (1.0 + lambda);
            if d <= 0.0 {
                h[(k, k)] = 1.0;
                continue;
            }
            h[(k, k)] = d;
            b[k] = self.b_p[p];
            for &(blk, v) in &self.h_cp[p] {
                for r in 0..BLOCK {
                    h[(BLOCK * blk + r, k)] = v[r];
                    h[(k, BLOCK * blk + r)] = v[r];
                }
            }
        }
        for (blk, &pinned) in self.pinned.iter().enumerate() {
            if !pinned {
                continue;
            }
            for k in BLOCK * blk..BLOCK * (blk + 1) {
                for j in 0..nc + np {
                    h[(k, j)] = 0.0;
                    h[(j, k)] = 0.0;
                }
                h[(k, k)] = 1.0;
                b[k] = 0.0;
            }
        }
        (h, b)
    }
}

/// Result of evaluating every observation at one level.
#[derive(Debug, Clone)]
struct ObservationResiduals {
    evals: Vec<[ResidualEval; PATCH_SIZE]>,
}

impl PbaProblem {
    pub fn validate(&self) -> Result<(), PbaError> {
        if self.frames.iter().all(|f| f.fixed) {
            return Err(PbaError::NoActiveKeyframes);
        }
        if self.observations.is_empty() {
            return Err(PbaError::NoObservations);
        }
        for (i, p) in self.points.iter().enumerate() {
            let Some(host) = self.frames.get(p.host) else {
                return Err(PbaError::InvalidProblem(format!("point {i} has no host")));
            };
            if host.fixed && !p.fixed {
                return Err(PbaError::InvalidProblem(format!("point {i} is free but hosted in a fixed keyframe")));
            }
            if !(p.rho > 0.0) {
                return Err(PbaError::InvalidProblem(format!("point {i} has nonpositive inverse depth")));
            }
        }
        for o in &self.observations {
            if o.point >= self.points.len() || o.target >= self.frames.len() {
                return Err(PbaError::InvalidProblem("observation index out of range".into()));
            }
            if self.points[o.point].host == o.target {
                return Err(PbaError::InvalidProblem("observation targets its own host".into()));
            }
        }
        if let Gauge::Anchor { frame, .. } = self.gauge {
            if frame >= self.frames.len() {
                return Err(PbaError::InvalidProblem("anchor frame out of range".into()));
            }
        }
        Ok(())
    }

    fn n_levels(&self, requested: usize) -> usize {
        self.frames
            .iter()
            .map(|f| f.pyramid.n_levels())
            .min()
            .unwrap_or(1)
            .min(requested.max(1))
    }

    fn view<'a>(&'a self, state: &'a State, frame: usize, level: usize) -> FrameView<'a> {
        FrameView {
            level: self.frames[frame].pyramid.level(level),
            pose: &state.poses[frame],
            affine: state.affines[frame],
        }
    }

    fn evaluate(&self, state: &State, level: usize, c: f64, with_jacobian: bool, skip: &[bool]) -> ObservationResiduals {
        let evals = self
            .observations
            .iter()
            .enumerate()
            .map(|(k, o)| {
                if skip.get(k).copied().unwrap_or(false) {
                    return [ResidualEval::default(); PATCH_SIZE];
                }
                let p = &self.points[o.point];
                let host = self.view(state, p.host, level);
                let target = self.view(state, o.target, level);
                let pixel = scale_to_level(&p.pixel, level);
                patch_residuals(&host, &target, &pixel, state.rhos[o.point], &self.pattern, c, with_jacobian)
            })
            .collect();
        ObservationResiduals { evals }
    }

    fn fit_models(&self, state: &State, level: usize, config: &PbaConfig) -> Vec<ErrorModel> {
        let res = self.evaluate(state, level, config.gradient_c, false, &[]);
        let mut samples = Vec::new();
        for (o, evals) in self.observations.iter().zip(&res.evals) {
            for e in evals.iter().filter(|e| e.valid) {
                samples.push(ResidualSample {
                    residual: e.residual,
                    keyframe: o.target,
                });
            }
        }
        let fitted = fit_keyframe_models(&samples, 0..self.frames.len(), config.model);
        (0..self.frames.len()).map(|i| fitted[&i]).collect()
    }

    fn masks(&self, res: &ObservationResiduals, models: &[ErrorModel]) -> Vec<u8> {
        self.observations
            .iter()
            .zip(&res.evals)
            .map(|(o, evals)| {
                let model = &models[o.target];
                evals.iter().enumerate().fold(0u8, |m, (k, e)| {
                    if e.valid && !model.is_outlier(e.residual) {
                        m | (1 << k)
                    } else {
                        m
                    }
                })
            })
            .collect()
    }

    fn energy(&self, state: &State, level: usize, models: &[ErrorModel], skip: &[bool], c: f64) -> f64 {
        let res = self.evaluate(state, level, c, false, skip);
        let mut e = 0.0;
        for (o, evals) in self.observations.iter().zip(&res.evals) {
            let model = &models[o.target];
            for r in evals.iter().filter(|r| r.valid) {
                e += r.gradient_weight * model.cost(r.residual);
            }
        }
        for (i, p) in self.points.iter().enumerate() {
            if let (Some(prior), false) = (p.prior, p.fixed) {
                let d = state.rhos[i] - prior.mean;
                e += prior.weight * d * d;
            }
        }
        e
    }

    fn linearize(&self, layout: &Layout, state: &State, level: usize, models: &[ErrorModel], skip: &[bool], c: f64) -> Vec<LinearizedResidual> {
        let res = self.evaluate(state, level, c, true, skip);
        let mut out = Vec::new();
        for (k, (o, evals)) in self.observations.iter().zip(&res.evals).enumerate() {
            let p = &self.points[o.point];
            let model = &models[o.target];
            let host_block = layout.block_of_frame[p.host];
            let target_block = layout.block_of_frame[o.target];
            for e in evals.iter().filter(|e| e.valid) {
                let j = &e.jacobian;
                let mut j_host = Vector8::zeros();
                j_host.fixed_rows_mut::<6>(0).copy_from(&j.host_pose);
                j_host[6] = j.affine[0];
                j_host[7] = j.affine[1];
                let mut j_target = Vector8::zeros();
                j_target.fixed_rows_mut::<6>(0).copy_from(&j.target_pose);
                j_target[6] = j.affine[2];
                j_target[7] = j.affine[3];
                out.push(LinearizedResidual {
                    observation: k,
                    residual: e.residual,
                    weight: e.gradient_weight * model.weight(e.residual),
                    host_block,
                    target_block,
                    j_host,
                    j_target,
                    point: (!p.fixed).then_some(o.point),
                    j_rho: j.inverse_depth,
                });
            }
        }
        out
    }

    fn normal_equations(&self, layout: &Layout, state: &State, residuals: &[LinearizedResidual]) -> NormalEquations {
        let mut ne = NormalEquations::new(layout.n_blocks(), self.points.len(), layout.pinned.clone());
        for r in residuals {
            ne.add_residual(r);
        }
        for (i, p) in self.points.iter().enumerate() {
            if let (Some(prior), false) = (p.prior, p.fixed) {
                ne.add_prior(i, prior.weight, state.rhos[i] - prior.mean);
            }
        }
        ne
    }

    fn write_state(&mut self, state: &State) {
        for (i, f) in self.frames.iter_mut().enumerate() {
            if !f.fixed {
                f.pose = state.poses[i];
                f.affine = state.affines[i];
            }
        }
        for (i, p) in self.points.iter_mut().enumerate() {
            if !p.fixed {
                p.rho = state.rhos[i];
            }
        }
    }

    /// Linearized residuals and normal equations at the current estimate
    /// with models fitted at `level`; exposed for verification.
    pub fn linear_system(&self, level: usize, config: &PbaConfig) -> (Vec<LinearizedResidual>, NormalEquations) {
        let layout = Layout::new(self);
        let state = State::of(self);
        let models = self.fit_models(&state, level, config);
        let residuals = self.linearize(&layout, &state, level, &models, &[], config.gradient_c);
        let ne = self.normal_equations(&layout, &state, &residuals);
        (residuals, ne)
    }

    /// Energy at `level` of the current estimate under models fitted at
    /// `reference`'s estimate, with no observation discarded.
    pub fn energy_under(&self, reference: &PbaProblem, level: usize, config: &PbaConfig) -> f64 {
        let models = reference.fit_models(&State::of(reference), level, config);
        self.energy(&State::of(self), level, &models, &[], config.gradient_c)
    }

    /// Index of the optimized block of every non-fixed frame, in order.
    pub fn active_frames(&self) -> Vec<usize> {
        (0..self.frames.len()).filter(|&i| !self.frames[i].fixed).collect()
    }
}

fn run_level(
    problem: &PbaProblem,
    layout: &Layout,
    state: &mut State,
    level: usize,
    models: &[ErrorModel],
    skip: &[bool],
    config: &PbaConfig,
    excluded_points: &mut BTreeSet<usize>,
) -> LevelReport {
    let c = config.gradient_c;
    let mut report = LevelReport {
        level,
        discarded_observations: skip.iter().filter(|&&s| s).count(),
        ..LevelReport::default()
    };
    let mut energy = problem.energy(state, level, models, skip, c);
    report.initial_energy = energy;
    let mut lambda = config.initial_damping;
    let mut small_steps = 0;
    while report.iterations < config.max_iterations {
        report.iterations += 1;
        let residuals = problem.linearize(layout, state, level, models, skip, c);
        let ne = problem.normal_equations(layout, state, &residuals);
        let Some(inc) = ne.solve(lambda) else {
            report.rejected += 1;
            lambda *= config.damping_up;
            if lambda > 1e12 {
                break;
            }
            continue;
        };
        excluded_points.extend(inc.excluded.iter().copied());
        let step = inc.norm();
        let candidate = state.apply(&inc, layout, problem);
        let candidate_energy = problem.energy(&candidate, level, models, skip, c);
        if candidate_energy <= energy {
            let decrease = if energy > 0.0 { (energy - candidate_energy) / energy } else { 0.0 };
            *state = candidate;
            energy = candidate_energy;
            report.accepted += 1;
            report.update_norms.push(step);
            lambda = (lambda * config.damping_down).max(1e-12);
            if decrease < config.convergence {
                small_steps += 1;
                if small_steps >= 2 {
                    break;
                }
            } else {
                small_steps = 0;
            }
            if step < 1e-10 {
                break;
            }
        } else {
            report.rejected += 1;
            lambda *= config.damping_up;
            if step < 1e-12 || lambda > 1e12 {
                break;
            }
        }
    }
    report.final_energy = energy;
    report
}

/// Runs the coarse-to-fine solve and writes the estimate back into `problem`.
pub fn solve(problem: &mut PbaProblem, config: &PbaConfig) -> Result<PbaReport, PbaError> {
    problem.validate()?;
    let layout = Layout::new(problem);
    let c = config.gradient_c;
    let initial = State::of(problem);
    let mut state = initial.clone();
    let mut report = PbaReport::default();
    let mut excluded_points = BTreeSet::new();
    let mut level0: Option<(Vec<ErrorModel>, Vec<bool>)> = None;
    for level in (0..problem.n_levels(config.n_levels)).rev() {
        let models = problem.fit_models(&state, level, config);
        let res = problem.evaluate(&state, level, c, false, &[]);
        let skip: Vec<bool> = problem
            .masks(&res, &models)
            .iter()
            .map(|m| PATCH_SIZE as u32 - m.count_ones() >= DISCARD_OUTLIER_PIXELS)
            .collect();
        let lr = run_level(problem, &layout, &mut state, level, &models, &skip, config, &mut excluded_points);
        report.levels.push(lr);
        if level == 0 {
            level0 = Some((models, skip));
        }
    }
    let (models0, skip0) = level0.expect("level 0 is always solved");
    report.initial_energy = problem.energy(&initial, 0, &models0, &skip0, c);
    report.final_energy = problem.energy(&state, 0, &models0, &skip0, c);
    if report.final_energy > report.initial_energy {
        state = initial;
        report.final_energy = report.initial_energy;
        report.reverted = true;
    }
    if let Gauge::Anchor {
        frame,
        mean_inverse_depth: Some(target_mean),
    } = problem.gauge
    {
        let free: Vec<f64> = problem
            .points
            .iter()
            .zip(&state.rhos)
            .filter(|(p, _)| !p.fixed)
            .map(|(_, &r)| r)
            .collect();
        if !free.is_empty() && target_mean > 0.0 {
            let mean = free.iter().sum::<f64>() / free.len() as f64;
            let scale = mean / target_mean;
            let center = state.poses[frame].translation;
            for (i, f) in problem.frames.iter().enumerate() {
                if !f.fixed {
                    state.poses[i].translation = center + (state.poses[i].translation - center) * scale;
                }
            }
            for (i, p) in problem.points.iter().enumerate() {
                if !p.fixed {
                    state.rhos[i] /= scale;
                }
            }
            report.rescale = Some((problem.frames[frame].id, scale));
        }
    }
    let final_models = problem.fit_models(&state, 0, config);
    let res = problem.evaluate(&state, 0, c, false, &[]);
    for (o, mask) in problem.observations.iter().zip(problem.masks(&res, &final_models)) {
        let pid = problem.points[o.point].id;
        let tid = problem.frames[o.target].id;
        report.masks.push((pid, tid, mask));
        if PATCH_SIZE as u32 - mask.count_ones() >= REMOVE_OUTLIER_PIXELS {
            report.removed_observations.push((pid, tid));
        }
    }
    report.models = problem
        .frames
        .iter()
        .zip(&final_models)
        .map(|(f, m)| (f.id, *m))
        .collect();
    report.excluded_points = excluded_points.into_iter().map(|i| problem.points[i].id).collect();
    problem.write_state(&state);
    Ok(report)
}

impl PbaProblem {
    /// Builds the window problem: `active` keyframes are optimized, `fixed`
    /// ones only constrain. Live points hosted in either set take part if
    /// they have an observation linking them to an active keyframe.
    pub fn from_map(map: &Map, active: &[KeyframeId], fixed: &[KeyframeId], pattern: PatchPattern) -> Self {
        let mut frames = Vec::new();
        let mut index: BTreeMap<KeyframeId, usize> = BTreeMap::new();
        for (&id, is_fixed) in active.iter().map(|id| (id, false)).chain(fixed.iter().map(|id| (id, true))) {
            if index.contains_key(&id) {
                continue;
            }
            let kf = map.keyframe(id);
            index.insert(id, frames.len());
            frames.push(PbaFrame {
                id,
                pyramid: kf.pyramid.clone(),
                pose: kf.pose,
                affine: kf.affine,
                fixed: is_fixed,
            });
        }
        let mut points = Vec::new();
        let mut observations = Vec::new();
        for kf_id in index.keys().copied().collect::<Vec<_>>() {
            let host_idx = index[&kf_id];
            let host_fixed = frames[host_idx].fixed;
            for &pid in &map.keyframe(kf_id).hosted {
                let p = map.point(pid);
                if !p.is_live() {
                    continue;
                }
                let obs: Vec<usize> = p
                    .observations
                    .iter()
                    .filter_map(|o| index.get(&o.target).copied())
                    .filter(|&t| !(host_fixed && frames[t].fixed))
                    .collect();
                if obs.is_empty() {
                    continue;
                }
                let pi = points.len();
                points.push(PbaPoint {
                    id: pid,
                    host: host_idx,
                    pixel: p.pixel,
                    rho: p.rho,
                    fixed: host_fixed,
                    prior: None,
                });
                observations.extend(obs.into_iter().map(|t| PbaObservation { point: pi, target: t }));
            }
        }
        let gauge = if frames.iter().any(|f| f.fixed) {
            Gauge::FixedKeyframes
        } else {
            let oldest = (0..frames.len()).min_by_key(|&i| frames[i].id).unwrap_or(0);
            Gauge::Anchor {
                frame: oldest,
                mean_inverse_depth: Some(1.0),
            }
        };
        PbaProblem {
            frames,
            points,
            observations,
            gauge,
            pattern,
        }
    }

    /// Copies the solution into `map`: keyframe states, depths, inlier
    /// masks, outlier removals and, for the anchor gauge, the rescaling of
    /// keyframes and points outside the problem.
    pub fn write_back(&self, map: &mut Map, report: &PbaReport) {
        let in_problem: BTreeSet<KeyframeId> = self.frames.iter().map(|f| f.id).collect();
        let points_in_problem: BTreeSet<PointId> = self.points.iter().map(|p| p.id).collect();
        if let Some((anchor, scale)) = report.rescale {
            let center = self.frames.iter().find(|f| f.id == anchor).map(|f| f.pose.translation);
            if let Some(center) = center {
                let outside: Vec<KeyframeId> = map.keyframe_ids().into_iter().filter(|id| !in_problem.contains(id)).collect();
                for id in outside {
                    let kf = map.keyframe_mut(id);
                    kf.pose.translation = center + (kf.pose.translation - center) * scale;
                    for c in kf.candidates.iter_mut() {
                        c.rho /= scale;
                        c.rho_min /= scale;
                        c.rho_max /= scale;
                    }
                }
                let others: Vec<PointId> = map.points().map(|p| p.id).filter(|id| !points_in_problem.contains(id)).collect();
                for id in others {
                    map.point_mut(id).rho /= scale;
                }
                for f in &self.frames {
                    if !f.fixed {
                        for c in map.keyframe_mut(f.id).candidates.iter_mut() {
                            c.rho /= scale;
                            c.rho_min /= scale;
                            c.rho_max /= scale;
                        }
                    }
                }
            }
        }
        for f in &self.frames {
            if !f.fixed {
                let kf = map.keyframe_mut(f.id);
                kf.pose = f.pose;
                kf.affine = f.affine;
            }
        }
        for p in &self.points {
            if !p.fixed {
                map.point_mut(p.id).rho = p.rho;
            }
        }
        for &(pid, tid, mask) in &report.masks {
            if let Some(o) = map.point_mut(pid).observations.iter_mut().find(|o| o.target == tid) {
                o.mask = mask;
                o.outlier = PATCH_SIZE as u32 - mask.count_ones() >= REMOVE_OUTLIER_PIXELS;
            }
        }
        for &(pid, tid) in &report.removed_observations {
            map.reject_observation(pid, tid);
        }
    }
}

/// Jointly refines every keyframe and point in the map, anchored at the
/// first keyframe with the mean inverse depth held at its current value.
pub fn global_pba(map: &mut Map, config: &PbaConfig, pattern: PatchPattern) -> Result<PbaReport, PbaError> {
    let ids = map.keyframe_ids();
    let mut problem = PbaProblem::from_map(map, &ids, &[], pattern);
    let free: Vec<f64> = problem.points.iter().map(|p| p.rho).collect();
    let mean = if free.is_empty() { 1.0 } else { free.iter().sum::<f64>() / free.len() as f64 };
    problem.gauge = Gauge::Anchor {
        frame: 0,
        mean_inverse_depth: Some(mean),
    };
    let report = solve(&mut problem, config)?;
    problem.write_back(map, &report);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CameraModel;
    use crate::image::GrayImage;
    use crate::synthetic::{default_camera, Scene};
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_system(seed: u64, n_blocks: usize, n_points: usize, pinned_first: bool) -> NormalEquations {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pinned = vec![false; n_blocks];
        pinned[0] = pinned_first;
        let mut ne = NormalEquations::new(n_blocks, n_points, pinned);
        for p in 0..n_points {
            for _ in 0..rng.random_range(6..20) {
                let host = rng.random_range(0..n_blocks);
                let target = (host + rng.random_range(1..n_blocks)) % n_blocks;
                let r = LinearizedResidual {
                    observation: 0,
                    residual: rng.random_range(-5.0..5.0),
                    weight: rng.random_range(0.1..2.0),
                    host_block: Some(host),
                    target_block: Some(target),
                    j_host: Vector8::from_fn(|_, _| rng.random_range(-3.0..3.0)),
                    j_target: Vector8::from_fn(|_, _| rng.random_range(-3.0..3.0)),
                    point: Some(p),
                    j_rho: rng.random_range(-10.0..10.0),
                };
                ne.add_residual(&r);
            }
        }
        ne
    }

    #[test]
    fn schur_solution_matches_dense_solve() {
        for seed in 0..10 {
            let ne = random_system(seed, 3, 20, seed % 2 == 0);
            assert_eq!(ne.reduced_dimension(), 24);
            for &lambda in &[0.0, 1e-4, 1.0] {
                let inc = ne.solve(lambda).unwrap();
                let (h, b) = ne.to_dense(lambda);
                let dense = -h.lu().solve(&b).unwrap();
                for i in 0..24 {
                    assert!((inc.cameras[i] - dense[i]).abs() < 1e-8 * (1.0 + dense[i].abs()));
                }
                for p in 0..20 {
                    assert!((inc.points[p] - dense[24 + p]).abs() < 1e-8 * (1.0 + dense[24 + p].abs()));
                }
            }
        }
    }

    #[test]
    fn point_without_information_is_excluded() {
        let mut ne = random_system(3, 2, 4, true);
        ne.h_pp.push(0.0);
        ne.b_p.push(0.0);
        ne.h_cp.push(Vec::new());
        let inc = ne.solve(1e-4).unwrap();
        assert_eq!(inc.excluded, vec![4]);
        assert_eq!(inc.points[4], 0.0);
    }

    #[test]
    fn large_damping_shrinks_step() {
        let ne = random_system(4, 3, 10, true);
        let small = ne.solve(1e-6).unwrap().norm();
        let big = ne.solve(1e8).unwrap().norm();
        assert!(big < 1e-6 * small.max(1.0));
    }

    #[test]
    fn single_quadratic_depth_takes_newton_step() {
        // r = j (ρ − ρ*) with one free depth: one undamped step is exact.
        let mut ne = NormalEquations::new(0, 1, vec![]);
        let (j, rho, rho_star, w) = (3.0, 0.7, 0.4, 2.0);
        ne.add_residual(&LinearizedResidual {
            observation: 0,
            residual: j * (rho - rho_star),
            weight: w,
            host_block: None,
            target_block: None,
            j_host: Vector8::zeros(),
            j_target: Vector8::zeros(),
            point: Some(0),
            j_rho: j,
        });
        let inc = ne.solve(0.0).unwrap();
        assert!((rho + inc.points[0] - rho_star).abs() < 1e-15);
    }

    /// Keyframes looking at a fronto-parallel plane, translated parallel to
    /// it, so images are affine in pixel coordinates and bilinear sampling is
    /// exact.
    fn affine_plane_problem() -> PbaProblem {
        // dyadic geometry keeps every stored intensity exact in f32
        let cam = CameraModel::new(32.0, 32.0, 31.5, 23.5, 64, 48);
        let depth = 2.0;
        let (alpha, beta, gamma) = (30.0, 9.0, 5.0);
        let frames: Vec<PbaFrame> = (0..3)
            .map(|i| {
                let t = Vector3::new(0.0625 * i as f64, 0.03125 * (i % 2) as f64, 0.0);
                // X = t.x + (x − cx) depth / fx on the plane; texture α + β X + γ Y
                let img = GrayImage::from_fn(64, 48, |x, y| {
                    let px = t.x + (x as f64 - cam.cx) * depth / cam.fx;
                    let py = t.y + (y as f64 - cam.cy) * depth / cam.fy;
                    (alpha + beta * px + gamma * py) as f32
                });
                PbaFrame {
                    id: i,
                    pyramid: Arc::new(Pyramid::build(img, cam, 2).unwrap()),
                    pose: Se3::from_translation(t),
                    affine: AffineBrightness::default(),
                    fixed: false,
                }
            })
            .collect();
        let mut points = Vec::new();
        let mut observations = Vec::new();
        for host in 0..3 {
            for k in 0..6 {
                let pixel = Vector2::new(16.0 + 5.0 * k as f64, 16.0 + 3.0 * host as f64);
                points.push(PbaPoint {
                    id: points.len(),
                    host,
                    pixel,
                    rho: 1.0 / depth,
                    fixed: false,
                    prior: None,
                });
                for t in 0..3 {
                    if t != host {
                        observations.push(PbaObservation {
                            point: points.len() - 1,
                            target: t,
                        });
                    }
                }
            }
        }
        PbaProblem {
            frames,
            points,
            observations,
            gauge: Gauge::Anchor {
                frame: 0,
                mean_inverse_depth: None,
            },
            pattern: PatchPattern::SPREAD,
        }
    }

    #[test]
    fn ground_truth_is_a_fixed_point() {
        let mut problem = affine_plane_problem();
        let before = problem.clone();
        let report = solve(&mut problem, &PbaConfig::default()).unwrap();
        let level0 = report.levels.last().unwrap();
        assert!(level0.iterations <= 2, "{level0:?}");
        assert!(level0.update_norms.iter().all(|&n| n < 1e-6), "{level0:?}");
        for (a, b) in problem.frames.iter().zip(&before.frames) {
            assert!((a.pose.translation - b.pose.translation).norm() < 1e-6);
        }
    }

    #[test]
    fn normal_equations_match_explicit_jacobian() {
        let mut problem = affine_plane_problem();
        // perturb so that residuals are nonzero
        problem.frames[1].pose = problem.frames[1].pose.left_perturbed(&Twist(Vector6::new(0.01, -0.005, 0.0, 0.0, 0.002, 0.0)));
        problem.frames[2].affine = AffineBrightness::new(0.05, 2.0);
        let config = PbaConfig::default();
        let (residuals, ne) = problem.linear_system(0, &config);
        let nb = ne.n_blocks();
        let np = problem.points.len();
        let dim = BLOCK * nb + np;
        let mut j = DMatrix::zeros(residuals.len(), dim);
        let mut w = DVector::zeros(residuals.len());
        let mut r = DVector::zeros(residuals.len());
        for (row, lr) in residuals.iter().enumerate() {
            if let Some(b) = lr.host_block {
                for k in 0..BLOCK {
                    j[(row, BLOCK * b + k)] += lr.j_host[k];
                }
            }
            if let Some(b) = lr.target_block {
                for k in 0..BLOCK {
                    j[(row, BLOCK * b + k)] += lr.j_target[k];
                }
            }
            if let Some(p) = lr.point {
                j[(row, BLOCK * nb + p)] = lr.j_rho;
            }
            w[row] = lr.weight;
            r[row] = lr.residual;
        }
        let jt_w = j.transpose() * DMatrix::from_diagonal(&w);
        let h = &jt_w * &j;
        let b = &jt_w * &r;
        let nc = BLOCK * nb;
        assert!((h.view((0, 0), (nc, nc)) - &ne.h_cc).amax() < 1e-8 * h.amax());
        assert!((b.rows(0, nc) - &ne.b_c).amax() < 1e-8 * b.amax().max(1.0));
        for p in 0..np {
            assert!((h[(nc + p, nc + p)] - ne.h_pp[p]).abs() < 1e-8 * h.amax());
            assert!((b[nc + p] - ne.b_p[p]).abs() < 1e-8 * b.amax().max(1.0));
            for col in 0..nc {
                let sparse = ne.h_cp[p]
                    .iter()
                    .find(|(blk, _)| *blk == col / BLOCK)
                    .map_or(0.0, |(_, v)| v[col % BLOCK]);
                assert!((h[(col, nc + p)] - sparse).abs() < 1e-8 * h.amax());
            }
        }
        // residuals themselves come from the photometric module
        let lr = residuals[0];
        let o = problem.observations[lr.observation];
        let p = &problem.points[o.point];
        let host = FrameView {
            level: problem.frames[p.host].pyramid.level(0),
            pose: &problem.frames[p.host].pose,
            affine: problem.frames[p.host].affine,
        };
        let target = FrameView {
            level: problem.frames[o.target].pyramid.level(0),
            pose: &problem.frames[o.target].pose,
            affine: problem.frames[o.target].affine,
        };
        let direct = patch_residuals(&host, &target, &p.pixel, p.rho, &problem.pattern, config.gradient_c, true);
        assert_eq!(direct.iter().find(|e| e.valid).unwrap().residual, lr.residual);
    }

    /// Five keyframes in the textured room with points at true depth.
    pub(crate) fn room_problem(seed: u64) -> (PbaProblem, Vec<Se3>, Vec<f64>) {
        let scene = Scene::room(seed);
        let cam = default_camera(160, 120, 120.0);
        let poses: Vec<Se3> = (0..5)
            .map(|i| {
                let s = i as f64 / 4.0;
                Se3::exp(&Twist(Vector6::new(0.5 * s, 0.05 * (3.0 * s).sin(), 0.25 * s, 0.0, 0.1 * s, 0.01 * s)))
            })
            .collect();
        let affines: Vec<AffineBrightness> = (0..5).map(|i| AffineBrightness::new(0.03 * i as f64, -2.0 * i as f64)).collect();
        let mut frames = Vec::new();
        let mut depths = Vec::new();
        for i in 0..5 {
            let r = scene.render(&cam, &poses[i], affines[i], 0.0, 0, 3).unwrap();
            depths.push(r.depth.clone());
            frames.push(PbaFrame {
                id: i,
                pyramid: Arc::new(Pyramid::build(r.image, cam, 2).unwrap()),
                pose: poses[i],
                affine: affines[i],
                fixed: false,
            });
        }
        let mut points = Vec::new();
        let mut observations = Vec::new();
        let mut rhos = Vec::new();
        for host in 0..5 {
            let cands = crate::image::select_candidates(
                frames[host].pyramid.image(),
                300,
                &crate::image::CandidateSelection {
                    block_size: 8,
                    threshold_margin: 2.0,
                    ..Default::default()
                },
            );
            for c in cands {
                let pixel = Vector2::new(c.x as f64, c.y as f64);
                if !scene.is_interior(&cam, &poses[host], &pixel, 3.0) {
                    continue;
                }
                let z = depths[host][c.y * 160 + c.x];
                let pi = points.len();
                points.push(PbaPoint {
                    id: pi,
                    host,
                    pixel,
                    rho: 1.0 / z,
                    fixed: false,
                    prior: None,
                });
                rhos.push(1.0 / z);
                for t in 0..5 {
                    if t != host {
                        observations.push(PbaObservation { point: pi, target: t });
                    }
                }
            }
        }
        let problem = PbaProblem {
            frames,
            points,
            observations,
            gauge: Gauge::Anchor {
                frame: 0,
                mean_inverse_depth: None,
            },
            pattern: PatchPattern::SPREAD,
        };
        (problem, poses, rhos)
    }

    #[test]
    fn recovers_perturbed_room_problem() {
        let (mut problem, poses, rhos) = room_problem(5);
        let scale = 3.0;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for f in problem.frames.iter_mut().skip(1) {
            let dir = Vector6::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize();
            let mut d = dir * 0.005 * scale;
            for k in 3..6 {
                d[k] /= scale;
            }
            f.pose = f.pose.left_perturbed(&Twist(d));
        }
        let initial_mean = problem.points.iter().map(|p| p.rho).sum::<f64>() / problem.points.len() as f64;
        problem.gauge = Gauge::Anchor {
            frame: 0,
            mean_inverse_depth: Some(initial_mean),
        };
        let report = solve(&mut problem, &PbaConfig::default()).unwrap();
        assert!(!report.reverted);
        assert!(report.final_energy < report.initial_energy);
        // compare relative poses after resolving the residual scale ambiguity
        let s = {
            let gt: f64 = (1..5).map(|i| (poses[i].translation - poses[0].translation).norm()).sum();
            let est: f64 = (1..5)
                .map(|i| (problem.frames[i].pose.translation - problem.frames[0].pose.translation).norm())
                .sum();
            gt / est
        };
        for i in 1..5 {
            let est = problem.frames[i].pose.translation - problem.frames[0].pose.translation;
            let gt = poses[i].translation - poses[0].translation;
            let err = (est * s - gt).norm();
            assert!(err < 0.0005 * scale, "frame {i}: {err}");
        }
        let sq: f64 = problem
            .points
            .iter()
            .zip(&rhos)
            .map(|(p, gt)| ((p.rho / s) / gt - 1.0).powi(2))
            .sum();
        let rms = (sq / rhos.len() as f64).sqrt();
        assert!(rms < 0.01, "rms relative inverse-depth error {rms}");
    }

    #[test]
    fn fixed_frames_are_untouched() {
        let (mut problem, _, _) = room_problem(7);
        problem.frames[0].fixed = true;
        problem.frames[1].fixed = true;
        for p in problem.points.iter_mut() {
            if p.host <= 1 {
                p.fixed = true;
            }
        }
        problem.gauge = Gauge::FixedKeyframes;
        problem.frames[3].pose = problem.frames[3].pose.left_perturbed(&Twist(Vector6::new(0.01, 0.0, -0.01, 0.0, 0.003, 0.0)));
        let before: Vec<(Se3, AffineBrightness)> = problem.frames.iter().map(|f| (f.pose, f.affine)).collect();
        let fixed_rhos: Vec<f64> = problem.points.iter().filter(|p| p.fixed).map(|p| p.rho).collect();
        let report = solve(&mut problem, &PbaConfig::default()).unwrap();
        for i in 0..2 {
            assert_eq!(problem.frames[i].pose, before[i].0);
            assert_eq!(problem.frames[i].affine, before[i].1);
        }
        let after: Vec<f64> = problem.points.iter().filter(|p| p.fixed).map(|p| p.rho).collect();
        assert_eq!(fixed_rhos, after);
        for l in &report.levels {
            assert!(l.final_energy <= l.initial_energy);
        }
    }

    #[test]
    fn residuals_are_gauge_invariant() {
        let (problem, _, _) = room_problem(8);
        let g = Se3::exp(&Twist(Vector6::new(0.3, -0.2, 0.5, 0.1, -0.2, 0.3)));
        let mut moved = problem.clone();
        for f in moved.frames.iter_mut() {
            f.pose = g * f.pose;
        }
        let config = PbaConfig::default();
        let a = problem.energy_under(&problem, 0, &config);
        let b = moved.energy_under(&moved, 0, &config);
        assert!((a - b).abs() <= 1e-10 * a.max(1.0));
        let sa = State::of(&problem);
        let sb = State::of(&moved);
        let ra = problem.evaluate(&sa, 0, 50.0, false, &[]);
        let rb = moved.evaluate(&sb, 0, 50.0, false, &[]);
        for (x, y) in ra.evals.iter().flatten().zip(rb.evals.iter().flatten()) {
            assert_eq!(x.valid, y.valid);
            if x.valid {
                assert!((x.residual - y.residual).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn solve_is_deterministic() {
        let (mut a, _, _) = room_problem(9);
        a.frames[2].pose = a.frames[2].pose.left_perturbed(&Twist(Vector6::new(0.01, 0.01, 0.0, 0.0, 0.0, 0.002)));
        let mut b = a.clone();
        let ra = solve(&mut a, &PbaConfig::default()).unwrap();
        let rb = solve(&mut b, &PbaConfig::default()).unwrap();
        assert_eq!(ra, rb);
        for (x, y) in a.frames.iter().zip(&b.frames) {
            assert_eq!(x.pose, y.pose);
        }
    }

    #[test]
    fn validation_errors() {
        let mut p = affine_plane_problem();
        for f in p.frames.iter_mut() {
            f.fixed = true;
        }
        assert_eq!(p.validate(), Err(PbaError::NoActiveKeyframes));
        let mut p = affine_plane_problem();
        p.observations.clear();
        assert_eq!(p.validate(), Err(PbaError::NoObservations));
    }
}
