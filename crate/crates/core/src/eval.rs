//! Trajectory alignment and accuracy metrics: Sim(3) alignment of associated
//! positions, RMS absolute trajectory error and point-to-surface error.

use nalgebra::{Matrix3, Vector3};
use serde::Serialize;
use thiserror::Error;

use crate::geometry::{Se3, Sim3};

/// Maximum timestamp difference for associating two poses, seconds.
pub const ASSOCIATION_WINDOW: f64 = 0.02;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("timestamps are not strictly increasing at entry {0}")]
    NonMonotonic(usize),
    #[error("only {0} associated poses, at least 3 are needed")]
    TooFewAssociations(usize),
    #[error("associated positions are collinear")]
    Collinear,
    #[error("no associated poses")]
    NoAssociations,
    #[error("point set is empty")]
    EmptyPoints,
    #[error("reference surface is empty")]
    EmptySurface,
}

/// Timestamped world-from-camera poses.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    entries: Vec<(f64, Se3)>,
}

impl Trajectory {
    pub fn new(entries: Vec<(f64, Se3)>) -> Result<Self, EvalError> {
        if let Some(i) = entries.windows(2).position(|w| w[1].0 <= w[0].0) {
            return Err(EvalError::NonMonotonic(i + 1));
        }
        Ok(Trajectory { entries })
    }

    pub fn entries(&self) -> &[(f64, Se3)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Applies a similarity to every pose.
    pub fn transformed(&self, s: &Sim3) -> Trajectory {
        Trajectory {
            entries: self.entries.iter().map(|(t, p)| (*t, s.apply_pose(p))).collect(),
        }
    }
}

/// Pairs (estimated index, ground-truth index) whose timestamps are nearest
/// neighbours within `window` seconds.
pub fn associate(estimated: &Trajectory, ground_truth: &Trajectory, window: f64) -> Vec<(usize, usize)> {
    let gt = ground_truth.entries();
    let mut pairs = Vec::new();
    for (i, (t, _)) in estimated.entries().iter().enumerate() {
        let k = gt.partition_point(|(g, _)| g < t);
        let nearest = [k.checked_sub(1), (k < gt.len()).then_some(k)]
            .into_iter()
            .flatten()
            .min_by(|&a, &b| (gt[a].0 - t).abs().total_cmp(&(gt[b].0 - t).abs()));
        if let Some(j) = nearest {
            if (gt[j].0 - t).abs() <= window {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

fn associated_positions(estimated: &Trajectory, ground_truth: &Trajectory) -> Vec<(Vector3<f64>, Vector3<f64>)> {
    associate(estimated, ground_truth, ASSOCIATION_WINDOW)
        .into_iter()
        .map(|(i, j)| (estimated.entries()[i].1.translation, ground_truth.entries()[j].1.translation))
        .collect()
}

/// Closed-form least-squares similarity mapping `source` onto `target`
/// (Umeyama).
pub fn umeyama(source: &[Vector3<f64>], target: &[Vector3<f64>]) -> Result<Sim3, EvalError> {
    let n = source.len();
    if n < 3 {
        return Err(EvalError::TooFewAssociations(n));
    }
    let nf = n as f64;
    let mu_s = source.iter().sum::<Vector3<f64>>() / nf;
    let mu_t = target.iter().sum::<Vector3<f64>>() / nf;
    let mut cov = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, t) in source.iter().zip(target) {
        let ds = s - mu_s;
        cov += (t - mu_t) * ds.transpose();
        spread += ds * ds.transpose();
        var_s += ds.norm_squared();
    }
    cov /= nf;
    var_s /= nf;
    let sv = spread.symmetric_eigenvalues();
    let hi = sv.max();
    if hi <= 0.0 || sv.iter().filter(|&&v| v > 1e-12 * hi).count() < 2 {
        return Err(EvalError::Collinear);
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut d = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rotation = u * d * v_t;
    let trace: f64 = (0..3).map(|i| svd.singular_values[i] * d[(i, i)]).sum();
    let scale = trace / var_s;
    if scale <= 0.0 || !scale.is_finite() {
        return Err(EvalError::Collinear);
    }
    let translation = mu_t - rotation * mu_s * scale;
    Ok(Sim3::new(scale, rotation, translation))
}

/// Similarity aligning the estimated positions to the associated
/// ground-truth positions.
pub fn align_sim3(estimated: &Trajectory, ground_truth: &Trajectory) -> Result<Sim3, EvalError> {
    let pairs = associated_positions(estimated, ground_truth);
    let (src, dst): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    umeyama(&src, &dst)
}

/// Translational errors of the associated poses after `alignment`.
pub fn translational_errors(estimated: &Trajectory, ground_truth: &Trajectory, alignment: &Sim3) -> Result<Vec<f64>, EvalError> {
    let pairs = associated_positions(estimated, ground_truth);
    if pairs.is_empty() {
        return Err(EvalError::NoAssociations);
    }
    Ok(pairs.iter().map(|(e, g)| (alignment.apply(e) - g).norm()).collect())
}

pub fn rms_ate(estimated: &Trajectory, ground_truth: &Trajectory, alignment: &Sim3) -> Result<f64, EvalError> {
    let errors = translational_errors(estimated, ground_truth, alignment)?;
    Ok(rms(&errors))
}

fn rms(values: &[f64]) -> f64 {
    (values.iter().map(|e| e * e).sum::<f64>() / values.len() as f64).sqrt()
}

/// Nearest-rank percentile of sorted values, `q` in (0, 100].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = ((q / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Uniform grid over a point cloud for nearest-neighbour queries.
#[derive(Debug, Clone)]
pub struct GridIndex {
    points: Vec<Vector3<f64>>,
    origin: Vector3<f64>,
    cell: f64,
    dims: [usize; 3],
    /// Start offsets into `order` per cell (CSR layout).
    starts: Vec<usize>,
    order: Vec<usize>,
}

impl GridIndex {
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self, EvalError> {
        if points.is_empty() {
            return Err(EvalError::EmptySurface);
        }
        let mut lo = points[0];
        let mut hi = points[0];
        for p in &points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let extent = hi - lo;
        let volume_side = extent.iter().map(|e| e.max(1e-9)).product::<f64>().cbrt();
        // about two points per cell on average for volumetric clouds; surfaces get more
        let cell = (volume_side / (points.len() as f64 / 2.0).cbrt()).max(extent.max() / 256.0).max(1e-9);
        let dims = [0, 1, 2].map(|i| (extent[i] / cell).floor() as usize + 1);
        let mut index = GridIndex {
            points,
            origin: lo,
            cell,
            dims,
            starts: Vec::new(),
            order: Vec::new(),
        };
        let n_cells = dims[0] * dims[1] * dims[2];
        let mut counts = vec![0usize; n_cells + 1];
        let cells: Vec<usize> = index.points.iter().map(|p| index.flat(index.cell_of(p))).collect();
        for &c in &cells {
            counts[c + 1] += 1;
        }
        for i in 0..n_cells {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut order = vec![0; cells.len()];
        for (i, &c) in cells.iter().enumerate() {
            order[fill[c]] = i;
            fill[c] += 1;
        }
        index.starts = counts;
        index.order = order;
        Ok(index)
    }

    fn cell_of(&self, p: &Vector3<f64>) -> [usize; 3] {
        [0, 1, 2].map(|i| (((p[i] - self.origin[i]) / self.cell).floor().max(0.0) as usize).min(self.dims[i] - 1))
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]
    }

    /// Distance from `q` to the nearest indexed point.
    pub fn nearest_distance(&self, q: &Vector3<f64>) -> f64 {
        let center = self.cell_of(q);
        let mut best = f64::INFINITY;
        let max_ring = *self.dims.iter().max().expect("three dims");
        for ring in 0..=max_ring {
            let lo = center.map(|c| c as i64 - ring as i64);
            let hi = center.map(|c| c as i64 + ring as i64);
            for z in lo[2].max(0)..=hi[2].min(self.dims[2] as i64 - 1) {
                for y in lo[1].max(0)..=hi[1].min(self.dims[1] as i64 - 1) {
                    for x in lo[0].max(0)..=hi[0].min(self.dims[0] as i64 - 1) {
                        let on_shell = [x, y, z].iter().zip(lo.iter().zip(&hi)).any(|(v, (l, h))| v == l || v == h);
                        if !on_shell {
                            continue;
                        }
                        let c = self.flat([x as usize, y as usize, z as usize]);
                        for &i in &self.order[self.starts[c]..self.starts[c + 1]] {
                            best = best.min((self.points[i] - q).norm());
                        }
                    }
                }
            }
            // every point outside the searched cube is at least this far
            if best <= self.ring_clearance(q, center, ring) {
                break;
            }
        }
        best
    }

    /// Lower bound on the distance from `q` to any point in cells outside
    /// the cube of half-width `ring` around `center`.
    fn ring_clearance(&self, q: &Vector3<f64>, center: [usize; 3], ring: usize) -> f64 {
        let mut clearance = f64::INFINITY;
        for i in 0..3 {
            let lo_cell = center[i] as i64 - ring as i64;
            let hi_cell = center[i] as i64 + ring as i64 + 1;
            if lo_cell > 0 {
                clearance = clearance.min(q[i] - (self.origin[i] + lo_cell as f64 * self.cell));
            }
            if hi_cell < self.dims[i] as i64 {
                clearance = clearance.min(self.origin[i] + hi_cell as f64 * self.cell - q[i]);
            }
        }
        clearance.max(0.0)
    }
}

/// Point-to-surface distances with their 50/90/95 percentiles.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PseReport {
    pub distances: Vec<f64>,
    pub p50: f64,
    pub p90: f64,
    pub p95: f64,
}

/// Distances of the aligned map points to the nearest reference surface sample.
pub fn pse(points: &[Vector3<f64>], surface: &GridIndex, alignment: &Sim3) -> Result<PseReport, EvalError> {
    if points.is_empty() {
        return Err(EvalError::EmptyPoints);
    }
    let distances: Vec<f64> = points.iter().map(|p| surface.nearest_distance(&alignment.apply(p))).collect();
    let mut sorted = distances.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(PseReport {
        p50: percentile(&sorted, 50.0),
        p90: percentile(&sorted, 90.0),
        p95: percentile(&sorted, 95.0),
        distances,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub rms_ate: f64,
    pub errors: Vec<f64>,
    pub associated: usize,
    pub scale: f64,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub pse: Option<PseReport>,
}

/// Aligns, then computes ATE and, when both are given, PSE.
pub fn evaluate(
    estimated: &Trajectory,
    ground_truth: &Trajectory,
    points: Option<&[Vector3<f64>]>,
    surface: Option<&GridIndex>,
) -> Result<EvalReport, EvalError> {
    let alignment = align_sim3(estimated, ground_truth)?;
    let errors = translational_errors(estimated, ground_truth, &alignment)?;
    let pse = match (points, surface) {
        (Some(p), Some(s)) => Some(pse(p, s, &alignment)?),
        _ => None,
    };
    let r = alignment.rotation;
    Ok(EvalReport {
        rms_ate: rms(&errors),
        associated: errors.len(),
        errors,
        scale: alignment.scale,
        rotation: [0, 1, 2].map(|i| [r[(i, 0)], r[(i, 1)], r[(i, 2)]]),
        translation: [alignment.translation.x, alignment.translation.y, alignment.translation.z],
        pse,
    })
}

impl EvalReport {
    /// Tab-separated `key value` lines.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out += &format!("rms_ate\t{}\n", self.rms_ate);
        out += &format!("associated\t{}\n", self.associated);
        out += &format!("scale\t{}\n", self.scale);
        if let Some(p) = &self.pse {
            out += &format!("pse_points\t{}\n", p.distances.len());
            out += &format!("pse_p50\t{}\n", p.p50);
            out += &format!("pse_p90\t{}\n", p.p90);
            out += &format!("pse_p95\t{}\n", p.p95);
        }
        out
    }
}
