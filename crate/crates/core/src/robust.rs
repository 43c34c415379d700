//! Residual distribution fitting and IRLS weight functions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::KeyframeId;

/// Consistency factor turning a median absolute deviation into a Gaussian sigma.
pub const MAD_TO_SIGMA: f64 = 1.4826;
/// Huber threshold as a multiple of the fitted scale.
pub const HUBER_K: f64 = 1.345;
/// Minimum sample count for a per-keyframe fit.
pub const MIN_FIT_SAMPLES: usize = 50;
const PREFILTER_SIGMAS: f64 = 3.0;
const NU_BOUNDS: (f64, f64) = (0.05, 1000.0);
const FALLBACK_NU: f64 = 5.0;
const FALLBACK_SIGMA: f64 = 8.0;
/// Floor on fitted scales, in intensity units; keeps exact fits finite.
pub const MIN_SIGMA: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RobustError {
    #[error("need at least {needed} residual samples, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("t-distribution fit did not converge; fallback nu={nu}, sigma={sigma}")]
    FitFailed { nu: f64, sigma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Gaussian,
    Tdist,
    Huber,
}

impl std::str::FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gaussian" => Ok(ModelKind::Gaussian),
            "tdist" => Ok(ModelKind::Tdist),
            "huber" => Ok(ModelKind::Huber),
            other => Err(format!("unknown error model '{other}'")),
        }
    }
}

/// A fitted residual distribution for one keyframe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorModel {
    pub kind: ModelKind,
    pub sigma: f64,
    pub nu: f64,
    pub lambda: f64,
    /// Residuals with larger magnitude are outliers for mask purposes.
    pub percentile95: f64,
}

impl ErrorModel {
    pub fn gaussian(sigma: f64) -> Self {
        ErrorModel {
            kind: ModelKind::Gaussian,
            sigma,
            nu: f64::INFINITY,
            lambda: f64::INFINITY,
            percentile95: f64::INFINITY,
        }
    }

    pub fn tdist(nu: f64, sigma: f64) -> Self {
        ErrorModel {
            kind: ModelKind::Tdist,
            sigma,
            nu,
            lambda: f64::INFINITY,
            percentile95: f64::INFINITY,
        }
    }

    pub fn huber(sigma: f64) -> Self {
        ErrorModel {
            kind: ModelKind::Huber,
            sigma,
            nu: f64::INFINITY,
            lambda: HUBER_K * sigma,
            percentile95: f64::INFINITY,
        }
    }

    pub fn with_percentile95(mut self, threshold: f64) -> Self {
        self.percentile95 = threshold;
        self
    }

    /// IRLS weight w(r) satisfying ρ'(r) = 2 r w(r) for the matching cost.
    pub fn weight(&self, r: f64) -> f64 {
        match self.kind {
            ModelKind::Gaussian => weight_gaussian(r, self.sigma),
            ModelKind::Tdist => weight_tdist(r, self.nu, self.sigma) / (self.sigma * self.sigma),
            ModelKind::Huber => weight_huber(r, self.sigma, self.lambda),
        }
    }

    /// Robust cost ρ(r), zero at r = 0.
    pub fn cost(&self, r: f64) -> f64 {
        let s2 = self.sigma * self.sigma;
        match self.kind {
            ModelKind::Gaussian => r * r / s2,
            ModelKind::Tdist => (self.nu + 1.0) * (r * r / (self.nu * s2)).ln_1p(),
            ModelKind::Huber => {
                let a = r.abs();
                if a < self.lambda {
                    r * r / s2
                } else {
                    (2.0 * self.lambda * a - self.lambda * self.lambda) / s2
                }
            }
        }
    }

    pub fn is_outlier(&self, r: f64) -> bool {
        r.abs() > self.percentile95
    }
}

/// Constant 1/σ².
pub fn weight_gaussian(_r: f64, sigma: f64) -> f64 {
    1.0 / (sigma * sigma)
}

/// (ν+1) / (ν + (r/σ)²).
pub fn weight_tdist(r: f64, nu: f64, sigma: f64) -> f64 {
    let z = r / sigma;
    (nu + 1.0) / (nu + z * z)
}

/// 1/σ² inside λ, λ/(σ²|r|) outside.
pub fn weight_huber(r: f64, sigma: f64, lambda: f64) -> f64 {
    let a = r.abs();
    if a < lambda {
        1.0 / (sigma * sigma)
    } else {
        lambda / (sigma * sigma * a)
    }
}

fn median_in_place(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// 1.4826 · median(|r − median(r)|).
pub fn mad_scale(samples: &[f64]) -> Result<f64, RobustError> {
    if samples.len() < 2 {
        return Err(RobustError::InsufficientData {
            needed: 2,
            got: samples.len(),
        });
    }
    let mut v = samples.to_vec();
    let med = median_in_place(&mut v);
    for x in v.iter_mut() {
        *x = (*x - med).abs();
    }
    Ok(MAD_TO_SIGMA * median_in_place(&mut v))
}

/// Drops samples with |r| beyond three MAD-scales.
pub fn prefilter(samples: &[f64]) -> Result<Vec<f64>, RobustError> {
    let limit = PREFILTER_SIGMAS * mad_scale(samples)?;
    let kept: Vec<f64> = samples.iter().copied().filter(|r| r.abs() <= limit).collect();
    if kept.is_empty() {
        return Err(RobustError::InsufficientData { needed: 1, got: 0 });
    }
    Ok(kept)
}

/// Nearest-rank 95th percentile of |r|; infinite for an empty input.
pub fn percentile95(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return f64::INFINITY;
    }
    let mut v: Vec<f64> = samples.iter().map(|r| r.abs()).collect();
    v.sort_by(f64::total_cmp);
    let rank = (0.95 * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

/// Natural log of the gamma function for x > 0 (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin().abs()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    let t = x + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Negative log-likelihood of zero-mean t(ν, σ) over `samples`.
pub fn tdist_nll(samples: &[f64], nu: f64, sigma: f64) -> f64 {
    let n = samples.len() as f64;
    let constant = ln_gamma(0.5 * nu) - ln_gamma(0.5 * (nu + 1.0))
        + 0.5 * (nu * std::f64::consts::PI).ln()
        + sigma.ln();
    let tail: f64 = samples
        .iter()
        .map(|r| {
            let z = r / sigma;
            (z * z / nu).ln_1p()
        })
        .sum();
    n * constant + 0.5 * (nu + 1.0) * tail
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NelderMeadResult {
    pub x: [f64; 2],
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Two-dimensional Nelder–Mead with standard coefficients. Converges when the
/// simplex diameter falls below `tol`.
pub fn nelder_mead(
    f: impl Fn([f64; 2]) -> f64,
    start: [f64; 2],
    step: [f64; 2],
    tol: f64,
    max_iter: usize,
) -> NelderMeadResult {
    let mut simplex = [
        start,
        [start[0] + step[0], start[1]],
        [start[0], start[1] + step[1]],
    ];
    let mut values = simplex.map(&f);
    let lerp = |a: [f64; 2], b: [f64; 2], t: f64| [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
    let dist = |a: [f64; 2], b: [f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        let mut order = [0usize, 1, 2];
        order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
        simplex = order.map(|i| simplex[i]);
        values = order.map(|i| values[i]);
        let diameter = dist(simplex[0], simplex[1])
            .max(dist(simplex[0], simplex[2]))
            .max(dist(simplex[1], simplex[2]));
        if diameter < tol {
            converged = true;
            break;
        }
        iterations += 1;
        let centroid = lerp(simplex[0], simplex[1], 0.5);
        let reflected = lerp(centroid, simplex[2], -1.0);
        let fr = f(reflected);
        if fr < values[0] {
            let expanded = lerp(centroid, simplex[2], -2.0);
            let fe = f(expanded);
            if fe < fr {
                simplex[2] = expanded;
                values[2] = fe;
            } else {
                simplex[2] = reflected;
                values[2] = fr;
            }
        } else if fr < values[1] {
            simplex[2] = reflected;
            values[2] = fr;
        } else {
            let contracted = if fr < values[2] {
                lerp(centroid, reflected, 0.5)
            } else {
                lerp(centroid, simplex[2], 0.5)
            };
            let fc = f(contracted);
            if fc < values[2].min(fr) {
                simplex[2] = contracted;
                values[2] = fc;
            } else {
                for k in 1..3 {
                    simplex[k] = lerp(simplex[0], simplex[k], 0.5);
                    values[k] = f(simplex[k]);
                }
            }
        }
    }
    let best = (0..3).min_by(|&i, &j| values[i].total_cmp(&values[j])).unwrap_or(0);
    NelderMeadResult {
        x: simplex[best],
        value: values[best],
        iterations,
        converged,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TFit {
    pub nu: f64,
    pub sigma: f64,
    pub iterations: usize,
}

/// Maximum-likelihood (ν, σ) of a zero-mean t distribution, optimized in
/// log space from (5, MAD scale). ν is confined to [0.05, 1000].
pub fn fit_tdist(samples: &[f64]) -> Result<TFit, RobustError> {
    if samples.len() < MIN_FIT_SAMPLES {
        return Err(RobustError::InsufficientData {
            needed: MIN_FIT_SAMPLES,
            got: samples.len(),
        });
    }
    let mad = mad_scale(samples)?;
    let sigma0 = if mad > 0.0 {
        mad
    } else {
        let rms = (samples.iter().map(|r| r * r).sum::<f64>() / samples.len() as f64).sqrt();
        if rms > 0.0 {
            rms
        } else {
            return Err(RobustError::FitFailed {
                nu: FALLBACK_NU,
                sigma: mad,
            });
        }
    };
    let (lo, hi) = (NU_BOUNDS.0.ln(), NU_BOUNDS.1.ln());
    let objective = |x: [f64; 2]| {
        if x[0] < lo || x[0] > hi {
            return f64::INFINITY;
        }
        tdist_nll(samples, x[0].exp(), x[1].exp())
    };
    let result = nelder_mead(objective, [FALLBACK_NU.ln(), sigma0.ln()], [0.5, 0.2], 1e-4, 200);
    if !result.converged || !result.value.is_finite() {
        return Err(RobustError::FitFailed {
            nu: FALLBACK_NU,
            sigma: sigma0,
        });
    }
    Ok(TFit {
        nu: result.x[0].exp(),
        sigma: result.x[1].exp(),
        iterations: result.iterations,
    })
}

/// Fits a model of `kind` to a residual population: MAD prefilter, then the
/// kind-specific scale fit. percentile95 is taken over the unfiltered |r|.
pub fn fit_model(samples: &[f64], kind: ModelKind) -> Result<ErrorModel, RobustError> {
    if samples.len() < MIN_FIT_SAMPLES {
        return Err(RobustError::InsufficientData {
            needed: MIN_FIT_SAMPLES,
            got: samples.len(),
        });
    }
    let filtered = prefilter(samples)?;
    let p95 = percentile95(samples);
    let model = match kind {
        ModelKind::Gaussian => {
            let rms = (filtered.iter().map(|r| r * r).sum::<f64>() / filtered.len() as f64).sqrt();
            ErrorModel::gaussian(rms.max(MIN_SIGMA))
        }
        ModelKind::Huber => {
            let s = mad_scale(&filtered)?;
            ErrorModel::huber(s.max(MIN_SIGMA))
        }
        ModelKind::Tdist => match fit_tdist(&filtered) {
            Ok(fit) => ErrorModel::tdist(fit.nu, fit.sigma.max(MIN_SIGMA)),
            Err(RobustError::FitFailed { nu, sigma }) => {
                log::warn!("t fit failed; using nu={nu}, sigma={sigma}");
                ErrorModel::tdist(nu, sigma.max(MIN_SIGMA))
            }
            Err(e) => return Err(e),
        },
    };
    Ok(model.with_percentile95(p95))
}

/// Model used when neither the keyframe nor the pool has enough samples.
pub fn default_model(kind: ModelKind) -> ErrorModel {
    match kind {
        ModelKind::Gaussian => ErrorModel::gaussian(FALLBACK_SIGMA),
        ModelKind::Tdist => ErrorModel::tdist(FALLBACK_NU, FALLBACK_SIGMA),
        ModelKind::Huber => ErrorModel::huber(FALLBACK_SIGMA),
    }
}

/// One residual attributed to the keyframe in which it was measured.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualSample {
    pub residual: f64,
    pub keyframe: KeyframeId,
}

/// Fits one model for `keyframe` from its own samples, falling back to the
/// whole pool when it has too few.
pub fn fit_keyframe_model(
    samples: &[ResidualSample],
    keyframe: KeyframeId,
    kind: ModelKind,
) -> ErrorModel {
    let own: Vec<f64> = samples
        .iter()
        .filter(|s| s.keyframe == keyframe)
        .map(|s| s.residual)
        .collect();
    if let Ok(m) = fit_model(&own, kind) {
        return m;
    }
    let pool: Vec<f64> = samples.iter().map(|s| s.residual).collect();
    fit_model(&pool, kind).unwrap_or_else(|_| default_model(kind))
}

/// Per-keyframe models for every keyframe present in `samples`, plus any in
/// `keyframes` that have no samples at all.
pub fn fit_keyframe_models(
    samples: &[ResidualSample],
    keyframes: impl IntoIterator<Item = KeyframeId>,
    kind: ModelKind,
) -> BTreeMap<KeyframeId, ErrorModel> {
    let mut grouped: BTreeMap<KeyframeId, Vec<f64>> = BTreeMap::new();
    for k in keyframes {
        grouped.entry(k).or_default();
    }
    for s in samples {
        grouped.entry(s.keyframe).or_default().push(s.residual);
    }
    let mut pool_model: Option<ErrorModel> = None;
    let mut out = BTreeMap::new();
    for (k, own) in grouped {
        let model = fit_model(&own, kind).unwrap_or_else(|_| {
            *pool_model.get_or_insert_with(|| {
                let pool: Vec<f64> = samples.iter().map(|s| s.residual).collect();
                fit_model(&pool, kind).unwrap_or_else(|_| default_model(kind))
            })
        });
        out.insert(k, model);
    }
    out
}
