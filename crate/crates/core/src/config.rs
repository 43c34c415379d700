//! Flat key/value run configuration. Every tunable default of the pipeline
//! has a key; unknown keys are rejected. The optional `preset` key selects
//! the base values that the remaining keys override.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frontend::{ActivationConfig, BootstrapConfig, EpipolarConfig, KeyframeWeights, TrackerConfig};
use crate::image::CandidateSelection;
use crate::lmcw::LmcwConfig;
use crate::pba::PbaConfig;
use crate::robust::ModelKind;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot parse configuration: {0}")]
    Parse(String),
    #[error("unknown preset `{0}` (expected `default` or `synthetic`)")]
    UnknownPreset(String),
    #[error("invalid value for `{key}`: {reason}")]
    Invalid { key: &'static str, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    /// Image pyramid depth built for every frame.
    pub pyramid_levels: usize,

    /// Coarse-to-fine levels of the windowed optimization (N_p).
    pub pba_levels: usize,
    pub pba_max_iterations: usize,
    pub pba_initial_damping: f64,
    pub pba_damping_up: f64,
    pub pba_damping_down: f64,
    pub pba_convergence: f64,
    pub gradient_c: f64,
    pub error_model: ModelKind,
    /// Run a final optimization over all keyframes and points.
    pub global_pba: bool,

    /// Temporal keyframes in the window (N_t).
    pub n_temporal: usize,
    /// Covisible keyframes in the window (N_c).
    pub n_covisible: usize,
    pub depletion_radius: f64,
    pub distance_stride: usize,
    pub max_view_angle_deg: f64,
    pub temporal_min_visible: f64,

    pub tracker_levels: usize,
    pub tracker_max_iterations: usize,
    pub tracker_huber: f64,
    pub tracker_inlier_threshold: f64,
    pub tracker_min_inlier_ratio: f64,
    pub tracker_initial_damping: f64,
    pub tracker_convergence: f64,
    pub tracker_max_rmse: f64,
    pub tracker_max_log_gain: f64,

    pub keyframe_weight_visibility: f64,
    pub keyframe_weight_translation: f64,
    pub keyframe_weight_brightness: f64,

    pub epipolar_step: f64,
    pub epipolar_min_segment: f64,
    pub epipolar_ambiguity_ratio: f64,
    pub epipolar_min_separation: f64,
    pub epipolar_max_uncertainty: f64,
    pub epipolar_max_error: f64,

    pub activation_max_width_ratio: f64,
    pub activation_min_observations: u32,
    pub activation_min_quality: f64,
    pub activation_radius: f64,

    pub candidates_per_keyframe: usize,
    pub candidate_block_size: usize,
    pub candidate_threshold_margin: f64,
    pub candidate_border: usize,
    /// New candidate intervals span these multiples of the window's mean inverse depth.
    pub candidate_rho_min_factor: f64,
    pub candidate_rho_max_factor: f64,

    pub bootstrap_candidates: usize,
    pub bootstrap_min_parallax: f64,
    pub bootstrap_max_frames: usize,
    pub bootstrap_prior_weight: f64,
    pub bootstrap_final_prior_weight: f64,
}

impl Default for Config {
    fn default() -> Self {
        let pba = PbaConfig::default();
        let lmcw = LmcwConfig::default();
        let tracker = TrackerConfig::default();
        let weights = KeyframeWeights::default();
        let epi = EpipolarConfig::default();
        let act = ActivationConfig::default();
        let sel = CandidateSelection::default();
        let boot = BootstrapConfig::default();
        Config {
            pyramid_levels: 5,
            pba_levels: pba.n_levels,
            pba_max_iterations: pba.max_iterations,
            pba_initial_damping: pba.initial_damping,
            pba_damping_up: pba.damping_up,
            pba_damping_down: pba.damping_down,
            pba_convergence: pba.convergence,
            gradient_c: pba.gradient_c,
            error_model: pba.model,
            global_pba: false,
            n_temporal: lmcw.n_temporal,
            n_covisible: lmcw.n_covisible,
            depletion_radius: lmcw.depletion_radius,
            distance_stride: lmcw.distance_stride,
            max_view_angle_deg: lmcw.max_view_angle_deg,
            temporal_min_visible: lmcw.min_visible_fraction,
            tracker_levels: tracker.levels,
            tracker_max_iterations: tracker.max_iterations,
            tracker_huber: tracker.huber,
            tracker_inlier_threshold: tracker.inlier_threshold,
            tracker_min_inlier_ratio: tracker.min_inlier_ratio,
            tracker_initial_damping: tracker.initial_damping,
            tracker_convergence: tracker.convergence,
            tracker_max_rmse: tracker.max_rmse,
            tracker_max_log_gain: tracker.max_log_gain,
            keyframe_weight_visibility: weights.visibility,
            keyframe_weight_translation: weights.translation,
            keyframe_weight_brightness: weights.brightness,
            epipolar_step: epi.step,
            epipolar_min_segment: epi.min_segment,
            epipolar_ambiguity_ratio: epi.ambiguity_ratio,
            epipolar_min_separation: epi.min_separation,
            epipolar_max_uncertainty: epi.max_uncertainty,
            epipolar_max_error: epi.max_error,
            activation_max_width_ratio: act.max_width_ratio,
            activation_min_observations: act.min_observations,
            activation_min_quality: act.min_quality,
            activation_radius: act.radius,
            candidates_per_keyframe: 2000,
            candidate_block_size: sel.block_size,
            candidate_threshold_margin: sel.threshold_margin,
            candidate_border: sel.border,
            candidate_rho_min_factor: 0.05,
            candidate_rho_max_factor: 5.0,
            bootstrap_candidates: 2000,
            bootstrap_min_parallax: boot.min_parallax,
            bootstrap_max_frames: boot.max_frames,
            bootstrap_prior_weight: boot.prior_weight,
            bootstrap_final_prior_weight: boot.final_prior_weight,
        }
    }
}

impl Config {
    /// Values for the small, smooth-textured rendered sequences.
    pub fn synthetic() -> Self {
        Config {
            pyramid_levels: 4,
            depletion_radius: 8.0,
            distance_stride: 2,
            activation_radius: 5.0,
            candidates_per_keyframe: 400,
            candidate_block_size: 8,
            candidate_threshold_margin: 2.0,
            candidate_border: 6,
            bootstrap_candidates: 400,
            ..Config::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        match name {
            "default" => Ok(Config::default()),
            "synthetic" => Ok(Config::synthetic()),
            other => Err(ConfigError::UnknownPreset(other.to_string())),
        }
    }

    /// Parses a flat TOML document.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        let base = match table.remove("preset") {
            None => Config::default(),
            Some(toml::Value::String(name)) => Config::preset(&name)?,
            Some(other) => return Err(ConfigError::Parse(format!("`preset` must be a string, found {other}"))),
        };
        let mut merged = toml::Table::try_from(base).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for (key, value) in table {
            if !merged.contains_key(&key) {
                return Err(ConfigError::Parse(format!("unknown key `{key}`")));
            }
            merged.insert(key, value);
        }
        let config: Config = merged.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = |key: &'static str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(ConfigError::Invalid {
                    key,
                    reason: format!("{v} is not positive"),
                })
            }
        };
        let at_least = |key: &'static str, v: usize, min: usize| {
            if v >= min {
                Ok(())
            } else {
                Err(ConfigError::Invalid {
                    key,
                    reason: format!("{v} is below {min}"),
                })
            }
        };
        at_least("pyramid_levels", self.pyramid_levels, 1)?;
        at_least("pba_levels", self.pba_levels, 1)?;
        at_least("tracker_levels", self.tracker_levels, 1)?;
        at_least("n_temporal", self.n_temporal, 2)?;
        at_least("distance_stride", self.distance_stride, 1)?;
        at_least("candidate_block_size", self.candidate_block_size, 1)?;
        at_least("bootstrap_max_frames", self.bootstrap_max_frames, 1)?;
        positive("pba_initial_damping", self.pba_initial_damping)?;
        positive("gradient_c", self.gradient_c)?;
        positive("tracker_huber", self.tracker_huber)?;
        positive("epipolar_step", self.epipolar_step)?;
        positive("candidate_rho_min_factor", self.candidate_rho_min_factor)?;
        positive("bootstrap_min_parallax", self.bootstrap_min_parallax)?;
        if self.pba_damping_up <= 1.0 {
            return Err(ConfigError::Invalid {
                key: "pba_damping_up",
                reason: "must exceed 1".into(),
            });
        }
        if !(self.pba_damping_down > 0.0 && self.pba_damping_down < 1.0) {
            return Err(ConfigError::Invalid {
                key: "pba_damping_down",
                reason: "must lie in (0, 1)".into(),
            });
        }
        if self.candidate_rho_max_factor <= self.candidate_rho_min_factor {
            return Err(ConfigError::Invalid {
                key: "candidate_rho_max_factor",
                reason: "must exceed candidate_rho_min_factor".into(),
            });
        }
        if !(0.0..=1.0).contains(&self.temporal_min_visible) {
            return Err(ConfigError::Invalid {
                key: "temporal_min_visible",
                reason: "must lie in [0, 1]".into(),
            });
        }
        if !(0.0..=1.0).contains(&self.tracker_min_inlier_ratio) {
            return Err(ConfigError::Invalid {
                key: "tracker_min_inlier_ratio",
                reason: "must lie in [0, 1]".into(),
            });
        }
        Ok(())
    }

    pub fn pba(&self) -> PbaConfig {
        PbaConfig {
            n_levels: self.pba_levels,
            max_iterations: self.pba_max_iterations,
            initial_damping: self.pba_initial_damping,
            damping_up: self.pba_damping_up,
            damping_down: self.pba_damping_down,
            convergence: self.pba_convergence,
            gradient_c: self.gradient_c,
            model: self.error_model,
        }
    }

    pub fn lmcw(&self) -> LmcwConfig {
        LmcwConfig {
            n_temporal: self.n_temporal,
            n_covisible: self.n_covisible,
            depletion_radius: self.depletion_radius,
            distance_stride: self.distance_stride,
            max_view_angle_deg: self.max_view_angle_deg,
            min_visible_fraction: self.temporal_min_visible,
        }
    }

    pub fn tracker(&self) -> TrackerConfig {
        TrackerConfig {
            levels: self.tracker_levels,
            max_iterations: self.tracker_max_iterations,
            huber: self.tracker_huber,
            gradient_c: self.gradient_c,
            inlier_threshold: self.tracker_inlier_threshold,
            min_inlier_ratio: self.tracker_min_inlier_ratio,
            initial_damping: self.tracker_initial_damping,
            convergence: self.tracker_convergence,
            max_rmse: self.tracker_max_rmse,
            max_log_gain: self.tracker_max_log_gain,
        }
    }

    pub fn keyframe_weights(&self) -> KeyframeWeights {
        KeyframeWeights {
            visibility: self.keyframe_weight_visibility,
            translation: self.keyframe_weight_translation,
            brightness: self.keyframe_weight_brightness,
        }
    }

    pub fn epipolar(&self) -> EpipolarConfig {
        EpipolarConfig {
            step: self.epipolar_step,
            min_segment: self.epipolar_min_segment,
            ambiguity_ratio: self.epipolar_ambiguity_ratio,
            min_separation: self.epipolar_min_separation,
            max_uncertainty: self.epipolar_max_uncertainty,
            max_error: self.epipolar_max_error,
        }
    }

    pub fn activation(&self) -> ActivationConfig {
        ActivationConfig {
            max_width_ratio: self.activation_max_width_ratio,
            min_observations: self.activation_min_observations,
            min_quality: self.activation_min_quality,
            radius: self.activation_radius,
        }
    }

    pub fn selection(&self) -> CandidateSelection {
        CandidateSelection {
            block_size: self.candidate_block_size,
            threshold_margin: self.candidate_threshold_margin,
            border: self.candidate_border,
        }
    }

    pub fn bootstrap(&self) -> BootstrapConfig {
        BootstrapConfig {
            min_parallax: self.bootstrap_min_parallax,
            max_frames: self.bootstrap_max_frames,
            prior_weight: self.bootstrap_prior_weight,
            final_prior_weight: self.bootstrap_final_prior_weight,
        }
    }
}
