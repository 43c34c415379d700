//! Persistent map: keyframes, inverse-depth points and their observations.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use nalgebra::{Vector2, Vector3};

use crate::geometry::{CameraModel, Se3};
use crate::image::{Pyramid, PATCH_SIZE};
use crate::photometric::AffineBrightness;
use crate::{KeyframeId, PointId};

/// Mask with every pattern pixel marked inlier.
pub const ALL_INLIERS: u8 = 0xFF;
/// Observations with at least this many outlier pixels are removed after a solve.
pub const REMOVE_OUTLIER_PIXELS: u32 = 3;
/// Observations with at least this many outlier pixels are ignored for a level.
pub const DISCARD_OUTLIER_PIXELS: u32 = 5;
/// Observation count at which a point becomes mature.
pub const MATURE_OBSERVATIONS: usize = 3;

/// A re-observation of a point's patch in a target keyframe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Observation {
    pub target: KeyframeId,
    /// Bit k set when pattern pixel k is an inlier.
    pub mask: u8,
    pub outlier: bool,
}

impl Observation {
    pub fn new(target: KeyframeId) -> Self {
        Observation {
            target,
            mask: ALL_INLIERS,
            outlier: false,
        }
    }

    pub fn outlier_pixels(&self) -> u32 {
        PATCH_SIZE as u32 - self.mask.count_ones()
    }

    /// More than 30% of the pattern is outlier.
    pub fn should_remove(&self) -> bool {
        self.outlier_pixels() >= REMOVE_OUTLIER_PIXELS
    }

    /// More than 60% of the pattern is outlier.
    pub fn should_discard(&self) -> bool {
        self.outlier_pixels() >= DISCARD_OUTLIER_PIXELS
    }
}

/// Builds a pixel mask from per-pixel outlier flags.
pub fn mask_from_outliers(outliers: &[bool; PATCH_SIZE]) -> u8 {
    outliers
        .iter()
        .enumerate()
        .fold(0u8, |m, (k, &o)| if o { m } else { m | (1 << k) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointStatus {
    Candidate,
    Active,
    Mature,
    Removed,
}

#[derive(Debug, Clone)]
pub struct MapPoint {
    pub id: PointId,
    pub host: KeyframeId,
    /// Level-0 pixel in the host keyframe.
    pub pixel: Vector2<f64>,
    pub rho: f64,
    pub status: PointStatus,
    pub observations: Vec<Observation>,
    /// Targets whose observation was removed as outlier; never re-added.
    pub rejected: BTreeSet<KeyframeId>,
    /// Latest keyframe when the point was activated.
    pub created_at: KeyframeId,
    /// Robust energy at the last solve.
    pub energy: f64,
}

impl MapPoint {
    pub fn observation(&self, target: KeyframeId) -> Option<&Observation> {
        self.observations.iter().find(|o| o.target == target)
    }

    pub fn has_observation(&self, target: KeyframeId) -> bool {
        self.observation(target).is_some()
    }

    pub fn is_live(&self) -> bool {
        matches!(self.status, PointStatus::Active | PointStatus::Mature)
    }
}

/// Immature point waiting for its inverse depth to converge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidatePoint {
    pub pixel: Vector2<f64>,
    pub rho_min: f64,
    pub rho_max: f64,
    pub rho: f64,
    /// Best matching cost of the last successful search.
    pub quality: f64,
    pub observations: u32,
    pub gradient: f64,
}

impl CandidatePoint {
    pub fn new(pixel: Vector2<f64>, rho_min: f64, rho_max: f64, gradient: f64) -> Self {
        CandidatePoint {
            pixel,
            rho_min,
            rho_max,
            rho: (rho_min * rho_max).sqrt(),
            quality: f64::INFINITY,
            observations: 0,
            gradient,
        }
    }

    /// Relative interval width (ρ_max − ρ_min) / ρ.
    pub fn width_ratio(&self) -> f64 {
        (self.rho_max - self.rho_min) / self.rho
    }
}

#[derive(Debug, Clone)]
pub struct Keyframe {
    pub id: KeyframeId,
    pub timestamp: f64,
    pub pyramid: Arc<Pyramid>,
    /// World-from-camera.
    pub pose: Se3,
    pub affine: AffineBrightness,
    pub hosted: Vec<PointId>,
    pub candidates: Vec<CandidatePoint>,
}

impl Keyframe {
    pub fn camera(&self) -> &CameraModel {
        self.pyramid.camera()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Map {
    keyframes: BTreeMap<KeyframeId, Keyframe>,
    points: BTreeMap<PointId, MapPoint>,
    next_keyframe: KeyframeId,
    next_point: PointId,
}

impl Map {
    pub fn new() -> Self {
        Map::default()
    }

    pub fn add_keyframe(
        &mut self,
        timestamp: f64,
        pyramid: Arc<Pyramid>,
        pose: Se3,
        affine: AffineBrightness,
    ) -> KeyframeId {
        let id = self.next_keyframe;
        self.next_keyframe += 1;
        self.keyframes.insert(
            id,
            Keyframe {
                id,
                timestamp,
                pyramid,
                pose,
                affine,
                hosted: Vec::new(),
                candidates: Vec::new(),
            },
        );
        id
    }

    pub fn keyframe(&self, id: KeyframeId) -> &Keyframe {
        &self.keyframes[&id]
    }

    pub fn keyframe_mut(&mut self, id: KeyframeId) -> &mut Keyframe {
        self.keyframes.get_mut(&id).expect("unknown keyframe")
    }

    pub fn get_keyframe(&self, id: KeyframeId) -> Option<&Keyframe> {
        self.keyframes.get(&id)
    }

    pub fn keyframes(&self) -> impl Iterator<Item = &Keyframe> {
        self.keyframes.values()
    }

    pub fn keyframes_mut(&mut self) -> impl Iterator<Item = &mut Keyframe> {
        self.keyframes.values_mut()
    }

    pub fn keyframe_ids(&self) -> Vec<KeyframeId> {
        self.keyframes.keys().copied().collect()
    }

    pub fn n_keyframes(&self) -> usize {
        self.keyframes.len()
    }

    pub fn latest_keyframe(&self) -> Option<&Keyframe> {
        self.keyframes.values().next_back()
    }

    /// Adds an active point hosted in `host`.
    pub fn add_point(&mut self, host: KeyframeId, pixel: Vector2<f64>, rho: f64, created_at: KeyframeId) -> PointId {
        let id = self.next_point;
        self.next_point += 1;
        self.points.insert(
            id,
            MapPoint {
                id,
                host,
                pixel,
                rho,
                status: PointStatus::Active,
                observations: Vec::new(),
                rejected: BTreeSet::new(),
                created_at,
                energy: 0.0,
            },
        );
        self.keyframe_mut(host).hosted.push(id);
        id
    }

    pub fn point(&self, id: PointId) -> &MapPoint {
        &self.points[&id]
    }

    pub fn get_point(&self, id: PointId) -> Option<&MapPoint> {
        self.points.get(&id)
    }

    pub fn point_mut(&mut self, id: PointId) -> &mut MapPoint {
        self.points.get_mut(&id).expect("unknown point")
    }

    pub fn points(&self) -> impl Iterator<Item = &MapPoint> {
        self.points.values()
    }

    pub fn live_points(&self) -> impl Iterator<Item = &MapPoint> {
        self.points.values().filter(|p| p.is_live())
    }

    pub fn n_live_points(&self) -> usize {
        self.live_points().count()
    }

    pub fn remove_point(&mut self, id: PointId) {
        if let Some(p) = self.points.remove(&id) {
            if let Some(kf) = self.keyframes.get_mut(&p.host) {
                kf.hosted.retain(|&q| q != id);
            }
        }
    }

    /// Point position in world coordinates.
    pub fn world_point(&self, point: &MapPoint) -> Vector3<f64> {
        let host = self.keyframe(point.host);
        let local = host.camera().unproject_ray(&point.pixel) / point.rho;
        host.pose.transform(&local)
    }

    /// Adds an observation unless one exists or the target was rejected before.
    pub fn add_observation(&mut self, point: PointId, target: KeyframeId) -> bool {
        let p = self.point_mut(point);
        if p.host == target || p.has_observation(target) || p.rejected.contains(&target) {
            return false;
        }
        p.observations.push(Observation::new(target));
        true
    }

    /// Removes an observation permanently.
    pub fn reject_observation(&mut self, point: PointId, target: KeyframeId) {
        let p = self.point_mut(point);
        p.observations.retain(|o| o.target != target);
        p.rejected.insert(target);
    }

    /// Applies the maturity lifecycle after `new_keyframe` was inserted and
    /// optimized. Returns the removed points.
    pub fn enforce_maturity(&mut self, new_keyframe: KeyframeId) -> Vec<PointId> {
        let mut removed = Vec::new();
        for p in self.points.values_mut() {
            if !p.is_live() {
                continue;
            }
            let n = p.observations.len();
            if p.status == PointStatus::Mature {
                if n < MATURE_OBSERVATIONS {
                    removed.push(p.id);
                }
                continue;
            }
            if p.created_at < new_keyframe && p.host != new_keyframe && !p.has_observation(new_keyframe) {
                removed.push(p.id);
            } else if n >= MATURE_OBSERVATIONS {
                p.status = PointStatus::Mature;
            }
        }
        for &id in &removed {
            self.remove_point(id);
        }
        removed
    }

    /// Rigidly maps every keyframe and point by a similarity that keeps
    /// `anchor` in place and scales distances from it by `scale`.
    pub fn rescale_about(&mut self, anchor: KeyframeId, scale: f64) {
        let center = self.keyframe(anchor).pose.translation;
        for kf in self.keyframes.values_mut() {
            kf.pose.translation = center + (kf.pose.translation - center) * scale;
        }
        for p in self.points.values_mut() {
            p.rho /= scale;
        }
        for kf in self.keyframes.values_mut() {
            for c in kf.candidates.iter_mut() {
                c.rho /= scale;
                c.rho_min /= scale;
                c.rho_max /= scale;
            }
        }
    }
}
