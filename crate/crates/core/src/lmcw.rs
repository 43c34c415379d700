//! Local map covisibility window: temporal keyframe selection, the
//! projected-point distance map and greedy covisible keyframe selection.

use std::collections::BTreeSet;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::angle_between;
use crate::map::Map;
use crate::KeyframeId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmcwConfig {
    pub n_temporal: usize,
    pub n_covisible: usize,
    /// Level-0 pixels; a pixel farther than this from every projection is depleted.
    pub depletion_radius: f64,
    pub distance_stride: usize,
    pub max_view_angle_deg: f64,
    /// A droppable temporal keyframe with fewer than this fraction of its
    /// live points inside the latest keyframe is dropped before the
    /// spatial rule is consulted. 0 disables the check.
    pub min_visible_fraction: f64,
}

impl Default for LmcwConfig {
    fn default() -> Self {
        LmcwConfig {
            n_temporal: 4,
            n_covisible: 3,
            depletion_radius: 20.0,
            distance_stride: 4,
            max_view_angle_deg: 40.0,
            min_visible_fraction: 0.0,
        }
    }
}

/// Relative tolerance under which two drop scores count as tied.
const TIE_TOLERANCE: f64 = 1e-12;

/// Chooses which temporal keyframe to drop. The latest keyframe and its
/// predecessor are never dropped; among the rest the one maximizing
/// √d(I_0, I_i) · Σ_j 1/d(I_i, I_j) goes, ties to the older id. `temporal`
/// holds (id, camera center); the sum runs over all temporal keyframes
/// other than the latest and the candidate itself.
pub fn temporal_drop(temporal: &[(KeyframeId, Vector3<f64>)], latest: KeyframeId) -> Option<KeyframeId> {
    let mut ids: Vec<KeyframeId> = temporal.iter().map(|t| t.0).collect();
    ids.sort_unstable();
    let predecessor = ids.iter().rev().copied().find(|&id| id != latest);
    let latest_center = temporal.iter().find(|t| t.0 == latest)?.1;
    let dist = |a: &Vector3<f64>, b: &Vector3<f64>| (a - b).norm().max(1e-12);
    let mut best: Option<(KeyframeId, f64)> = None;
    let mut candidates: Vec<&(KeyframeId, Vector3<f64>)> = temporal
        .iter()
        .filter(|t| t.0 != latest && Some(t.0) != predecessor)
        .collect();
    candidates.sort_by_key(|t| t.0);
    for (id, center) in candidates {
        let sum: f64 = temporal
            .iter()
            .filter(|t| t.0 != latest && t.0 != *id)
            .map(|t| 1.0 / dist(center, &t.1))
            .sum();
        let score = dist(&latest_center, center).sqrt() * sum;
        match best {
            Some((_, s)) if score <= s + TIE_TOLERANCE * s.abs() => {}
            _ => best = Some((*id, score)),
        }
    }
    best.map(|b| b.0)
}

/// Euclidean distance, in level-0 pixels, from each grid cell to the
/// nearest projected point, on a grid with `stride`-pixel cells.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMap {
    stride: usize,
    width: usize,
    height: usize,
    grid_w: usize,
    grid_h: usize,
    seeds: Vec<bool>,
    distance: Vec<f64>,
}

impl DistanceMap {
    /// Value reported everywhere when there are no projections.
    pub const EMPTY: f64 = f64::INFINITY;

    pub fn new(width: usize, height: usize, stride: usize) -> Self {
        let stride = stride.max(1);
        let grid_w = width.div_ceil(stride);
        let grid_h = height.div_ceil(stride);
        DistanceMap {
            stride,
            width,
            height,
            grid_w,
            grid_h,
            seeds: vec![false; grid_w * grid_h],
            distance: vec![Self::EMPTY; grid_w * grid_h],
        }
    }

    pub fn from_projections(width: usize, height: usize, stride: usize, projections: &[Vector2<f64>]) -> Self {
        let mut m = DistanceMap::new(width, height, stride);
        m.add_projections(projections);
        m
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn grid_size(&self) -> (usize, usize) {
        (self.grid_w, self.grid_h)
    }

    /// Grid cell of a level-0 pixel, or `None` outside the image.
    pub fn cell_of(&self, u: &Vector2<f64>) -> Option<(usize, usize)> {
        if !(u.x >= -0.5 && u.y >= -0.5 && u.x < self.width as f64 - 0.5 && u.y < self.height as f64 - 0.5) {
            return None;
        }
        let s = self.stride as f64;
        let gx = ((u.x + 0.5) / s).floor() as usize;
        let gy = ((u.y + 0.5) / s).floor() as usize;
        Some((gx.min(self.grid_w - 1), gy.min(self.grid_h - 1)))
    }

    /// Marks the projections and recomputes the exact transform.
    pub fn add_projections(&mut self, projections: &[Vector2<f64>]) {
        let mut changed = false;
        for u in projections {
            if let Some((gx, gy)) = self.cell_of(u) {
                let i = gy * self.grid_w + gx;
                changed |= !self.seeds[i];
                self.seeds[i] = true;
            }
        }
        if changed {
            self.recompute();
        }
    }

    fn recompute(&mut self) {
        let (w, h) = (self.grid_w, self.grid_h);
        let big = 1e20;
        let mut sq: Vec<f64> = self.seeds.iter().map(|&s| if s { 0.0 } else { big }).collect();
        let mut column = vec![0.0; h];
        let mut out = vec![0.0; w.max(h)];
        for x in 0..w {
            for y in 0..h {
                column[y] = sq[y * w + x];
            }
            edt_1d(&column, &mut out[..h]);
            for y in 0..h {
                sq[y * w + x] = out[y];
            }
        }
        let mut row = vec![0.0; w];
        for y in 0..h {
            row.copy_from_slice(&sq[y * w..(y + 1) * w]);
            edt_1d(&row, &mut out[..w]);
            sq[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
        }
        let s = self.stride as f64;
        for (d, v) in self.distance.iter_mut().zip(sq) {
            *d = if v >= big { Self::EMPTY } else { s * v.sqrt() };
        }
    }

    pub fn distance_at(&self, u: &Vector2<f64>) -> Option<f64> {
        self.cell_of(u).map(|(gx, gy)| self.distance[gy * self.grid_w + gx])
    }

    pub fn cell_distance(&self, gx: usize, gy: usize) -> f64 {
        self.distance[gy * self.grid_w + gx]
    }

    pub fn is_depleted(&self, u: &Vector2<f64>, radius: f64) -> bool {
        self.distance_at(u).is_some_and(|d| d > radius)
    }
}

/// One-dimensional squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0 and the new parabola dominates everywhere.
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
            }
            break;
        }
    }
    k = 0;
    for (q, out) in d.iter_mut().enumerate().take(n) {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        *out = dq * dq + f[p];
    }
}

/// Greedy covisible selection over precomputed projections. Each round picks
/// the keyframe with the most projections in depleted cells (ties to the
/// lower id), then adds its projections to the distance map. Stops after
/// `n_covisible` picks or when the best score is zero.
pub fn greedy_covisible(
    distance_map: &DistanceMap,
    candidates: &[(KeyframeId, Vec<Vector2<f64>>)],
    n_covisible: usize,
    radius: f64,
) -> Vec<KeyframeId> {
    let mut dm = distance_map.clone();
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by_key(|&i| candidates[i].0);
    let mut taken = vec![false; candidates.len()];
    let mut selected = Vec::new();
    while selected.len() < n_covisible {
        let mut best: Option<(usize, usize)> = None;
        for &i in &order {
            if taken[i] {
                continue;
            }
            let score = candidates[i].1.iter().filter(|u| dm.is_depleted(u, radius)).count();
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((i, score));
            }
        }
        match best {
            Some((i, score)) if score > 0 => {
                taken[i] = true;
                selected.push(candidates[i].0);
                dm.add_projections(&candidates[i].1);
            }
            _ => break,
        }
    }
    selected
}

/// Projections of the live points hosted by `host_ids` into `latest`,
/// keeping only points in front of the camera, inside the image, and seen
/// from directions within `max_angle_deg` of their host's viewing ray.
pub fn project_points(
    map: &Map,
    host_ids: &[KeyframeId],
    latest: KeyframeId,
    max_angle_deg: Option<f64>,
) -> Vec<(KeyframeId, Vec<Vector2<f64>>)> {
    let target = map.keyframe(latest);
    let cam = target.camera();
    let inv = target.pose.inverse();
    let latest_center = target.pose.translation;
    let mut out = Vec::new();
    for &h in host_ids {
        let host = map.keyframe(h);
        let host_center = host.pose.translation;
        let mut projections = Vec::new();
        for &pid in &host.hosted {
            let p = map.point(pid);
            if !p.is_live() {
                continue;
            }
            let w = map.world_point(p);
            let local = inv.transform(&w);
            let Ok(u) = cam.project(&local) else { continue };
            if !cam.contains(&u, 0.0) {
                continue;
            }
            if let Some(max_deg) = max_angle_deg {
                if angle_between(&(w - host_center), &(w - latest_center)).to_degrees() > max_deg {
                    continue;
                }
            }
            projections.push(u);
        }
        out.push((h, projections));
    }
    out
}

/// The active window for one mapping step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Window {
    pub latest: KeyframeId,
    pub temporal: Vec<KeyframeId>,
    pub covisible: Vec<KeyframeId>,
    pub fixed: Vec<KeyframeId>,
    /// Keyframe removed from the temporal part by this insertion.
    pub dropped: Option<KeyframeId>,
}

impl Window {
    pub fn active(&self) -> Vec<KeyframeId> {
        let mut a: Vec<KeyframeId> = self.temporal.iter().chain(&self.covisible).copied().collect();
        a.sort_unstable();
        a
    }
}

/// Keyframes outside `active` that host points observed in the active set,
/// or that observe points hosted in the active set.
pub fn fix_gauge(map: &Map, active: &[KeyframeId]) -> Vec<KeyframeId> {
    let active: BTreeSet<KeyframeId> = active.iter().copied().collect();
    let mut fixed = BTreeSet::new();
    for p in map.live_points() {
        let host_active = active.contains(&p.host);
        for o in &p.observations {
            let target_active = active.contains(&o.target);
            if host_active && !target_active {
                fixed.insert(o.target);
            } else if !host_active && target_active {
                fixed.insert(p.host);
            }
        }
    }
    fixed.into_iter().collect()
}

/// Window builder holding the temporal part between insertions.
#[derive(Debug, Clone)]
pub struct Lmcw {
    pub config: LmcwConfig,
    temporal: Vec<KeyframeId>,
}

impl Lmcw {
    pub fn new(config: LmcwConfig) -> Self {
        Lmcw {
            config,
            temporal: Vec::new(),
        }
    }

    pub fn temporal(&self) -> &[KeyframeId] {
        &self.temporal
    }

    /// Distance map over `latest` seeded with the points of `hosts`.
    pub fn distance_map(&self, map: &Map, hosts: &[KeyframeId], latest: KeyframeId) -> DistanceMap {
        let cam = map.keyframe(latest).camera();
        let projections: Vec<Vector2<f64>> = project_points(map, hosts, latest, None)
            .into_iter()
            .flat_map(|(_, p)| p)
            .collect();
        DistanceMap::from_projections(cam.width, cam.height, self.config.distance_stride, &projections)
    }

    /// Inserts the newest keyframe and builds the window around it.
    pub fn insert(&mut self, map: &Map, latest: KeyframeId) -> Window {
        self.temporal.retain(|&id| map.get_keyframe(id).is_some());
        self.temporal.push(latest);
        let mut dropped = None;
        if self.temporal.len() > self.config.n_temporal.max(2) {
            let centers: Vec<(KeyframeId, Vector3<f64>)> = self
                .temporal
                .iter()
                .map(|&id| (id, map.keyframe(id).pose.translation))
                .collect();
            if let Some(drop) = self.least_visible(map, latest).or_else(|| temporal_drop(&centers, latest)) {
                self.temporal.retain(|&id| id != drop);
                dropped = Some(drop);
            }
        }
        let covisible = self.select_covisible(map, latest);
        let mut window = Window {
            latest,
            temporal: self.temporal.clone(),
            covisible,
            fixed: Vec::new(),
            dropped,
        };
        window.fixed = fix_gauge(map, &window.active());
        window
    }

    /// The droppable temporal keyframe with the smallest fraction of live
    /// points projecting into `latest`, if that fraction is below
    /// `min_visible_fraction`. Ties go to the older id.
    fn least_visible(&self, map: &Map, latest: KeyframeId) -> Option<KeyframeId> {
        let predecessor = self.temporal.iter().copied().filter(|&id| id != latest).max();
        let droppable: Vec<KeyframeId> = self.temporal.iter().copied().filter(|&id| id != latest && Some(id) != predecessor).collect();
        let mut best: Option<(KeyframeId, f64)> = None;
        for (id, projections) in project_points(map, &droppable, latest, None) {
            let live = map.keyframe(id).hosted.iter().filter(|&&p| map.point(p).is_live()).count();
            if live == 0 {
                continue;
            }
            let fraction = projections.len() as f64 / live as f64;
            if fraction < self.config.min_visible_fraction && best.is_none_or(|(b, f)| fraction < f || (fraction == f && id < b)) {
                best = Some((id, fraction));
            }
        }
        best.map(|b| b.0)
    }

    /// Old keyframes (outside the temporal part) filling depleted areas.
    pub fn select_covisible(&self, map: &Map, latest: KeyframeId) -> Vec<KeyframeId> {
        if self.config.n_covisible == 0 {
            return Vec::new();
        }
        let old: Vec<KeyframeId> = map
            .keyframe_ids()
            .into_iter()
            .filter(|id| !self.temporal.contains(id))
            .collect();
        if old.is_empty() {
            return Vec::new();
        }
        let dm = self.distance_map(map, &self.temporal, latest);
        let candidates = project_points(map, &old, latest, Some(self.config.max_view_angle_deg));
        greedy_covisible(&dm, &candidates, self.config.n_covisible, self.config.depletion_radius)
    }
}
