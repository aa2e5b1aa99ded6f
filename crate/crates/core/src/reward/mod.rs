//! Physics-grounded reward: trajectory offset between ground-truth and
//! generated object centers, collision frames located by acceleration peaks,
//! and per-frame weights that emphasize error around those collisions.
//!
//! Frame indices are 0-based throughout. Positions are in world units;
//! offsets are reported in grid pixels (world distance times the grid size).

pub mod peaks;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geom::Vec2;
use crate::sim::MAX_BODIES;

pub type CenterFrame = [Option<Vec2>; MAX_BODIES];

/// Per-frame, per-slot object centers; absent where an object is not visible.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterTrack {
    pub frames: Vec<CenterFrame>,
    pub active: [bool; MAX_BODIES],
}

impl CenterTrack {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn slot(&self, s: usize) -> Vec<Option<Vec2>> {
        self.frames.iter().map(|f| f[s]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollisionWeights {
    pub base: f64,
    pub adjacent: f64,
    pub collision: f64,
}

impl Default for CollisionWeights {
    fn default() -> Self {
        CollisionWeights {
            base: 1.0,
            adjacent: 2.0,
            collision: 3.0,
        }
    }
}

impl CollisionWeights {
    pub const fn new(base: f64, adjacent: f64, collision: f64) -> Self {
        CollisionWeights {
            base,
            adjacent,
            collision,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.collision >= self.adjacent && self.adjacent >= self.base && self.base >= 0.0) {
            return Err(Error::Config(format!(
                "collision weights must satisfy w_col >= w_adj >= w >= 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Resolved peak-detector thresholds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorParams {
    /// Minimum prominence of an acceleration-magnitude peak, world units / s².
    pub prominence: f64,
    /// Minimum separation of reported peaks, in frames.
    pub min_distance: usize,
}

/// How the prominence threshold is chosen for a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ProminenceRule {
    Absolute(f64),
    /// `max(factor * median(|a|), floor)` over the trajectory being scanned.
    MedianRelative { factor: f64, floor: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorSettings {
    pub prominence: ProminenceRule,
    pub min_distance: usize,
}

/// Default absolute floor on the prominence threshold, world units / s².
/// Mask-center jitter of one pixel per frame² at 64 px and 30 fps is 14.06.
pub const DEFAULT_PROMINENCE_FLOOR: f64 = 16.0;

impl Default for DetectorSettings {
    fn default() -> Self {
        DetectorSettings {
            prominence: ProminenceRule::MedianRelative {
                factor: 3.0,
                floor: DEFAULT_PROMINENCE_FLOOR,
            },
            min_distance: 3,
        }
    }
}

impl DetectorSettings {
    pub fn validate(&self) -> Result<()> {
        let ok = match self.prominence {
            ProminenceRule::Absolute(p) => p > 0.0,
            ProminenceRule::MedianRelative { factor, floor } => factor >= 0.0 && floor > 0.0,
        };
        if !ok || self.min_distance < 1 {
            return Err(Error::Config(format!("invalid detector settings {self:?}")));
        }
        Ok(())
    }

    /// Thresholds for a signal of acceleration magnitudes.
    pub fn resolve(&self, accel_magnitudes: &[f64]) -> DetectorParams {
        let prominence = match self.prominence {
            ProminenceRule::Absolute(p) => p,
            ProminenceRule::MedianRelative { factor, floor } => (factor * median(accel_magnitudes)).max(floor),
        };
        DetectorParams {
            prominence,
            min_distance: self.min_distance,
        }
    }
}

fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Backward differences `(p[n] - p[n-1]) / dt` for `n = 1..len`. Entry `k`
/// belongs to frame `k + 1`; it is absent if either position is absent.
pub fn finite_diff_velocity(positions: &[Option<Vec2>], dt: f64) -> Vec<Option<Vec2>> {
    positions
        .windows(2)
        .map(|w| match (w[0], w[1]) {
            (Some(a), Some(b)) => Some((b - a) * (1.0 / dt)),
            _ => None,
        })
        .collect()
}

/// One further backward difference of [`finite_diff_velocity`] output. Entry
/// `k` belongs to frame `k + 2`.
pub fn finite_diff_accel(velocities: &[Option<Vec2>], dt: f64) -> Vec<Option<Vec2>> {
    finite_diff_velocity(velocities, dt)
}

/// Acceleration magnitudes indexed like [`finite_diff_accel`].
pub fn accel_magnitudes(positions: &[Option<Vec2>], dt: f64) -> Vec<Option<f64>> {
    finite_diff_accel(&finite_diff_velocity(positions, dt), dt)
        .into_iter()
        .map(|a| a.map(Vec2::norm))
        .collect()
}

/// Frames where the acceleration magnitude spikes.
///
/// Peaks are located on `|a|` and shifted by two frames to undo the two
/// difference operations. Absent positions split the signal into segments
/// scanned independently. Fewer than four present positions yields nothing.
pub fn detect_collisions(positions: &[Option<Vec2>], dt: f64, params: &DetectorParams) -> BTreeSet<usize> {
    let mut out = BTreeSet::new();
    if positions.iter().filter(|p| p.is_some()).count() < 4 {
        return out;
    }
    let mags = accel_magnitudes(positions, dt);
    let mut start = 0;
    while start < mags.len() {
        if mags[start].is_none() {
            start += 1;
            continue;
        }
        let mut end = start;
        while end < mags.len() && mags[end].is_some() {
            end += 1;
        }
        let segment: Vec<f64> = mags[start..end].iter().map(|m| m.unwrap()).collect();
        for p in peaks::find_peaks(&segment, params.prominence, params.min_distance) {
            out.insert(start + p + 2);
        }
        start = end;
    }
    out
}

/// Detection with a per-trajectory prominence threshold.
pub fn detect_collisions_with(positions: &[Option<Vec2>], dt: f64, settings: &DetectorSettings) -> BTreeSet<usize> {
    let mags: Vec<f64> = accel_magnitudes(positions, dt).into_iter().flatten().collect();
    detect_collisions(positions, dt, &settings.resolve(&mags))
}

/// Union of per-object collision frames over the active slots.
pub fn detect_track_collisions(track: &CenterTrack, dt: f64, settings: &DetectorSettings) -> BTreeSet<usize> {
    let mut out = BTreeSet::new();
    for s in 0..MAX_BODIES {
        if track.active[s] {
            out.extend(detect_collisions_with(&track.slot(s), dt, settings));
        }
    }
    out
}

/// Frames adjacent to a collision frame that are not collision frames,
/// restricted to `0..frames`.
pub fn adjacent_frames(collisions: &BTreeSet<usize>, frames: usize) -> BTreeSet<usize> {
    let mut adj = BTreeSet::new();
    for &t in collisions {
        if t > 0 {
            adj.insert(t - 1);
        }
        adj.insert(t + 1);
    }
    adj.retain(|t| *t < frames && !collisions.contains(t));
    adj
}

/// Per-frame weights: `collision` on collision frames, `adjacent` on their
/// neighbours, `base` elsewhere.
pub fn temporal_weights(collisions: &BTreeSet<usize>, frames: usize, cw: &CollisionWeights) -> Vec<f64> {
    let adj = adjacent_frames(collisions, frames);
    (0..frames)
        .map(|t| {
            if collisions.contains(&t) {
                cw.collision
            } else if adj.contains(&t) {
                cw.adjacent
            } else {
                cw.base
            }
        })
        .collect()
}

/// First evaluated frame: the last observed frame.
pub fn first_evaluated_frame(observed: usize) -> usize {
    observed.saturating_sub(1)
}

fn check_pair(gt: &CenterTrack, sample: &CenterTrack) -> Result<()> {
    if gt.len() != sample.len() {
        return Err(invalid(format!(
            "trajectory lengths differ: {} vs {}",
            gt.len(),
            sample.len()
        )));
    }
    Ok(())
}

/// Per-frame object-averaged distances in pixels plus the term count used
/// for normalization. Absent sample centers cost the grid diagonal.
fn frame_distances(gt: &CenterTrack, sample: &CenterTrack, observed: usize, grid: usize) -> (Vec<f64>, usize) {
    let g = grid as f64;
    let penalty = std::f64::consts::SQRT_2 * g;
    let mut per_frame = vec![0.0; gt.len()];
    let mut terms = 0;
    for t in first_evaluated_frame(observed)..gt.len() {
        for s in 0..MAX_BODIES {
            if !gt.active[s] {
                continue;
            }
            let Some(p) = gt.frames[t][s] else { continue };
            let d = match sample.frames[t][s] {
                Some(q) => (p - q).norm() * g,
                None => penalty,
            };
            per_frame[t] += d;
            terms += 1;
        }
    }
    (per_frame, terms)
}

/// Weighted trajectory offset in pixels over frames `observed - 1 ..`,
/// normalized by the number of (object, frame) terms.
pub fn weighted_offset(
    gt: &CenterTrack,
    sample: &CenterTrack,
    weights: &[f64],
    observed: usize,
    grid: usize,
) -> Result<f64> {
    check_pair(gt, sample)?;
    if weights.len() != gt.len() {
        return Err(Error::Dimension {
            expected: gt.len(),
            actual: weights.len(),
        });
    }
    let (per_frame, terms) = frame_distances(gt, sample, observed, grid);
    if terms == 0 {
        return Ok(0.0);
    }
    let sum: f64 = per_frame.iter().zip(weights).map(|(d, w)| d * w).sum();
    Ok(sum / terms as f64)
}

/// Unweighted trajectory offset in pixels.
pub fn trajectory_offset(gt: &CenterTrack, sample: &CenterTrack, observed: usize, grid: usize) -> Result<f64> {
    weighted_offset(gt, sample, &vec![1.0; gt.len()], observed, grid)
}

pub fn reward(weighted_offset: f64) -> f64 {
    -weighted_offset
}

pub fn group_mean_offset(offsets: &[f64]) -> Result<f64> {
    if offsets.is_empty() {
        return Err(invalid("group mean of an empty list"));
    }
    Ok(offsets.iter().sum::<f64>() / offsets.len() as f64)
}

/// Which trajectory supplies the collision frames for the weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollisionSource {
    GroundTruth,
    Sample,
}

/// Full scoring of one sample against ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetReport {
    pub per_frame_offsets: Vec<f64>,
    pub collision_frames: BTreeSet<usize>,
    pub adjacent_frames: BTreeSet<usize>,
    pub weights: Vec<f64>,
    pub offset: f64,
    pub weighted_offset: f64,
    pub reward: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardSettings {
    pub weights: CollisionWeights,
    pub detector: DetectorSettings,
    pub source: CollisionSource,
    pub grid: usize,
    pub observed: usize,
    pub dt: f64,
}

/// Scores `sample` against `gt`. `gt_collisions` is used when the collision
/// source is the ground truth; otherwise detection runs on the sample.
pub fn score(
    gt: &CenterTrack,
    sample: &CenterTrack,
    gt_collisions: &BTreeSet<usize>,
    settings: &RewardSettings,
) -> Result<OffsetReport> {
    check_pair(gt, sample)?;
    let collisions = match settings.source {
        CollisionSource::GroundTruth => gt_collisions.clone(),
        CollisionSource::Sample => detect_track_collisions(sample, settings.dt, &settings.detector),
    };
    let weights = temporal_weights(&collisions, gt.len(), &settings.weights);
    let (per_frame, terms) = frame_distances(gt, sample, settings.observed, settings.grid);
    let norm = if terms == 0 { 1.0 } else { terms as f64 };
    let offset = per_frame.iter().sum::<f64>() / norm;
    let weighted = per_frame.iter().zip(&weights).map(|(d, w)| d * w).sum::<f64>() / norm;
    let objects = gt.active.iter().filter(|a| **a).count().max(1) as f64;
    Ok(OffsetReport {
        per_frame_offsets: per_frame.iter().map(|d| d / objects).collect(),
        adjacent_frames: adjacent_frames(&collisions, gt.len()),
        collision_frames: collisions,
        weights,
        offset,
        weighted_offset: weighted,
        reward: reward(weighted),
    })
}
