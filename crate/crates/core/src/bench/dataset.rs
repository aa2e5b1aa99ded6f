//! Simulated datasets as JSON lines, one record per scene.
//!
//! Each record carries the full initial scene and simulation settings, so the
//! stored frames can be regenerated and compared bit for bit.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bench::config::Config;
use crate::error::{invalid, Error, Result};
use crate::flow::CenterFrame;
use crate::geom::Vec2;
use crate::mdcycle::{Example, TrainConfig};
use crate::raster;
use crate::rng;
use crate::sim::{self, MotionType, Scene, SimSettings, Trajectory, MAX_BODIES};

pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BodyDescriptor {
    pub radius: f64,
    pub mass: f64,
    pub restitution: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub version: u32,
    pub id: u64,
    pub motion_type: MotionType,
    pub fps: f64,
    pub grid: usize,
    /// One entry per slot; inactive slots keep placeholder values.
    pub bodies: [BodyDescriptor; MAX_BODIES],
    pub active: [bool; MAX_BODIES],
    pub frames: Vec<[Vec2; MAX_BODIES]>,
    /// Mask centers of frame 0, absent for inactive slots.
    pub first_frame_centers: CenterFrame,
    pub split: Split,
    pub scene_seed: u64,
    pub scene: Scene,
    pub substeps: usize,
    pub observed: usize,
}

impl DatasetRecord {
    pub fn radii(&self) -> [f64; MAX_BODIES] {
        std::array::from_fn(|s| self.bodies[s].radius)
    }

    pub fn sim_settings(&self) -> SimSettings {
        SimSettings {
            frames: self.frames.len(),
            observed: self.observed,
            substeps: self.substeps,
        }
    }

    pub fn trajectory(&self) -> Trajectory {
        Trajectory {
            frames: self.frames.clone(),
            active: self.active,
            fps: self.fps,
            observed: self.observed,
        }
    }

    /// Trainer input for this record under `cfg`.
    pub fn example(&self, cfg: &TrainConfig) -> Result<Example> {
        if self.frames.len() != cfg.frames || self.observed != cfg.observed {
            return Err(invalid(format!(
                "record {} has {}/{} frames, config expects {}/{}",
                self.id,
                self.observed,
                self.frames.len(),
                cfg.observed,
                cfg.frames
            )));
        }
        Example::new(&self.trajectory(), self.radii(), self.motion_type, &cfg.layout(), cfg.grid, &cfg.detector)
    }
}

/// Number of eval records in a family of `n`.
pub fn eval_count(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).round() as usize).min(n)
}

fn record(cfg: &Config, motion_type: MotionType, id: u64, index: usize, split: Split) -> Result<DatasetRecord> {
    let scene_seed = rng::derive_seed(cfg.data.seed, &[motion_type.index() as u64, index as u64]);
    let scene = sim::make_scene(motion_type, scene_seed, &cfg.data.scene)?;
    let settings = cfg.sim_settings();
    let traj = sim::simulate(&scene, &settings)?;
    let grid = cfg.train.grid;
    let first_frame_centers = std::array::from_fn(|s| {
        if !scene.active[s] {
            return None;
        }
        raster::rasterize(traj.frames[0][s], scene.bodies[s].radius, grid)
            .ok()
            .and_then(|m| raster::center(&m))
    });
    Ok(DatasetRecord {
        version: DATASET_VERSION,
        id,
        motion_type,
        fps: scene.fps,
        grid,
        bodies: std::array::from_fn(|s| BodyDescriptor {
            radius: scene.bodies[s].radius,
            mass: scene.bodies[s].mass,
            restitution: scene.bodies[s].restitution,
        }),
        active: scene.active,
        frames: traj.frames,
        first_frame_centers,
        split,
        scene_seed,
        substeps: settings.substeps,
        observed: settings.observed,
        scene,
    })
}

/// Records for every family in [`MotionType::ALL`] order. Ids are consecutive;
/// the last [`eval_count`] records of each family form the eval split.
pub fn gen_dataset(cfg: &Config) -> Result<Vec<DatasetRecord>> {
    cfg.validate()?;
    let mut jobs = Vec::new();
    for m in MotionType::ALL {
        let n = cfg.family_count(m);
        let n_eval = eval_count(n, cfg.data.eval_fraction);
        for k in 0..n {
            let split = if k >= n - n_eval { Split::Eval } else { Split::Train };
            jobs.push((m, k, split));
        }
    }
    crate::par::map_range(jobs.len(), |i| {
        let (m, k, split) = jobs[i];
        record(cfg, m, i as u64, k, split)
    })
    .into_iter()
    .collect()
}

pub fn split(records: &[DatasetRecord], which: Split) -> Vec<DatasetRecord> {
    records.iter().filter(|r| r.split == which).cloned().collect()
}

pub fn examples(records: &[DatasetRecord], cfg: &TrainConfig) -> Result<Vec<Example>> {
    crate::par::map(records, |r| r.example(cfg)).into_iter().collect()
}

pub fn to_jsonl(records: &[DatasetRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(to_jsonl(records).as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Parses JSON lines; blank lines are skipped. Errors carry 1-based line numbers.
pub fn parse_jsonl(reader: impl BufRead) -> Result<Vec<DatasetRecord>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line_no = n as u64 + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if rec.version != DATASET_VERSION {
            return Err(Error::Parse {
                line: line_no,
                message: format!("unsupported record version {}", rec.version),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<DatasetRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(BufReader::new(file))
}

/// Checks that re-simulating the stored scene reproduces the stored frames
/// exactly and that first-frame centers lie within `1/G` of frame 0.
pub fn verify_record(rec: &DatasetRecord) -> Result<()> {
    let traj = sim::simulate(&rec.scene, &rec.sim_settings())?;
    if traj.frames != rec.frames || traj.active != rec.active {
        return Err(Error::Validation(format!("record {} does not replay", rec.id)));
    }
    let tol = 1.0 / rec.grid as f64;
    for s in 0..MAX_BODIES {
        match (rec.active[s], rec.first_frame_centers[s]) {
            (true, Some(c)) if (c - rec.frames[0][s]).norm() <= tol => {}
            (false, None) => {}
            _ => {
                return Err(Error::Validation(format!(
                    "record {} slot {s}: first-frame center off by more than 1/G",
                    rec.id
                )))
            }
        }
    }
    Ok(())
}

/// Checks every record and that ids are unique, so the splits are disjoint.
pub fn verify_dataset(records: &[DatasetRecord]) -> Result<()> {
    let mut ids: Vec<u64> = records.iter().map(|r| r.id).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Validation("duplicate record ids".into()));
    }
    crate::par::map(records, verify_record).into_iter().collect()
}
