//! Benchmark evaluation: mask IoU and unweighted trajectory offset over the
//! eval split, with deterministic ODE sampling.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bench::config::Config;
use crate::bench::dataset::{DatasetRecord, Split};
use crate::error::{invalid, Error, Result};
use crate::flow::{self, CenterFrame, FlowPolicy, Layout};
use crate::mdcycle::Example;
use crate::raster;
use crate::reward;
use crate::rng;
use crate::sim::{MotionType, MAX_BODIES};

pub const IOU_DEFINITION: &str =
    "per-frame per-object mask IoU, averaged over active objects and evaluated frames (last observed frame onward)";

/// Produces a future StateVector for one record.
pub trait Generator: Sync {
    fn generate(&self, record: &DatasetRecord, example: &Example) -> Result<Vec<f64>>;
}

/// ODE sampling from a per-record initial noise keyed by `(seed, id)`.
pub struct PolicyGenerator {
    pub policy: FlowPolicy,
    pub seed: u64,
    pub steps: usize,
}

impl Generator for PolicyGenerator {
    fn generate(&self, record: &DatasetRecord, example: &Example) -> Result<Vec<f64>> {
        let dim = self.policy.layout.state_dim();
        let noise = rng::standard_normal_vec(&mut rng::stream(self.seed, &[record.id]), dim);
        flow::sample_ode(&self.policy, &example.condition, &noise, self.steps)
    }
}

/// Returns the ground-truth future.
pub struct OracleGenerator;

impl Generator for OracleGenerator {
    fn generate(&self, _: &DatasetRecord, example: &Example) -> Result<Vec<f64>> {
        Ok(example.gt_future.clone())
    }
}

/// Every object stays at its last observed position.
pub struct StaticGenerator;

impl Generator for StaticGenerator {
    fn generate(&self, _: &DatasetRecord, example: &Example) -> Result<Vec<f64>> {
        Ok(vec![0.0; example.gt_future.len()])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: u64,
    pub motion_type: MotionType,
    pub iou: f64,
    pub to: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub scope: String,
    pub count: usize,
    pub mean_iou: f64,
    pub mean_to: f64,
}

impl Aggregate {
    fn of<'a>(scope: &str, rows: impl Iterator<Item = &'a EvalRow>) -> Aggregate {
        let (mut n, mut iou, mut to) = (0usize, 0.0, 0.0);
        for r in rows {
            n += 1;
            iou += r.iou;
            to += r.to;
        }
        let d = n.max(1) as f64;
        Aggregate {
            scope: scope.to_string(),
            count: n,
            mean_iou: iou / d,
            mean_to: to / d,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Families present in the split, in [`MotionType::ALL`] order.
    pub families: Vec<Aggregate>,
    pub overall: Aggregate,
    pub fingerprint: String,
    pub seed: u64,
    pub iou_definition: &'static str,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>, fingerprint: String, seed: u64) -> EvalReport {
        let families = MotionType::ALL
            .iter()
            .filter(|m| rows.iter().any(|r| r.motion_type == **m))
            .map(|m| Aggregate::of(m.name(), rows.iter().filter(|r| r.motion_type == *m)))
            .collect();
        let overall = Aggregate::of("all", rows.iter());
        EvalReport {
            rows,
            families,
            overall,
            fingerprint,
            seed,
            iou_definition: IOU_DEFINITION,
        }
    }

    pub fn mean_iou(&self) -> f64 {
        self.overall.mean_iou
    }

    pub fn mean_to(&self) -> f64 {
        self.overall.mean_to
    }

    /// Writes `rows.csv`, `summary.csv` and `report.txt` (metadata and the
    /// resolved configuration) into `dir`.
    pub fn write(&self, dir: &Path, cfg: &Config) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_csv(&dir.join("rows.csv"), &self.rows)?;
        let mut summary = self.families.clone();
        summary.push(self.overall.clone());
        write_csv(&dir.join("summary.csv"), &summary)?;
        let meta = format!(
            "fingerprint = {}\neval_seed = {}\niou = {}\nto = unweighted trajectory offset in pixels\nmean_iou = {}\nmean_to = {}\n\n{}",
            self.fingerprint,
            self.seed,
            self.iou_definition,
            self.overall.mean_iou,
            self.overall.mean_to,
            cfg.to_text()
        );
        let path = dir.join("report.txt");
        std::fs::write(&path, meta).map_err(|e| Error::io(&path, e))
    }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            line: line.unwrap_or(0),
            message: format!("{}: {other:?}", path.display()),
        },
    }
}

fn frames_of(record: &DatasetRecord) -> Vec<CenterFrame> {
    record
        .frames
        .iter()
        .map(|f| std::array::from_fn(|s| record.active[s].then_some(f[s])))
        .collect()
}

/// Mean per-frame per-object mask IoU over evaluated frames.
pub fn mean_iou(
    gt: &[CenterFrame],
    sample: &[CenterFrame],
    radii: &[f64; MAX_BODIES],
    active: &[bool; MAX_BODIES],
    observed: usize,
    grid: usize,
) -> Result<f64> {
    if gt.len() != sample.len() {
        return Err(invalid("frame counts differ"));
    }
    let a = raster::rasterize_frames(gt, radii, active, grid)?;
    let b = raster::rasterize_frames(sample, radii, active, grid)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for f in reward::first_evaluated_frame(observed)..gt.len() {
        for s in (0..MAX_BODIES).filter(|&s| active[s]) {
            sum += raster::mask_iou(&a.frames[f][s], &b.frames[f][s])?;
            n += 1;
        }
    }
    if n == 0 {
        return Err(invalid("no evaluated (object, frame) pairs"));
    }
    Ok(sum / n as f64)
}

pub fn evaluate_record(gen: &dyn Generator, record: &DatasetRecord, cfg: &Config) -> Result<EvalRow> {
    let t = &cfg.train;
    let ex = record.example(t)?;
    let layout: Layout = t.layout();
    let state = gen.generate(record, &ex)?;
    let sample = layout.decode(&state, &ex.condition)?;
    let iou = mean_iou(&frames_of(record), &sample, &record.radii(), &record.active, t.observed, t.grid)?;
    let track = ex.sample_track(&layout, &state, t.grid)?;
    let to = reward::trajectory_offset(&ex.gt_track, &track, t.observed, t.grid)?;
    Ok(EvalRow {
        id: record.id,
        motion_type: record.motion_type,
        iou,
        to,
    })
}

/// Scores every eval-split record in `records`.
pub fn evaluate(gen: &dyn Generator, records: &[DatasetRecord], cfg: &Config) -> Result<EvalReport> {
    let eval: Vec<&DatasetRecord> = records.iter().filter(|r| r.split == Split::Eval).collect();
    if eval.is_empty() {
        return Err(invalid("dataset has no eval split"));
    }
    let rows = crate::par::map(&eval, |r| evaluate_record(gen, r, cfg))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_rows(rows, cfg.fingerprint(), cfg.eval_seed))
}

/// Evaluates a policy with the configured sampling steps and eval seed.
pub fn evaluate_policy(policy: FlowPolicy, records: &[DatasetRecord], cfg: &Config) -> Result<EvalReport> {
    let gen = PolicyGenerator {
        policy,
        seed: cfg.eval_seed,
        steps: cfg.train.schedule.steps,
    };
    evaluate(&gen, records, cfg)
}

/// Per-family means keyed by family name.
pub fn family_means(report: &EvalReport) -> BTreeMap<String, (f64, f64)> {
    report
        .families
        .iter()
        .map(|a| (a.scope.clone(), (a.mean_iou, a.mean_to)))
        .collect()
}
