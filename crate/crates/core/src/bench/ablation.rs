//! Configuration sweeps over training strategy, reward weights, SDE window,
//! noise intensity, gate threshold and stage schedule, repeated over seeds.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::bench::config::Config;
use crate::bench::dataset::{self, DatasetRecord, Split};
use crate::bench::eval::{self, write_csv, EvalReport};
use crate::bench::plot::{self, Series};
use crate::error::{invalid, Error, Result};
use crate::flow::FlowPolicy;
use crate::mdcycle::{self, LogRow, Strategy, TrainConfig};
use crate::nn::Checkpoint;
use crate::reward::CollisionWeights;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AblationKind {
    Strategy,
    CollisionWeight,
    SdeInterval,
    Noise,
    Threshold,
    Schedule,
}

impl AblationKind {
    pub const ALL: [AblationKind; 6] = [
        AblationKind::Strategy,
        AblationKind::CollisionWeight,
        AblationKind::SdeInterval,
        AblationKind::Noise,
        AblationKind::Threshold,
        AblationKind::Schedule,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationKind::Strategy => "strategy",
            AblationKind::CollisionWeight => "collision_weight",
            AblationKind::SdeInterval => "sde_interval",
            AblationKind::Noise => "noise",
            AblationKind::Threshold => "threshold",
            AblationKind::Schedule => "schedule",
        }
    }
}

impl fmt::Display for AblationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}`")))
    }
}

/// One sweep cell: a label and the configuration it trains with.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub label: String,
    pub train: TrainConfig,
}

/// Cells of a sweep around `base`. Thresholds are quoted in reference-frame
/// pixels; schedule rows scale stage 1 by 6/16, 1 and 30/16 of the base.
pub fn cells(kind: AblationKind, base: &TrainConfig) -> Vec<Cell> {
    let with = |label: String, f: &dyn Fn(&mut TrainConfig)| {
        let mut train = base.clone();
        f(&mut train);
        Cell { label, train }
    };
    match kind {
        AblationKind::Strategy => Strategy::ALL
            .iter()
            .map(|&s| with(s.name().into(), &|t| t.strategy = s))
            .collect(),
        AblationKind::CollisionWeight => [(1.0, 1.0, 1.0), (1.0, 2.0, 3.0), (1.0, 2.0, 4.0), (1.0, 2.0, 5.0)]
            .iter()
            .map(|&(w, a, c)| with(format!("({w},{a},{c})"), &|t| t.weights = CollisionWeights::new(w, a, c)))
            .collect(),
        AblationKind::SdeInterval => [(0.75, 2), (0.5, 2), (0.25, 2), (0.0, 16)]
            .iter()
            .map(|&(lo, k)| {
                with(format!("{:.0}%-100%/{k}", lo * 100.0), &|t| {
                    t.schedule.window = (lo, 1.0);
                    t.schedule.sde_steps = k.min(t.schedule.steps);
                })
            })
            .collect(),
        AblationKind::Noise => [0.2, 0.6, 1.0, 1.4]
            .iter()
            .map(|&s| with(format!("sigma={s}"), &|t| t.schedule.sigma = s))
            .collect(),
        AblationKind::Threshold => [4.0, 8.0, 12.0]
            .iter()
            .map(|&px| with(format!("{px}px"), &|t| t.threshold = mdcycle::threshold_from_reference_px(px)))
            .collect(),
        AblationKind::Schedule => [(6.0, "6/16"), (16.0, "16/16"), (30.0, "30/16")]
            .iter()
            .map(|&(m, name)| {
                with(format!("stage1 x{name}"), &|t| {
                    t.stage1_steps = ((base.stage1_steps as f64 * m / 16.0).round() as usize).max(1)
                })
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellStats {
    pub setting: String,
    pub iou_mean: f64,
    pub iou_std: f64,
    pub to_mean: f64,
    pub to_std: f64,
    pub seeds: usize,
}

/// Result of one cell under one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Run {
    pub label: String,
    pub seed: u64,
    pub report: EvalReport,
    pub log: Vec<LogRow>,
    pub stage1_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub kind: AblationKind,
    pub rows: Vec<CellStats>,
    pub runs: Vec<Run>,
}

/// Sample mean and standard deviation (n - 1); std is 0 for one value.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl AblationTable {
    pub fn runs_of<'a>(&'a self, label: &'a str) -> impl Iterator<Item = &'a Run> + 'a {
        self.runs.iter().filter(move |r| r.label == label)
    }

    pub fn row(&self, label: &str) -> Option<&CellStats> {
        self.rows.iter().find(|r| r.setting == label)
    }

    /// Seed-averaged per-iteration mean reward of one cell.
    pub fn mean_reward_curve(&self, label: &str) -> Vec<(f64, f64)> {
        let curves: Vec<Vec<(f64, f64)>> = self
            .runs_of(label)
            .map(|r| plot::per_iteration(&r.log, |row| row.mean_reward))
            .filter(|c| !c.is_empty())
            .collect();
        let Some(len) = curves.iter().map(Vec::len).min() else {
            return Vec::new();
        };
        (0..len)
            .map(|i| {
                let y = curves.iter().map(|c| c[i].1).sum::<f64>() / curves.len() as f64;
                (curves[0][i].0, y)
            })
            .collect()
    }

    /// Writes `table.csv`, per-run eval rows, stage-2 logs and, when any
    /// cell has a stage-2 log, `reward.svg` comparing the cells.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_csv(&dir.join("table.csv"), &self.rows)?;
        for run in &self.runs {
            let stem = format!("{}_seed{}", sanitize(&run.label), run.seed);
            write_csv(&dir.join(format!("{stem}_eval.csv")), &run.report.rows)?;
            if !run.log.is_empty() {
                plot::write_log(&dir.join(format!("{stem}_log.csv")), &run.log)?;
            }
        }
        let series: Vec<Series> = self
            .rows
            .iter()
            .map(|r| Series {
                name: r.setting.clone(),
                points: self.mean_reward_curve(&r.setting),
            })
            .filter(|s| !s.points.is_empty())
            .collect();
        if !series.is_empty() {
            let path = dir.join("reward.svg");
            let svg = plot::line_chart(&format!("{} sweep: mean reward", self.kind), "iteration", "reward", &series);
            std::fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect()
}

/// Stage-1 checkpoints at each requested step count, from one run.
/// Stage-1 randomness is keyed by step, so a snapshot at `n` equals a
/// separate run of `n` steps.
pub fn stage1_snapshots(
    examples: &[mdcycle::Example],
    cfg: &TrainConfig,
    steps: &[usize],
) -> Result<BTreeMap<usize, (Checkpoint, Vec<f64>)>> {
    let mut sorted = steps.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut run_cfg = cfg.clone();
    run_cfg.stage1_steps = sorted.last().copied().unwrap_or(0);
    let mut ck = mdcycle::init_checkpoint(&run_cfg)?;
    let mut losses = Vec::new();
    let mut out = BTreeMap::new();
    for n in sorted {
        losses.extend(mdcycle::train_stage1(examples, &run_cfg, &mut ck, n)?);
        out.insert(n, (ck.clone(), losses.clone()));
    }
    Ok(out)
}

/// Trains and evaluates every cell of the sweep under every seed in
/// `cfg.ablation_seeds`. Training uses the train split, evaluation the eval
/// split. Cells sharing a stage-1 configuration share its checkpoint.
pub fn run_ablation(kind: AblationKind, cfg: &Config, records: &[DatasetRecord]) -> Result<AblationTable> {
    cfg.validate()?;
    let train_records = dataset::split(records, Split::Train);
    if train_records.is_empty() {
        return Err(invalid("dataset has no train split"));
    }
    let examples = dataset::examples(&train_records, &cfg.train)?;
    let cells = cells(kind, &cfg.train);
    let mut runs = Vec::new();
    for &seed in &cfg.ablation_seeds {
        let mut base = cfg.train.clone();
        base.seed = seed;
        let steps: Vec<usize> = cells.iter().map(|c| c.train.stage1_steps).collect();
        let snapshots = stage1_snapshots(&examples, &base, &steps)?;
        for cell in &cells {
            let mut tcfg = cell.train.clone();
            tcfg.seed = seed;
            let (stage1, losses) = &snapshots[&tcfg.stage1_steps];
            let (ck, log) = if tcfg.strategy == Strategy::FineTune {
                (stage1.clone(), Vec::new())
            } else {
                let mut ck = mdcycle::begin_stage2(stage1, &tcfg)?;
                let log = mdcycle::train_stage2(&examples, &tcfg, &mut ck, tcfg.stage2_iterations)?;
                (ck, log)
            };
            let mut ecfg = cfg.clone();
            ecfg.train = tcfg.clone();
            let policy = FlowPolicy::new(ck.net, tcfg.layout())?;
            let report = eval::evaluate_policy(policy, records, &ecfg)?;
            log::info!(
                "{kind} {} seed {seed}: IoU {:.4} TO {:.3}",
                cell.label,
                report.mean_iou(),
                report.mean_to()
            );
            runs.push(Run {
                label: cell.label.clone(),
                seed,
                report,
                log,
                stage1_losses: losses.clone(),
            });
        }
    }
    let rows = cells
        .iter()
        .map(|c| {
            let ious: Vec<f64> = runs.iter().filter(|r| r.label == c.label).map(|r| r.report.mean_iou()).collect();
            let tos: Vec<f64> = runs.iter().filter(|r| r.label == c.label).map(|r| r.report.mean_to()).collect();
            let (iou_mean, iou_std) = mean_std(&ious);
            let (to_mean, to_std) = mean_std(&tos);
            CellStats {
                setting: c.label.clone(),
                iou_mean,
                iou_std,
                to_mean,
                to_std,
                seeds: ious.len(),
            }
        })
        .collect();
    Ok(AblationTable { kind, rows, runs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweeps_cover_reference_settings() {
        let base = TrainConfig::default();
        let labels = |k| cells(k, &base).into_iter().map(|c| c.label).collect::<Vec<_>>();
        assert_eq!(labels(AblationKind::Strategy), ["ft", "ft+rl", "ft+md"]);
        let w: Vec<_> = cells(AblationKind::CollisionWeight, &base)
            .iter()
            .map(|c| (c.train.weights.base, c.train.weights.adjacent, c.train.weights.collision))
            .collect();
        assert_eq!(w, [(1.0, 1.0, 1.0), (1.0, 2.0, 3.0), (1.0, 2.0, 4.0), (1.0, 2.0, 5.0)]);
        let s: Vec<_> = cells(AblationKind::Noise, &base).iter().map(|c| c.train.schedule.sigma).collect();
        assert_eq!(s, [0.2, 0.6, 1.0, 1.4]);
        let win: Vec<_> = cells(AblationKind::SdeInterval, &base)
            .iter()
            .map(|c| (c.train.schedule.window, c.train.schedule.sde_steps))
            .collect();
        assert_eq!(win, [((0.75, 1.0), 2), ((0.5, 1.0), 2), ((0.25, 1.0), 2), ((0.0, 1.0), 16)]);
        for c in cells(AblationKind::SdeInterval, &base) {
            c.train.validate().unwrap();
        }
        let th: Vec<_> = cells(AblationKind::Threshold, &base).iter().map(|c| c.train.threshold).collect();
        assert_eq!(th[1], mdcycle::default_threshold());
        assert!((th[0] * 3.0 - th[2]).abs() < 1e-15);
        let mut b = base.clone();
        b.stage1_steps = 1600;
        let st: Vec<_> = cells(AblationKind::Schedule, &b).iter().map(|c| c.train.stage1_steps).collect();
        assert_eq!(st, [600, 1600, 3000]);
        for k in AblationKind::ALL {
            assert_eq!(k.name().parse::<AblationKind>().unwrap(), k);
        }
        assert!("bogus".parse::<AblationKind>().is_err());
    }

    #[test]
    fn mean_std_matches_hand_values() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn tiny_strategy_sweep_has_three_rows() {
        let mut cfg = Config::default();
        cfg.data.counts = [3; 4];
        cfg.data.eval_fraction = 0.34;
        cfg.ablation_seeds = vec![0, 1];
        cfg.train.hidden = vec![16];
        cfg.train.stage1_steps = 4;
        cfg.train.stage1_batch = 2;
        cfg.train.stage2_iterations = 2;
        cfg.train.group_size = 3;
        cfg.train.batch_conditions = 2;
        let recs = dataset::gen_dataset(&cfg).unwrap();
        let table = run_ablation(AblationKind::Strategy, &cfg, &recs).unwrap();
        assert_eq!(table.rows.len(), 3);
        assert_eq!(table.runs.len(), 6);
        for r in &table.rows {
            assert_eq!(r.seeds, 2);
            assert!(r.to_mean >= 0.0 && (0.0..=1.0).contains(&r.iou_mean));
        }
        assert!(table.runs_of("ft").all(|r| r.log.is_empty()));
        assert!(table.runs_of("ft+md").all(|r| r.log.len() == 4));
        assert_eq!(table.mean_reward_curve("ft+rl").len(), 2);
        let dir = tempfile::tempdir().unwrap();
        table.write(dir.path()).unwrap();
        assert!(dir.path().join("table.csv").exists() && dir.path().join("reward.svg").exists());
        let stage1: Vec<_> = table.runs_of("ft").map(|r| r.stage1_losses.clone()).collect();
        assert_eq!(table.runs_of("ft+md").map(|r| r.stage1_losses.clone()).collect::<Vec<_>>(), stage1);
    }

    #[test]
    fn snapshot_equals_direct_run() {
        let mut cfg = Config::default();
        cfg.data.counts = [2; 4];
        cfg.train.hidden = vec![8];
        cfg.train.stage1_batch = 2;
        let recs = dataset::gen_dataset(&cfg).unwrap();
        let exs = dataset::examples(&recs, &cfg.train).unwrap();
        let snaps = stage1_snapshots(&exs, &cfg.train, &[3, 7]).unwrap();
        let mut direct = cfg.train.clone();
        direct.stage1_steps = 3;
        let mut ck = mdcycle::init_checkpoint(&direct).unwrap();
        mdcycle::train_stage1(&exs, &direct, &mut ck, 3).unwrap();
        assert_eq!(ck.net, snaps[&3].0.net);
        assert_eq!(snaps[&7].1.len(), 7);
    }
}
