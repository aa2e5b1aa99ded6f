use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rigidflow::bench::ablation::{self, AblationKind};
use rigidflow::bench::dataset::{self, Split};
use rigidflow::bench::{eval, plot, Config};
use rigidflow::flow::FlowPolicy;
use rigidflow::mdcycle::{self, Strategy};
use rigidflow::nn::Checkpoint;
use rigidflow::{Error, Result};

#[derive(Parser)]
#[command(name = "rigidflow", version, about = "Flow-matching trajectory generator with physics-grounded RL")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides one configuration key, e.g. `--set sigma=0.6`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulates a dataset and writes it as JSON lines.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Stage 1: flow-matching training on the train split.
    TrainFm {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint at `--out`.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Stage 2: group rollouts with the configured strategy.
    TrainMdcycle {
        #[arg(long)]
        data: PathBuf,
        /// Stage-1 checkpoint, or a stage-2 checkpoint to resume.
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training log CSV.
        #[arg(long)]
        log: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Benchmarks a checkpoint on the eval split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Score the ground truth itself.
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Runs one ablation sweep over the configured seeds.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// strategy, collision_weight, sde_interval, noise, threshold or schedule.
        #[arg(long)]
        name: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Reward and gate-rate charts from a training log.
    Plot {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(path) => Config::from_text(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)?,
        None => Config::default(),
    };
    cfg.apply_overrides(&common.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn train_examples(data: &Path, cfg: &Config) -> Result<Vec<mdcycle::Example>> {
    let records = dataset::read_jsonl(data)?;
    let train = dataset::split(&records, Split::Train);
    if train.is_empty() {
        return Err(Error::Invalid(format!("{} has no train split", data.display())));
    }
    dataset::examples(&train, &cfg.train)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { out, common } => {
            let cfg = load_config(&common)?;
            let records = dataset::gen_dataset(&cfg)?;
            dataset::verify_dataset(&records)?;
            dataset::write_jsonl(&out, &records)?;
            let n_eval = records.iter().filter(|r| r.split == Split::Eval).count();
            println!("{} records ({} eval) -> {}", records.len(), n_eval, out.display());
        }
        Command::TrainFm {
            data,
            out,
            resume,
            common,
        } => {
            let cfg = load_config(&common)?;
            let examples = train_examples(&data, &cfg)?;
            let mut ck = if resume {
                Checkpoint::load(&out)?
            } else {
                mdcycle::init_checkpoint(&cfg.train)?
            };
            let losses = mdcycle::train_stage1(&examples, &cfg.train, &mut ck, cfg.train.stage1_steps)?;
            ck.save(&out)?;
            let tail = &losses[losses.len().saturating_sub(50)..];
            let mean = tail.iter().sum::<f64>() / tail.len().max(1) as f64;
            println!(
                "stage 1: {} steps done, recent loss {mean:.5}, config {} -> {}",
                ck.steps_done,
                cfg.fingerprint(),
                out.display()
            );
        }
        Command::TrainMdcycle {
            data,
            init,
            out,
            log,
            common,
        } => {
            let cfg = load_config(&common)?;
            if cfg.train.strategy == Strategy::FineTune {
                return Err(Error::Config("strategy ft has no stage 2; use ft+rl or ft+md".into()));
            }
            let examples = train_examples(&data, &cfg)?;
            let start = Checkpoint::load(&init)?;
            let (mut ck, mut rows) = if start.reference.is_some() {
                let prior = if log.exists() { plot::read_log(&log)? } else { Vec::new() };
                (start, prior)
            } else {
                (mdcycle::begin_stage2(&start, &cfg.train)?, Vec::new())
            };
            rows.extend(mdcycle::train_stage2(&examples, &cfg.train, &mut ck, cfg.train.stage2_iterations)?);
            ck.save(&out)?;
            plot::write_log(&log, &rows)?;
            let alpha = rows.iter().map(|r| r.alpha as f64).sum::<f64>() / rows.len().max(1) as f64;
            println!(
                "stage 2 ({}): {} iterations done, alpha rate {alpha:.3} -> {}",
                cfg.train.strategy,
                ck.steps_done,
                out.display()
            );
        }
        Command::Eval {
            data,
            checkpoint,
            oracle,
            out,
            common,
        } => {
            let cfg = load_config(&common)?;
            let records = dataset::read_jsonl(&data)?;
            let report = match checkpoint {
                Some(path) if !oracle => {
                    let ck = Checkpoint::load(&path)?;
                    eval::evaluate_policy(FlowPolicy::new(ck.net, cfg.train.layout())?, &records, &cfg)?
                }
                _ => eval::evaluate(&eval::OracleGenerator, &records, &cfg)?,
            };
            report.write(&out, &cfg)?;
            for a in report.families.iter().chain([&report.overall]) {
                println!("{:<10} n={:<4} IoU {:.4}  TO {:.3}", a.scope, a.count, a.mean_iou, a.mean_to);
            }
        }
        Command::Ablate { data, name, out, common } => {
            let cfg = load_config(&common)?;
            let kind: AblationKind = name.parse()?;
            let records = dataset::read_jsonl(&data)?;
            let table = ablation::run_ablation(kind, &cfg, &records)?;
            table.write(&out)?;
            for r in &table.rows {
                println!(
                    "{:<16} IoU {:.4} +- {:.4}  TO {:.3} +- {:.3}",
                    r.setting, r.iou_mean, r.iou_std, r.to_mean, r.to_std
                );
            }
        }
        Command::Plot { log, out } => {
            let rows = plot::read_log(&log)?;
            plot::emit_plots(&rows, &out)?;
            println!("{} rows -> {}", rows.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
