//! Flat `key = value` run configuration. Blank lines and `#` comments are
//! ignored; every key can be overridden after parsing.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::flow::SamplerSchedule;
use crate::mdcycle::TrainConfig;
use crate::reward::{CollisionSource, CollisionWeights, ProminenceRule};
use crate::sim::{MotionType, SceneParams, SimSettings};

/// Dataset generation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub seed: u64,
    /// Scenes per family, indexed by [`MotionType::index`].
    pub counts: [usize; 4],
    /// Fraction of each family held out for evaluation.
    pub eval_fraction: f64,
    pub substeps: usize,
    pub scene: SceneParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 1,
            counts: [175; 4],
            eval_fraction: 50.0 / 700.0,
            substeps: SimSettings::default().substeps,
            scene: SceneParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub train: TrainConfig,
    pub data: DataConfig,
    /// Seed of the per-record initial noise used for evaluation sampling.
    pub eval_seed: u64,
    /// Seeds used by ablation sweeps.
    pub ablation_seeds: Vec<u64>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            train: TrainConfig::default(),
            data: DataConfig::default(),
            eval_seed: 7,
            ablation_seeds: vec![0, 1, 2],
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value '{value}' for '{key}'")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse(key, v)).collect()
}

fn list<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn exact<const N: usize>(key: &str, v: Vec<f64>) -> Result<[f64; N]> {
    v.try_into()
        .map_err(|_| Error::Config(format!("'{key}' needs {N} comma-separated values")))
}

impl Config {
    pub fn sim_settings(&self) -> SimSettings {
        SimSettings {
            frames: self.train.frames,
            observed: self.train.observed,
            substeps: self.data.substeps,
        }
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let key = key.trim();
        let value = value.trim();
        match key {
            "seed" => t.seed = parse(key, value)?,
            "frames" => t.frames = parse(key, value)?,
            "observed" => t.observed = parse(key, value)?,
            "grid" => t.grid = parse(key, value)?,
            "hidden" => t.hidden = parse_list(key, value)?,
            "activation" => t.activation = value.parse()?,
            "stage1_steps" => t.stage1_steps = parse(key, value)?,
            "stage1_batch" => t.stage1_batch = parse(key, value)?,
            "stage1_lr" => t.stage1_lr = parse(key, value)?,
            "stage2_iterations" => t.stage2_iterations = parse(key, value)?,
            "stage2_lr" => t.stage2_lr = parse(key, value)?,
            "batch_conditions" => t.batch_conditions = parse(key, value)?,
            "group_size" => t.group_size = parse(key, value)?,
            "clip_eps" => t.clip_eps = parse(key, value)?,
            "beta_kl" => t.beta_kl = parse(key, value)?,
            "threshold" => t.threshold = parse(key, value)?,
            "mimicry_draws" => t.mimicry_draws = parse(key, value)?,
            "weights" => {
                let [w, a, c] = exact::<3>(key, parse_list(key, value)?)?;
                t.weights = CollisionWeights::new(w, a, c);
            }
            "prominence" => {
                t.detector.prominence = match value.split_once(',') {
                    Some((f, floor)) => ProminenceRule::MedianRelative {
                        factor: parse(key, f)?,
                        floor: parse(key, floor)?,
                    },
                    None => ProminenceRule::Absolute(parse(key, value)?),
                }
            }
            "min_distance" => t.detector.min_distance = parse(key, value)?,
            "collision_source" => {
                t.collision_source = match value {
                    "ground_truth" => CollisionSource::GroundTruth,
                    "sample" => CollisionSource::Sample,
                    _ => return Err(Error::Config(format!("bad value '{value}' for '{key}'"))),
                }
            }
            "sampling_steps" => t.schedule.steps = parse(key, value)?,
            "sde_window" => {
                let [lo, hi] = exact::<2>(key, parse_list(key, value)?)?;
                t.schedule.window = (lo, hi);
            }
            "sde_steps" => t.schedule.sde_steps = parse(key, value)?,
            "sigma" => t.schedule.sigma = parse(key, value)?,
            "strategy" => t.strategy = value.parse()?,
            "data_seed" => self.data.seed = parse(key, value)?,
            "counts" => {
                let v: Vec<usize> = parse_list(key, value)?;
                self.data.counts = v
                    .try_into()
                    .map_err(|_| Error::Config("'counts' needs 4 values".into()))?;
            }
            "eval_fraction" => self.data.eval_fraction = parse(key, value)?,
            "substeps" => self.data.substeps = parse(key, value)?,
            "eval_seed" => self.eval_seed = parse(key, value)?,
            "ablation_seeds" => self.ablation_seeds = parse_list(key, value)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{}' is not key=value", o.as_ref())))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k, v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.data.scene.validate()?;
        self.sim_settings().validate().map_err(|e| Error::Config(e.to_string()))?;
        if !(0.0..1.0).contains(&self.data.eval_fraction) {
            return Err(Error::Config("eval_fraction must be in [0, 1)".into()));
        }
        if self.ablation_seeds.is_empty() {
            return Err(Error::Config("ablation_seeds must not be empty".into()));
        }
        Ok(())
    }

    /// Every key with its resolved value, one per line, in a fixed order.
    /// Parsing the output reproduces the configuration.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let prominence = match t.detector.prominence {
            ProminenceRule::Absolute(p) => p.to_string(),
            ProminenceRule::MedianRelative { factor, floor } => format!("{factor},{floor}"),
        };
        let source = match t.collision_source {
            CollisionSource::GroundTruth => "ground_truth",
            CollisionSource::Sample => "sample",
        };
        let activation = match t.activation {
            crate::nn::Activation::Tanh => "tanh",
            crate::nn::Activation::Silu => "silu",
        };
        let entries: Vec<(&str, String)> = vec![
            ("seed", t.seed.to_string()),
            ("frames", t.frames.to_string()),
            ("observed", t.observed.to_string()),
            ("grid", t.grid.to_string()),
            ("hidden", list(&t.hidden)),
            ("activation", activation.into()),
            ("stage1_steps", t.stage1_steps.to_string()),
            ("stage1_batch", t.stage1_batch.to_string()),
            ("stage1_lr", t.stage1_lr.to_string()),
            ("stage2_iterations", t.stage2_iterations.to_string()),
            ("stage2_lr", t.stage2_lr.to_string()),
            ("batch_conditions", t.batch_conditions.to_string()),
            ("group_size", t.group_size.to_string()),
            ("clip_eps", t.clip_eps.to_string()),
            ("beta_kl", t.beta_kl.to_string()),
            ("threshold", t.threshold.to_string()),
            ("mimicry_draws", t.mimicry_draws.to_string()),
            ("weights", list(&[t.weights.base, t.weights.adjacent, t.weights.collision])),
            ("prominence", prominence),
            ("min_distance", t.detector.min_distance.to_string()),
            ("collision_source", source.into()),
            ("sampling_steps", t.schedule.steps.to_string()),
            ("sde_window", list(&[t.schedule.window.0, t.schedule.window.1])),
            ("sde_steps", t.schedule.sde_steps.to_string()),
            ("sigma", t.schedule.sigma.to_string()),
            ("strategy", t.strategy.to_string()),
            ("data_seed", self.data.seed.to_string()),
            ("counts", list(&self.data.counts)),
            ("eval_fraction", self.data.eval_fraction.to_string()),
            ("substeps", self.data.substeps.to_string()),
            ("eval_seed", self.eval_seed.to_string()),
            ("ablation_seeds", list(&self.ablation_seeds)),
        ];
        entries.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Short hash of [`to_text`](Self::to_text).
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn family_count(&self, m: MotionType) -> usize {
        self.data.counts[m.index()]
    }
}

/// Default sampler for the given window, pair size and intensity.
pub fn schedule(window: (f64, f64), sde_steps: usize, sigma: f64) -> SamplerSchedule {
    SamplerSchedule {
        window,
        sde_steps,
        sigma,
        ..SamplerSchedule::default()
    }
}
