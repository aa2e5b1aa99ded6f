//! Two-stage training: flow-matching pretraining, then group rollouts scored
//! by the physics reward and optimized with a clipped group-relative policy
//! objective, gated with a flow-matching mimicry term on the ground truth.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::flow::{self, Condition, FlowPolicy, Layout, SamplerSchedule, TransitionRecord, VelocityModel};
use crate::nn::{Activation, Adam, Checkpoint, DenseNet};
use crate::raster;
use crate::reward::{self, CenterTrack, CollisionSource, CollisionWeights, DetectorSettings, RewardSettings};
use crate::rng::{self, Rng};
use crate::sim::{MotionType, Trajectory, MAX_BODIES};
use crate::{par, Vec2};

/// A pixel distance on the 480 x 832 reference frame as a fraction of its
/// diagonal.
pub fn threshold_from_reference_px(px: f64) -> f64 {
    px / (480.0f64 * 480.0 + 832.0 * 832.0).sqrt()
}

/// 8 px on the reference frame.
pub fn default_threshold() -> f64 {
    threshold_from_reference_px(8.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    /// Stage 1 only.
    FineTune,
    /// Stage 2 with the mimicry branch disabled.
    Rl,
    /// Stage 2 with the threshold-gated mimicry branch.
    MdCycle,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::FineTune, Strategy::Rl, Strategy::MdCycle];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::FineTune => "ft",
            Strategy::Rl => "ft+rl",
            Strategy::MdCycle => "ft+md",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ft" => Ok(Strategy::FineTune),
            "ft+rl" | "rl" => Ok(Strategy::Rl),
            "ft+md" | "md" | "mdcycle" => Ok(Strategy::MdCycle),
            _ => Err(Error::Config(format!("unknown strategy '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub frames: usize,
    pub observed: usize,
    pub grid: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub stage1_steps: usize,
    pub stage1_batch: usize,
    pub stage1_lr: f64,
    pub stage2_iterations: usize,
    pub stage2_lr: f64,
    pub batch_conditions: usize,
    pub group_size: usize,
    pub clip_eps: f64,
    pub beta_kl: f64,
    /// Mimicry gate as a fraction of the grid diagonal.
    pub threshold: f64,
    pub mimicry_draws: usize,
    pub weights: CollisionWeights,
    pub detector: DetectorSettings,
    pub collision_source: CollisionSource,
    pub schedule: SamplerSchedule,
    pub strategy: Strategy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            frames: 30,
            observed: 5,
            grid: raster::DEFAULT_GRID,
            hidden: vec![256, 256],
            activation: Activation::Silu,
            stage1_steps: 4000,
            stage1_batch: 32,
            stage1_lr: 1e-3,
            stage2_iterations: 100,
            stage2_lr: 1e-4,
            batch_conditions: 4,
            group_size: 20,
            clip_eps: 0.2,
            beta_kl: 0.01,
            threshold: default_threshold(),
            mimicry_draws: 4,
            weights: CollisionWeights::default(),
            detector: DetectorSettings::default(),
            collision_source: CollisionSource::GroundTruth,
            schedule: SamplerSchedule::default(),
            strategy: Strategy::MdCycle,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.group_size < 2 {
            return bad("group_size must be >= 2");
        }
        if !(self.clip_eps > 0.0) {
            return bad("clip_eps must be > 0");
        }
        if !(self.beta_kl >= 0.0) {
            return bad("beta_kl must be >= 0");
        }
        if !(self.threshold >= 0.0) {
            return bad("threshold must be >= 0");
        }
        if self.observed < 1 || self.frames <= self.observed {
            return bad("need 1 <= observed < frames");
        }
        if self.grid < raster::MIN_GRID {
            return bad("grid too small");
        }
        if self.stage1_batch < 1 || self.batch_conditions < 1 || self.mimicry_draws < 1 {
            return bad("batch sizes and mimicry_draws must be >= 1");
        }
        if !(self.stage1_lr > 0.0 && self.stage2_lr > 0.0) {
            return bad("learning rates must be > 0");
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be > 0");
        }
        self.weights.validate()?;
        self.detector.validate()?;
        self.schedule.validate()
    }

    pub fn layout(&self) -> Layout {
        Layout {
            observed: self.observed,
            predicted: self.frames - self.observed,
        }
    }

    /// Mimicry gate in grid pixels.
    pub fn threshold_px(&self) -> f64 {
        self.threshold * std::f64::consts::SQRT_2 * self.grid as f64
    }

    pub fn reward_settings(&self, dt: f64) -> RewardSettings {
        RewardSettings {
            weights: self.weights,
            detector: self.detector,
            source: self.collision_source,
            grid: self.grid,
            observed: self.observed,
            dt,
        }
    }

    pub fn policy_sizes(&self) -> Vec<usize> {
        FlowPolicy::sizes(&self.layout(), &self.hidden)
    }
}

/// One training or evaluation scene prepared for the trainer.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub motion_type: MotionType,
    pub condition: Condition,
    pub gt_future: Vec<f64>,
    /// Ground-truth centers recovered through masks, all frames.
    pub gt_track: CenterTrack,
    pub gt_collisions: BTreeSet<usize>,
    pub radii: [f64; MAX_BODIES],
    pub dt: f64,
}

impl Example {
    pub fn new(
        trajectory: &Trajectory,
        radii: [f64; MAX_BODIES],
        motion_type: MotionType,
        layout: &Layout,
        grid: usize,
        detector: &DetectorSettings,
    ) -> Result<Self> {
        let active = trajectory.active;
        let condition = Condition::new(layout, &trajectory.frames[..layout.observed.min(trajectory.len())], motion_type, active)?;
        let gt_future = layout.encode_future(&trajectory.frames, active)?;
        let frames: Vec<[Option<Vec2>; MAX_BODIES]> = trajectory
            .frames
            .iter()
            .map(|f| std::array::from_fn(|s| active[s].then_some(f[s])))
            .collect();
        let gt_track = mask_track(&frames, &radii, active, grid)?;
        let gt_collisions = reward::detect_track_collisions(&gt_track, trajectory.dt(), detector);
        Ok(Example {
            motion_type,
            condition,
            gt_future,
            gt_track,
            gt_collisions,
            radii,
            dt: trajectory.dt(),
        })
    }

    pub fn active(&self) -> [bool; MAX_BODIES] {
        self.condition.active
    }

    /// Mask-recovered centers of a generated future.
    pub fn sample_track(&self, layout: &Layout, state: &[f64], grid: usize) -> Result<CenterTrack> {
        let frames = layout.decode(state, &self.condition)?;
        mask_track(&frames, &self.radii, self.active(), grid)
    }
}

fn mask_track(
    frames: &[[Option<Vec2>; MAX_BODIES]],
    radii: &[f64; MAX_BODIES],
    active: [bool; MAX_BODIES],
    grid: usize,
) -> Result<CenterTrack> {
    let masks = raster::rasterize_frames(frames, radii, &active, grid)?;
    Ok(CenterTrack {
        frames: raster::extract_trajectory(&masks),
        active,
    })
}

/// G samples for one condition from one shared initial noise.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub noise: Vec<f64>,
    pub samples: Vec<Vec<f64>>,
    pub transitions: Vec<Vec<TransitionRecord>>,
    pub offsets: Vec<f64>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub mean_offset: f64,
}

const TAG_NOISE: u64 = 1;
const TAG_SAMPLE: u64 = 2;
const TAG_STAGE1: u64 = 3;
const TAG_STAGE2: u64 = 4;
const TAG_INIT: u64 = 5;
const TAG_MIMIC: u64 = 6;

/// Scores a generated future against the example's ground truth.
pub fn score_sample(ex: &Example, state: &[f64], cfg: &TrainConfig) -> Result<reward::OffsetReport> {
    let track = ex.sample_track(&cfg.layout(), state, cfg.grid)?;
    reward::score(&ex.gt_track, &track, &ex.gt_collisions, &cfg.reward_settings(ex.dt))
}

pub fn rollout_group(policy_old: &dyn VelocityModel, ex: &Example, cfg: &TrainConfig, seed: u64) -> Result<RolloutGroup> {
    let layout = cfg.layout();
    let noise = rng::standard_normal_vec(&mut rng::stream(seed, &[TAG_NOISE]), layout.state_dim());
    let results = par::map_range(cfg.group_size, |i| -> Result<(Vec<f64>, Vec<TransitionRecord>, f64)> {
        let mut r = rng::stream(seed, &[TAG_SAMPLE, i as u64]);
        let (x, recs) = flow::sample(policy_old, &ex.condition, &noise, &cfg.schedule, &mut r)?;
        let report = score_sample(ex, &x, cfg)?;
        Ok((x, recs, report.weighted_offset))
    });
    let mut samples = Vec::with_capacity(cfg.group_size);
    let mut transitions = Vec::with_capacity(cfg.group_size);
    let mut offsets = Vec::with_capacity(cfg.group_size);
    for res in results {
        let (x, recs, o) = res?;
        samples.push(x);
        transitions.push(recs);
        offsets.push(o);
    }
    let rewards: Vec<f64> = offsets.iter().map(|o| reward::reward(*o)).collect();
    let advantages = advantages(&rewards)?;
    let mean_offset = reward::group_mean_offset(&offsets)?;
    Ok(RolloutGroup {
        noise,
        samples,
        transitions,
        offsets,
        rewards,
        advantages,
        mean_offset,
    })
}

/// Group-normalized advantages with the population standard deviation.
/// Degenerate groups (std < 1e-8) get all-zero advantages.
pub fn advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(invalid("advantages need at least two rewards"));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-8 {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// `min(r A, clip(r, 1 - eps, 1 + eps) A)` and its derivative in `r`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, eps: f64) -> (f64, f64) {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * advantage;
    if unclipped <= clipped {
        (unclipped, advantage)
    } else {
        (clipped, 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GrpoStats {
    pub loss: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub mean_kl: f64,
    pub terms: usize,
}

/// Discovery loss over the SDE transitions of a group and its gradient.
///
/// `L_D = -mean_{i, k} (S_ik - beta KL_ik)` with `S` the clipped surrogate of
/// the ratio against the generation-time density and `KL` the divergence to
/// the reference transition (same std, different means).
pub fn grpo_loss(
    policy: &FlowPolicy,
    reference: &dyn VelocityModel,
    group: &RolloutGroup,
    ex: &Example,
    cfg: &TrainConfig,
) -> Result<(GrpoStats, Vec<f64>)> {
    let items: Vec<(usize, usize)> = group
        .transitions
        .iter()
        .enumerate()
        .flat_map(|(i, recs)| recs.iter().enumerate().filter(|(_, r)| r.is_sde).map(move |(k, _)| (i, k)))
        .collect();
    if items.is_empty() {
        return Err(invalid("group has no stochastic transitions"));
    }
    if group.advantages.len() != group.transitions.len() {
        return Err(invalid("advantages do not match samples"));
    }
    let m = items.len() as f64;
    let c = &ex.condition;
    let ([loss, ratio_sum, clipped, kl_sum], grad) =
        par::try_accumulate(items.len(), policy.net.num_params(), |j, buf| -> Result<[f64; 4]> {
            let (i, k) = items[j];
            let rec = &group.transitions[i][k];
            let a = group.advantages[i];
            let (v, tape) = policy.velocity_with_tape(&rec.x_t, rec.t, c)?;
            let mean = flow::sde_mean(&rec.x_t, &v, rec.t, rec.t_next, rec.sigma);
            let logp = flow::gaussian_logpdf(&rec.x_next, &mean, rec.std);
            let ratio = (logp - rec.log_prob).exp();
            let (s, ds_dr) = clipped_surrogate(ratio, a, cfg.clip_eps);
            let v_ref = reference.velocity(&rec.x_t, rec.t, c)?;
            let mean_ref = flow::sde_mean(&rec.x_t, &v_ref, rec.t, rec.t_next, rec.sigma);
            let var = rec.std * rec.std;
            let kl = mean.iter().zip(&mean_ref).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / (2.0 * var);
            let gain = flow::sde_mean_velocity_gain(rec.t, rec.t_next, rec.sigma);
            let gv: Vec<f64> = (0..v.len())
                .map(|d| {
                    let dlogp = (rec.x_next[d] - mean[d]) / var;
                    let dkl = (mean[d] - mean_ref[d]) / var;
                    -(ds_dr * ratio * dlogp - cfg.beta_kl * dkl) / m * gain
                })
                .collect();
            policy.net.backward(&tape, &gv, buf)?;
            let was_clipped = if (ratio - 1.0).abs() > cfg.clip_eps { 1.0 } else { 0.0 };
            Ok([-(s - cfg.beta_kl * kl) / m, ratio, was_clipped, kl])
        })?;
    Ok((
        GrpoStats {
            loss,
            mean_ratio: ratio_sum / m,
            clip_fraction: clipped / m,
            mean_kl: kl_sum / m,
            terms: items.len(),
        },
        grad,
    ))
}

/// Flow-matching loss on the ground-truth future averaged over
/// `cfg.mimicry_draws` draws of `(x1, t)`.
pub fn mimicry_loss(policy: &FlowPolicy, ex: &Example, cfg: &TrainConfig, rng: &mut Rng) -> Result<(f64, Vec<f64>)> {
    let n = cfg.mimicry_draws;
    let draws: Vec<(Vec<f64>, f64)> = (0..n).map(|_| flow::fm_draw(ex.gt_future.len(), rng)).collect();
    let scale = 1.0 / n as f64;
    let ([loss], grad) = par::try_accumulate(n, policy.net.num_params(), |j, buf| -> Result<[f64; 1]> {
        let (x1, t) = &draws[j];
        let l = flow::fm_loss_at(policy, &ex.gt_future, x1, *t, &ex.condition, scale, buf)?;
        Ok([l * scale])
    })?;
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_d: f64,
    pub l_m: f64,
    pub alpha: u8,
    pub total: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub mean_kl: f64,
}

/// `alpha = 1` iff the group-average weighted offset exceeds the threshold.
pub fn gate(mean_offset: f64, threshold_px: f64) -> u8 {
    u8::from(mean_offset > threshold_px)
}

/// One optimization step on a group: discovery loss, gated mimicry loss,
/// one Adam update of `policy`.
#[allow(clippy::too_many_arguments)]
pub fn mdcycle_step(
    policy: &mut FlowPolicy,
    adam: &mut Adam,
    reference: &dyn VelocityModel,
    group: &RolloutGroup,
    ex: &Example,
    cfg: &TrainConfig,
    mimicry_enabled: bool,
    rng: &mut Rng,
) -> Result<LossBreakdown> {
    let (stats, mut grad) = grpo_loss(policy, reference, group, ex, cfg)?;
    let alpha = if mimicry_enabled {
        gate(group.mean_offset, cfg.threshold_px())
    } else {
        0
    };
    let mut l_m = 0.0;
    if alpha == 1 {
        let (lm, gm) = mimicry_loss(policy, ex, cfg, rng)?;
        l_m = lm;
        for (g, h) in grad.iter_mut().zip(&gm) {
            *g += h;
        }
    }
    adam.step(policy.net.params_mut(), &grad)?;
    Ok(LossBreakdown {
        l_d: stats.loss,
        l_m,
        alpha,
        total: stats.loss + f64::from(alpha) * l_m,
        mean_ratio: stats.mean_ratio,
        clip_fraction: stats.clip_fraction,
        mean_kl: stats.mean_kl,
    })
}

/// One row per optimization step (one group); `iteration` repeats across the
/// groups of an iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub mean_reward: f64,
    pub group_mean_offset: f64,
    pub alpha: u8,
    pub clip_fraction: f64,
    pub mean_kl: f64,
    #[serde(rename = "L_D")]
    pub l_d: f64,
    #[serde(rename = "L_M")]
    pub l_m: f64,
}

/// Fresh policy with its stage-1 optimizer.
pub fn init_checkpoint(cfg: &TrainConfig) -> Result<Checkpoint> {
    let net = DenseNet::new(&cfg.policy_sizes(), cfg.activation, &mut rng::stream(cfg.seed, &[TAG_INIT]))?;
    Ok(Checkpoint::new(net, cfg.stage1_lr))
}

fn policy_of(ck: &Checkpoint, cfg: &TrainConfig) -> Result<FlowPolicy> {
    FlowPolicy::new(ck.net.clone(), cfg.layout())
}

/// Runs flow-matching steps until `ck.steps_done == until` (capped at
/// `cfg.stage1_steps`). Each step draws its minibatch and noise from a stream
/// keyed by the step index, so interrupted and resumed runs match exactly.
/// Returns the per-step mean loss.
pub fn train_stage1(examples: &[Example], cfg: &TrainConfig, ck: &mut Checkpoint, until: usize) -> Result<Vec<f64>> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(invalid("stage 1 needs a non-empty dataset"));
    }
    let mut policy = policy_of(ck, cfg)?;
    let until = until.min(cfg.stage1_steps) as u64;
    let mut losses = Vec::new();
    let b = cfg.stage1_batch;
    while ck.steps_done < until {
        let step = ck.steps_done;
        let mut r = rng::stream(cfg.seed, &[TAG_STAGE1, step]);
        use rand::Rng as _;
        let picks: Vec<usize> = (0..b).map(|_| r.random_range(0..examples.len())).collect();
        let scale = 1.0 / b as f64;
        let ([loss], grad) = par::try_accumulate(b, policy.net.num_params(), |j, buf| -> Result<[f64; 1]> {
            let ex = &examples[picks[j]];
            let mut rj = rng::stream(cfg.seed, &[TAG_STAGE1, step, j as u64]);
            let (x1, t) = flow::fm_draw(ex.gt_future.len(), &mut rj);
            Ok([flow::fm_loss_at(&policy, &ex.gt_future, &x1, t, &ex.condition, scale, buf)? * scale])
        })?;
        ck.adam.step(policy.net.params_mut(), &grad)?;
        ck.steps_done += 1;
        losses.push(loss);
    }
    ck.net = policy.net;
    Ok(losses)
}

/// Stage-2 starting point: the stage-1 policy, a fresh optimizer at the
/// stage-2 learning rate, and the stage-1 policy frozen as reference.
pub fn begin_stage2(stage1: &Checkpoint, cfg: &TrainConfig) -> Result<Checkpoint> {
    if stage1.net.sizes() != cfg.policy_sizes().as_slice() {
        return Err(Error::Dimension {
            expected: cfg.policy_sizes()[0],
            actual: stage1.net.input_dim(),
        });
    }
    let mut ck = Checkpoint::new(stage1.net.clone(), cfg.stage2_lr);
    ck.reference = Some(stage1.net.clone());
    Ok(ck)
}

/// Runs stage-2 iterations until `ck.steps_done == until` (capped at
/// `cfg.stage2_iterations`). Each iteration snapshots the old policy,
/// generates every group of the batch with it, then takes one step per group
/// in batch order.
pub fn train_stage2(examples: &[Example], cfg: &TrainConfig, ck: &mut Checkpoint, until: usize) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(invalid("stage 2 needs a non-empty dataset"));
    }
    let reference_net = ck
        .reference
        .clone()
        .ok_or_else(|| invalid("stage-2 checkpoint has no reference policy"))?;
    let reference = FlowPolicy::new(reference_net, cfg.layout())?;
    let mut policy = policy_of(ck, cfg)?;
    let mimicry = cfg.strategy == Strategy::MdCycle;
    let until = until.min(cfg.stage2_iterations) as u64;
    let mut log = Vec::new();
    while ck.steps_done < until {
        let it = ck.steps_done;
        let mut r = rng::stream(cfg.seed, &[TAG_STAGE2, it]);
        let b = cfg.batch_conditions.min(examples.len());
        let picks = index::sample(&mut r, examples.len(), b).into_vec();
        let old = policy.clone();
        let groups = par::map_range(b, |j| {
            rollout_group(&old, &examples[picks[j]], cfg, rng::derive_seed(cfg.seed, &[TAG_STAGE2, it, j as u64]))
        });
        for (j, group) in groups.into_iter().enumerate() {
            let group = group?;
            let ex = &examples[picks[j]];
            let mut mr = rng::stream(cfg.seed, &[TAG_MIMIC, it, j as u64]);
            let lb = mdcycle_step(&mut policy, &mut ck.adam, &reference, &group, ex, cfg, mimicry, &mut mr)?;
            log.push(LogRow {
                iteration: it as usize,
                mean_reward: group.rewards.iter().sum::<f64>() / group.rewards.len() as f64,
                group_mean_offset: group.mean_offset,
                alpha: lb.alpha,
                clip_fraction: lb.clip_fraction,
                mean_kl: lb.mean_kl,
                l_d: lb.l_d,
                l_m: lb.l_m,
            });
        }
        ck.steps_done += 1;
    }
    ck.net = policy.net;
    Ok(log)
}

/// Stage 1, then stage 2 unless the strategy is fine-tuning only.
pub fn train(examples: &[Example], cfg: &TrainConfig) -> Result<(Checkpoint, Vec<f64>, Vec<LogRow>)> {
    let mut ck = init_checkpoint(cfg)?;
    let losses = train_stage1(examples, cfg, &mut ck, cfg.stage1_steps)?;
    if cfg.strategy == Strategy::FineTune {
        return Ok((ck, losses, Vec::new()));
    }
    let mut ck2 = begin_stage2(&ck, cfg)?;
    let log = train_stage2(examples, cfg, &mut ck2, cfg.stage2_iterations)?;
    Ok((ck2, losses, log))
}
