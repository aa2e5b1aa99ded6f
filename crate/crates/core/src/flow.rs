//! Conditional flow matching over future trajectories.
//!
//! Time runs from data at `t = 0` to noise at `t = 1`: `x_t = (1 - t) x0 + t x1`
//! and the network regresses `x1 - x0`. Sampling descends a uniform grid from
//! 1 to 0. A window of consecutive steps may use the stochastic sampler, whose
//! Gaussian transitions carry the log-densities used for policy ratios.
//!
//! State layout: entry `((frame * MAX_BODIES) + slot) * 2 + axis` holds the
//! position of `slot` at predicted `frame`, relative to that slot's last
//! observed position, in world units. Inactive slots are zero.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geom::Vec2;
use crate::nn::{DenseNet, Tape};
use crate::rng::{self, Rng};
use crate::sim::{MotionType, MAX_BODIES};
use rand::Rng as _;

/// SDE steps must start above this time; the drift has a `1/t` factor.
pub const MIN_SDE_T: f64 = 0.05;

pub type CenterFrame = [Option<Vec2>; MAX_BODIES];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub observed: usize,
    pub predicted: usize,
}

impl Layout {
    pub fn new(observed: usize, predicted: usize) -> Result<Self> {
        if observed < 1 || predicted < 1 {
            return Err(invalid("layout needs observed and predicted frames"));
        }
        Ok(Layout { observed, predicted })
    }

    pub fn frames(&self) -> usize {
        self.observed + self.predicted
    }

    pub fn state_dim(&self) -> usize {
        self.predicted * MAX_BODIES * 2
    }

    pub fn condition_dim(&self) -> usize {
        self.observed * MAX_BODIES * 2 + MotionType::ALL.len() + MAX_BODIES
    }

    /// State, two time features `(t, 1 - t)`, condition.
    pub fn input_dim(&self) -> usize {
        self.state_dim() + 2 + self.condition_dim()
    }

    #[inline]
    pub fn index(frame: usize, slot: usize, axis: usize) -> usize {
        (frame * MAX_BODIES + slot) * 2 + axis
    }

    /// Encodes predicted frames `observed..` of a full trajectory.
    pub fn encode_future(&self, frames: &[[Vec2; MAX_BODIES]], active: [bool; MAX_BODIES]) -> Result<Vec<f64>> {
        if frames.len() != self.frames() {
            return Err(Error::Dimension {
                expected: self.frames(),
                actual: frames.len(),
            });
        }
        let anchor = frames[self.observed - 1];
        let mut x = vec![0.0; self.state_dim()];
        for f in 0..self.predicted {
            for s in 0..MAX_BODIES {
                if active[s] {
                    let d = frames[self.observed + f][s] - anchor[s];
                    x[Self::index(f, s, 0)] = d.x;
                    x[Self::index(f, s, 1)] = d.y;
                }
            }
        }
        Ok(x)
    }

    /// Absolute centers for every frame: observed frames from the condition,
    /// predicted frames decoded from `state`. Inactive slots are absent.
    pub fn decode(&self, state: &[f64], condition: &Condition) -> Result<Vec<CenterFrame>> {
        if state.len() != self.state_dim() {
            return Err(Error::Dimension {
                expected: self.state_dim(),
                actual: state.len(),
            });
        }
        let mut out = Vec::with_capacity(self.frames());
        for f in &condition.observed {
            out.push(std::array::from_fn(|s| condition.active[s].then_some(f[s])));
        }
        let anchor = condition.anchor();
        for f in 0..self.predicted {
            out.push(std::array::from_fn(|s| {
                condition.active[s].then(|| {
                    anchor[s] + Vec2::new(state[Self::index(f, s, 0)], state[Self::index(f, s, 1)])
                })
            }));
        }
        Ok(out)
    }
}

/// Observed frames, family and active slots; encoded once into `values`.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub observed: Vec<[Vec2; MAX_BODIES]>,
    pub motion_type: MotionType,
    pub active: [bool; MAX_BODIES],
    values: Vec<f64>,
}

impl Condition {
    pub fn new(
        layout: &Layout,
        observed: &[[Vec2; MAX_BODIES]],
        motion_type: MotionType,
        active: [bool; MAX_BODIES],
    ) -> Result<Self> {
        if observed.len() != layout.observed {
            return Err(Error::Dimension {
                expected: layout.observed,
                actual: observed.len(),
            });
        }
        let mut values = Vec::with_capacity(layout.condition_dim());
        let mut frames = Vec::with_capacity(observed.len());
        for f in observed {
            let mut frame = [Vec2::ZERO; MAX_BODIES];
            for s in 0..MAX_BODIES {
                if active[s] {
                    if !f[s].is_finite() {
                        return Err(invalid("non-finite observed position"));
                    }
                    frame[s] = f[s];
                }
                values.push(frame[s].x);
                values.push(frame[s].y);
            }
            frames.push(frame);
        }
        for m in MotionType::ALL {
            values.push(if m == motion_type { 1.0 } else { 0.0 });
        }
        for a in active {
            values.push(if a { 1.0 } else { 0.0 });
        }
        Ok(Condition {
            observed: frames,
            motion_type,
            active,
            values,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Last observed position per slot.
    pub fn anchor(&self) -> [Vec2; MAX_BODIES] {
        *self.observed.last().unwrap()
    }

    /// Zeroes entries of inactive slots.
    pub fn mask_inactive(&self, state: &mut [f64]) {
        for (k, v) in state.iter_mut().enumerate() {
            if !self.active[(k / 2) % MAX_BODIES] {
                *v = 0.0;
            }
        }
    }
}

/// Anything that predicts the flow velocity at `(x, t)` under a condition.
pub trait VelocityModel: Sync {
    fn velocity(&self, x: &[f64], t: f64, c: &Condition) -> Result<Vec<f64>>;
}

impl<F> VelocityModel for F
where
    F: Fn(&[f64], f64, &Condition) -> Vec<f64> + Sync,
{
    fn velocity(&self, x: &[f64], t: f64, c: &Condition) -> Result<Vec<f64>> {
        Ok(self(x, t, c))
    }
}

/// The network-backed velocity predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowPolicy {
    pub net: DenseNet,
    pub layout: Layout,
}

impl FlowPolicy {
    pub fn new(net: DenseNet, layout: Layout) -> Result<Self> {
        if net.input_dim() != layout.input_dim() || net.output_dim() != layout.state_dim() {
            return Err(Error::Dimension {
                expected: layout.input_dim(),
                actual: net.input_dim(),
            });
        }
        Ok(FlowPolicy { net, layout })
    }

    /// Layer sizes for a policy with the given hidden widths.
    pub fn sizes(layout: &Layout, hidden: &[usize]) -> Vec<usize> {
        let mut s = vec![layout.input_dim()];
        s.extend_from_slice(hidden);
        s.push(layout.state_dim());
        s
    }

    pub fn input(&self, x: &[f64], t: f64, c: &Condition) -> Result<Vec<f64>> {
        if x.len() != self.layout.state_dim() {
            return Err(Error::Dimension {
                expected: self.layout.state_dim(),
                actual: x.len(),
            });
        }
        let mut v = Vec::with_capacity(self.layout.input_dim());
        v.extend_from_slice(x);
        v.push(t);
        v.push(1.0 - t);
        v.extend_from_slice(c.values());
        Ok(v)
    }

    pub fn velocity_with_tape(&self, x: &[f64], t: f64, c: &Condition) -> Result<(Vec<f64>, Tape)> {
        self.net.forward(&self.input(x, t, c)?)
    }
}

impl VelocityModel for FlowPolicy {
    fn velocity(&self, x: &[f64], t: f64, c: &Condition) -> Result<Vec<f64>> {
        self.net.predict(&self.input(x, t, c)?)
    }
}

pub fn interpolate(x0: &[f64], x1: &[f64], t: f64) -> Vec<f64> {
    x0.iter().zip(x1).map(|(a, b)| (1.0 - t) * a + t * b).collect()
}

/// Flow-matching loss at a fixed `(x1, t)` draw. Parameter gradients scaled
/// by `scale` are accumulated into `grad`.
pub fn fm_loss_at(
    policy: &FlowPolicy,
    x0: &[f64],
    x1: &[f64],
    t: f64,
    c: &Condition,
    scale: f64,
    grad: &mut [f64],
) -> Result<f64> {
    let xt = interpolate(x0, x1, t);
    let (v, tape) = policy.velocity_with_tape(&xt, t, c)?;
    let dim = v.len() as f64;
    let mut loss = 0.0;
    let mut gv = vec![0.0; v.len()];
    for k in 0..v.len() {
        let r = v[k] - (x1[k] - x0[k]);
        loss += r * r;
        gv[k] = scale * 2.0 * r / dim;
    }
    policy.net.backward(&tape, &gv, grad)?;
    Ok(loss / dim)
}

/// One `(x1, t)` draw for [`fm_loss_at`]: `x1 ~ N(0, I)`, `t ~ U(0, 1)`.
pub fn fm_draw(dim: usize, rng: &mut Rng) -> (Vec<f64>, f64) {
    let x1 = rng::standard_normal_vec(rng, dim);
    let t = rng.random::<f64>();
    (x1, t)
}

/// Flow-matching loss with a fresh draw; returns the loss and its gradient.
pub fn fm_loss(policy: &FlowPolicy, x0: &[f64], c: &Condition, rng: &mut Rng) -> Result<(f64, Vec<f64>)> {
    let (x1, t) = fm_draw(x0.len(), rng);
    let mut grad = vec![0.0; policy.net.num_params()];
    let loss = fm_loss_at(policy, x0, &x1, t, c, 1.0, &mut grad)?;
    Ok((loss, grad))
}

pub fn ode_step(model: &dyn VelocityModel, x: &[f64], t: f64, t_next: f64, c: &Condition) -> Result<Vec<f64>> {
    check_times(t, t_next)?;
    let v = model.velocity(x, t, c)?;
    Ok(x.iter().zip(&v).map(|(xi, vi)| xi + (t_next - t) * vi).collect())
}

fn check_times(t: f64, t_next: f64) -> Result<()> {
    if !(0.0 <= t_next && t_next < t && t <= 1.0) {
        return Err(invalid(format!("need 0 <= t' < t <= 1, got t={t}, t'={t_next}")));
    }
    Ok(())
}

/// Mean of the stochastic transition from `x` at `t` to `t_next` given the
/// predicted velocity `v`. With `sigma = 0` this is exactly the Euler step.
pub fn sde_mean(x: &[f64], v: &[f64], t: f64, t_next: f64, sigma: f64) -> Vec<f64> {
    let k = sigma * sigma / (2.0 * t);
    x.iter()
        .zip(v)
        .map(|(xi, vi)| {
            let f = vi + k * (xi + (1.0 - t) * vi);
            xi + (t_next - t) * f
        })
        .collect()
}

/// Derivative of each mean entry with respect to its velocity entry.
pub fn sde_mean_velocity_gain(t: f64, t_next: f64, sigma: f64) -> f64 {
    (t_next - t) * (1.0 + sigma * sigma * (1.0 - t) / (2.0 * t))
}

/// Isotropic Gaussian log-density of `x` under `N(mean, std^2 I)`.
pub fn gaussian_logpdf(x: &[f64], mean: &[f64], std: f64) -> f64 {
    let var = std * std;
    let sq: f64 = x.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
    -sq / (2.0 * var) - 0.5 * x.len() as f64 * (2.0 * std::f64::consts::PI * var).ln()
}

/// One sampler transition. `log_prob` is the density under the generating
/// model at generation time; zero for deterministic steps.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionRecord {
    pub t: f64,
    pub t_next: f64,
    pub x_t: Vec<f64>,
    pub x_next: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: f64,
    pub sigma: f64,
    pub is_sde: bool,
    pub log_prob: f64,
}

pub fn sde_step(
    model: &dyn VelocityModel,
    x: &[f64],
    t: f64,
    t_next: f64,
    sigma: f64,
    c: &Condition,
    rng: &mut Rng,
) -> Result<(Vec<f64>, TransitionRecord)> {
    check_times(t, t_next)?;
    if t <= MIN_SDE_T {
        return Err(invalid(format!("stochastic step at t={t} <= {MIN_SDE_T}")));
    }
    if !(sigma >= 0.0) {
        return Err(invalid("noise intensity must be >= 0"));
    }
    let v = model.velocity(x, t, c)?;
    let mean = sde_mean(x, &v, t, t_next, sigma);
    let std = sigma * (t - t_next).sqrt();
    let (x_next, log_prob, is_sde) = if std > 0.0 {
        let eps = rng::standard_normal_vec(rng, x.len());
        let xn: Vec<f64> = mean.iter().zip(&eps).map(|(m, e)| m + std * e).collect();
        let lp = gaussian_logpdf(&xn, &mean, std);
        (xn, lp, true)
    } else {
        (mean.clone(), 0.0, false)
    };
    let rec = TransitionRecord {
        t,
        t_next,
        x_t: x.to_vec(),
        x_next: x_next.clone(),
        mean,
        std,
        sigma,
        is_sde,
        log_prob,
    };
    Ok((x_next, rec))
}

/// Log-density of a recorded stochastic transition under `model`.
pub fn transition_logprob(model: &dyn VelocityModel, record: &TransitionRecord, c: &Condition) -> Result<f64> {
    if !record.is_sde {
        return Err(invalid("deterministic transitions carry no density"));
    }
    let v = model.velocity(&record.x_t, record.t, c)?;
    let mean = sde_mean(&record.x_t, &v, record.t, record.t_next, record.sigma);
    Ok(gaussian_logpdf(&record.x_next, &mean, record.std))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerSchedule {
    pub steps: usize,
    /// `[lo, hi]` in sampler time.
    pub window: (f64, f64),
    pub sde_steps: usize,
    pub sigma: f64,
}

impl Default for SamplerSchedule {
    fn default() -> Self {
        SamplerSchedule {
            steps: 16,
            window: (0.75, 1.0),
            sde_steps: 2,
            sigma: 1.0,
        }
    }
}

impl SamplerSchedule {
    /// Deterministic sampling: same grid, no stochastic steps.
    pub fn ode(steps: usize) -> Self {
        SamplerSchedule {
            steps,
            window: (0.0, 1.0),
            sde_steps: 0,
            sigma: 0.0,
        }
    }

    /// `t_k = 1 - k / S` for `k = 0..=S`.
    pub fn timesteps(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| 1.0 - k as f64 / self.steps as f64).collect()
    }

    /// Grid steps whose interval lies inside the window and whose start is
    /// above [`MIN_SDE_T`].
    pub fn eligible_steps(&self) -> Vec<usize> {
        let ts = self.timesteps();
        (0..self.steps)
            .filter(|&k| {
                let (t, tn) = (ts[k], ts[k + 1]);
                tn >= self.window.0 - 1e-12 && t <= self.window.1 + 1e-12 && t > MIN_SDE_T
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.window;
        if self.steps < 1 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("SDE window {:?} not inside [0, 1]", self.window)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config("noise intensity must be finite and >= 0".into()));
        }
        let eligible = self.eligible_steps();
        if self.sde_steps > eligible.len() {
            return Err(Error::Config(format!(
                "{} SDE steps requested but only {} grid steps fit the window",
                self.sde_steps,
                eligible.len()
            )));
        }
        // Eligible steps are consecutive on a uniform grid.
        if eligible.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(Error::Config("SDE window steps are not consecutive".into()));
        }
        Ok(())
    }

    /// Picks which grid steps are stochastic: `sde_steps` consecutive eligible
    /// steps at a uniformly random position.
    pub fn pick_sde_steps(&self, rng: &mut Rng) -> Vec<usize> {
        let eligible = self.eligible_steps();
        if self.sde_steps == 0 || eligible.is_empty() {
            return Vec::new();
        }
        let positions = eligible.len() - self.sde_steps + 1;
        let start = rng.random_range(0..positions);
        eligible[start..start + self.sde_steps].to_vec()
    }
}

/// Integrates from `initial_noise` at `t = 1` to `t = 0`. Inactive slots of
/// the result are zeroed.
pub fn sample(
    model: &dyn VelocityModel,
    c: &Condition,
    initial_noise: &[f64],
    schedule: &SamplerSchedule,
    rng: &mut Rng,
) -> Result<(Vec<f64>, Vec<TransitionRecord>)> {
    schedule.validate()?;
    let ts = schedule.timesteps();
    let sde = schedule.pick_sde_steps(rng);
    let mut x = initial_noise.to_vec();
    let mut records = Vec::with_capacity(schedule.steps);
    for k in 0..schedule.steps {
        let (t, tn) = (ts[k], ts[k + 1]);
        if sde.contains(&k) {
            let (xn, rec) = sde_step(model, &x, t, tn, schedule.sigma, c, rng)?;
            records.push(rec);
            x = xn;
        } else {
            let xn = ode_step(model, &x, t, tn, c)?;
            records.push(TransitionRecord {
                t,
                t_next: tn,
                x_t: std::mem::take(&mut x),
                x_next: xn.clone(),
                mean: xn.clone(),
                std: 0.0,
                sigma: 0.0,
                is_sde: false,
                log_prob: 0.0,
            });
            x = xn;
        }
    }
    c.mask_inactive(&mut x);
    Ok((x, records))
}

/// Deterministic ODE sampling from `initial_noise`.
pub fn sample_ode(model: &dyn VelocityModel, c: &Condition, initial_noise: &[f64], steps: usize) -> Result<Vec<f64>> {
    let ts = SamplerSchedule::ode(steps).timesteps();
    let mut x = initial_noise.to_vec();
    for k in 0..steps {
        x = ode_step(model, &x, ts[k], ts[k + 1], c)?;
    }
    c.mask_inactive(&mut x);
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;

    fn layout() -> Layout {
        Layout::new(5, 25).unwrap()
    }

    fn condition(l: &Layout, two: bool) -> Condition {
        let obs: Vec<[Vec2; MAX_BODIES]> = (0..l.observed)
            .map(|k| [Vec2::new(0.2 + 0.01 * k as f64, 0.5), Vec2::new(0.7, 0.4 - 0.01 * k as f64)])
            .collect();
        let (m, a) = if two {
            (MotionType::Collision, [true, true])
        } else {
            (MotionType::FreeFall, [true, false])
        };
        Condition::new(l, &obs, m, a).unwrap()
    }

    fn policy(seed: u64, hidden: &[usize]) -> FlowPolicy {
        let l = layout();
        let net = DenseNet::new(&FlowPolicy::sizes(&l, hidden), Activation::Silu, &mut rng::stream(seed, &[])).unwrap();
        FlowPolicy::new(net, l).unwrap()
    }

    #[test]
    fn layout_dimensions() {
        let l = layout();
        assert_eq!(l.state_dim(), 100);
        assert_eq!(l.condition_dim(), 26);
        assert_eq!(l.input_dim(), 128);
        assert_eq!(Layout::index(3, 1, 1), ((3 * 2) + 1) * 2 + 1);
        let c = condition(&l, false);
        assert_eq!(c.values().len(), 26);
        assert_eq!(c.values()[20..26], [0.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        // Inactive slots are zeroed in the condition.
        assert_eq!(c.values()[2], 0.0);
    }

    #[test]
    fn encode_decode_round_trip() {
        let l = Layout::new(2, 3).unwrap();
        let frames: Vec<[Vec2; MAX_BODIES]> = (0..5)
            .map(|k| [Vec2::new(0.1 * k as f64, 0.5), Vec2::new(0.9, 0.05 * k as f64)])
            .collect();
        let c = Condition::new(&l, &frames[..2], MotionType::Collision, [true, true]).unwrap();
        let x = l.encode_future(&frames, [true, true]).unwrap();
        let back = l.decode(&x, &c).unwrap();
        for (f, b) in frames.iter().zip(&back) {
            for s in 0..2 {
                assert!((f[s] - b[s].unwrap()).norm() < 1e-15);
            }
        }
        let x1 = l.encode_future(&frames, [true, false]).unwrap();
        assert!((0..3).all(|f| x1[Layout::index(f, 1, 0)] == 0.0 && x1[Layout::index(f, 1, 1)] == 0.0));
        assert!(l.encode_future(&frames[..4], [true, true]).is_err());
        assert!(Condition::new(&l, &frames[..3], MotionType::Collision, [true, true]).is_err());
    }

    #[test]
    fn interpolate_endpoints_and_midpoint() {
        let a = [1.0, -2.0, 0.5];
        let b = [3.0, 4.0, -0.5];
        assert_eq!(interpolate(&a, &b, 0.0), a.to_vec());
        assert_eq!(interpolate(&a, &b, 1.0), b.to_vec());
        let m = interpolate(&a, &b, 0.5);
        for k in 0..3 {
            assert!((m[k] - 0.5 * (a[k] + b[k])).abs() < 1e-15);
        }
    }

    #[test]
    fn fm_loss_zero_for_exact_velocity_net() {
        // With x0 = 0 and t = 1, x_t = x1 = x1 - x0: an identity map on the
        // state inputs is the exact velocity.
        let l = layout();
        let d = l.state_dim();
        let sizes = [l.input_dim(), d];
        let mut p = vec![0.0; l.input_dim() * d + d];
        for k in 0..d {
            p[k * d + k] = 1.0;
        }
        let net = DenseNet::from_params(&sizes, Activation::Tanh, p).unwrap();
        let pol = FlowPolicy::new(net, l).unwrap();
        let c = condition(&l, true);
        let x0 = vec![0.0; d];
        let x1 = rng::standard_normal_vec(&mut rng::stream(3, &[]), d);
        let mut g = vec![0.0; pol.net.num_params()];
        let loss = fm_loss_at(&pol, &x0, &x1, 1.0, &c, 1.0, &mut g).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn fm_loss_monte_carlo_for_zero_net() {
        let l = layout();
        let net = DenseNet::zeros(&FlowPolicy::sizes(&l, &[8]), Activation::Silu).unwrap();
        let pol = FlowPolicy::new(net, l).unwrap();
        let c = condition(&l, true);
        let mut r = rng::stream(8, &[]);
        let x0: Vec<f64> = (0..l.state_dim()).map(|k| 0.3 * ((k as f64) * 0.7).sin()).collect();
        let n = 10_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let (loss, _) = fm_loss(&pol, &x0, &c, &mut r).unwrap();
            assert!(loss >= 0.0);
            sum += loss;
            sum_sq += loss * loss;
        }
        let mean = sum / n as f64;
        let sd = (sum_sq / n as f64 - mean * mean).sqrt();
        // E||x1 - x0||^2 / d = 1 + ||x0||^2 / d.
        let expected = 1.0 + x0.iter().map(|v| v * v).sum::<f64>() / l.state_dim() as f64;
        assert!((mean - expected).abs() < 4.0 * sd / (n as f64).sqrt(), "{mean} vs {expected}");
    }

    #[test]
    fn fm_gradient_matches_finite_differences() {
        let mut pol = policy(12, &[16, 16]);
        let l = pol.layout;
        let c = condition(&l, true);
        let mut r = rng::stream(13, &[]);
        let x0: Vec<f64> = (0..l.state_dim()).map(|_| r.random_range(-0.3..0.3)).collect();
        let (x1, t) = fm_draw(l.state_dim(), &mut r);
        let mut g = vec![0.0; pol.net.num_params()];
        fm_loss_at(&pol, &x0, &x1, t, &c, 1.0, &mut g).unwrap();
        let h = 1e-4;
        for _ in 0..10 {
            let k = r.random_range(0..pol.net.num_params());
            let orig = pol.net.params()[k];
            let mut scratch = vec![0.0; g.len()];
            pol.net.params_mut()[k] = orig + h;
            let lp = fm_loss_at(&pol, &x0, &x1, t, &c, 1.0, &mut scratch).unwrap();
            pol.net.params_mut()[k] = orig - h;
            let lm = fm_loss_at(&pol, &x0, &x1, t, &c, 1.0, &mut scratch).unwrap();
            pol.net.params_mut()[k] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let rel = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-8);
            assert!(rel < 1e-4, "param {k}: {fd} vs {}", g[k]);
        }
    }

    fn zero_model(x: &[f64], _t: f64, _c: &Condition) -> Vec<f64> {
        vec![0.0; x.len()]
    }

    #[test]
    fn ode_step_cases() {
        let l = layout();
        let c = condition(&l, true);
        let x = vec![0.5; l.state_dim()];
        assert_eq!(ode_step(&zero_model, &x, 0.5, 0.25, &c).unwrap(), x);
        let mut r = rng::stream(1, &[]);
        let x0: Vec<f64> = (0..l.state_dim()).map(|_| r.random_range(-0.5..0.5)).collect();
        let x1 = rng::standard_normal_vec(&mut r, l.state_dim());
        let u: Vec<f64> = x1.iter().zip(&x0).map(|(a, b)| a - b).collect();
        let constant = |_: &[f64], _: f64, _: &Condition| u.clone();
        let one = ode_step(&constant, &x1, 1.0, 0.0, &c).unwrap();
        for k in 0..x0.len() {
            assert!((one[k] - x0[k]).abs() < 1e-15);
        }
        let full = sample_ode(&constant, &c, &x1, 16).unwrap();
        for k in 0..x0.len() {
            assert!((full[k] - x0[k]).abs() < 1e-12);
        }
        assert!(ode_step(&zero_model, &x, 0.25, 0.5, &c).is_err());
    }

    #[test]
    fn exact_data_velocity_is_recovered_by_ode() {
        // v(x, t) = (x - x0) / t is the exact field for a point mass at x0.
        let l = layout();
        let c = condition(&l, false);
        let mut x0: Vec<f64> = (0..l.state_dim()).map(|k| 0.01 * k as f64).collect();
        c.mask_inactive(&mut x0);
        let target = x0.clone();
        let exact = move |x: &[f64], t: f64, _: &Condition| -> Vec<f64> {
            x.iter().zip(&target).map(|(a, b)| (a - b) / t).collect()
        };
        let noise = rng::standard_normal_vec(&mut rng::stream(2, &[]), l.state_dim());
        let out = sample_ode(&exact, &c, &noise, 16).unwrap();
        for k in 0..x0.len() {
            assert!((out[k] - x0[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn sde_with_zero_sigma_is_ode_bitwise() {
        let pol = policy(5, &[16]);
        let l = pol.layout;
        let c = condition(&l, true);
        let mut r = rng::stream(6, &[]);
        for _ in 0..20 {
            let x = rng::standard_normal_vec(&mut r, l.state_dim());
            let t = r.random_range(0.1..1.0);
            let tn = t * r.random_range(0.0..1.0);
            let ode = ode_step(&pol, &x, t, tn, &c).unwrap();
            let (sde, rec) = sde_step(&pol, &x, t, tn, 0.0, &c, &mut r).unwrap();
            assert_eq!(ode, sde);
            assert_eq!(rec.std, 0.0);
            assert!(!rec.is_sde);
        }
    }

    #[test]
    fn sde_step_rejects_small_t() {
        let l = layout();
        let c = condition(&l, false);
        let x = vec![0.0; l.state_dim()];
        let mut r = rng::stream(0, &[]);
        assert!(sde_step(&zero_model, &x, 0.0, 0.0, 1.0, &c, &mut r).is_err());
        assert!(sde_step(&zero_model, &x, 0.04, 0.0, 1.0, &c, &mut r).is_err());
        assert!(sde_step(&zero_model, &x, 0.0625, 0.0, 1.0, &c, &mut r).is_ok());
    }

    #[test]
    fn sde_step_is_reproducible_and_gaussian() {
        let l = Layout::new(1, 1).unwrap();
        let c = Condition::new(&l, &[[Vec2::new(0.5, 0.5); 2]], MotionType::FreeFall, [true, false]).unwrap();
        let field = |x: &[f64], _: f64, _: &Condition| x.iter().map(|v| 0.5 - v).collect::<Vec<f64>>();
        let x = vec![0.3, -0.2, 0.0, 0.0];
        let (t, tn, sigma) = (0.9, 0.8, 1.0);
        let a = sde_step(&field, &x, t, tn, sigma, &c, &mut rng::stream(4, &[])).unwrap();
        let b = sde_step(&field, &x, t, tn, sigma, &c, &mut rng::stream(4, &[])).unwrap();
        assert_eq!(a, b);
        let mean = a.1.mean.clone();
        let std = a.1.std;
        assert!((std - sigma * (t - tn).sqrt()).abs() < 1e-15);
        let n = 100_000;
        let mut acc = [0.0; 4];
        let mut r = rng::stream(5, &[]);
        for _ in 0..n {
            let (xn, _) = sde_step(&field, &x, t, tn, sigma, &c, &mut r).unwrap();
            for k in 0..4 {
                acc[k] += xn[k];
            }
        }
        for k in 0..4 {
            let m = acc[k] / n as f64;
            assert!((m - mean[k]).abs() < 3.0 * std / (n as f64).sqrt(), "k={k}: {m} vs {}", mean[k]);
        }
    }

    #[test]
    fn logprob_identities() {
        let pol = policy(9, &[16]);
        let l = pol.layout;
        let c = condition(&l, true);
        let mut r = rng::stream(10, &[]);
        let x = rng::standard_normal_vec(&mut r, l.state_dim());
        let (_, rec) = sde_step(&pol, &x, 1.0, 0.9375, 1.0, &c, &mut r).unwrap();
        let lp = transition_logprob(&pol, &rec, &c).unwrap();
        assert_eq!(lp, rec.log_prob);
        assert_eq!((lp - rec.log_prob).exp(), 1.0);
        let mut at_mode = rec.clone();
        at_mode.x_next = at_mode.mean.clone();
        let d = l.state_dim() as f64;
        let expect = -0.5 * d * (2.0 * std::f64::consts::PI * rec.std * rec.std).ln();
        assert!((transition_logprob(&pol, &at_mode, &c).unwrap() - expect).abs() < 1e-9);
        let mut det = rec.clone();
        det.is_sde = false;
        assert!(transition_logprob(&pol, &det, &c).is_err());
    }

    #[test]
    fn gaussian_logpdf_by_hand() {
        let lp = gaussian_logpdf(&[1.0, 2.0], &[0.5, 1.0], 0.5);
        // Two independent N(m, 0.25) terms.
        let term = |x: f64, m: f64| -(x - m) * (x - m) / 0.5 - 0.5 * (2.0 * std::f64::consts::PI * 0.25).ln();
        assert!((lp - (term(1.0, 0.5) + term(2.0, 1.0))).abs() < 1e-12);
    }

    #[test]
    fn schedule_window_logic() {
        let s = SamplerSchedule::default();
        assert_eq!(s.eligible_steps(), vec![0, 1, 2, 3]);
        s.validate().unwrap();
        let all = SamplerSchedule {
            steps: 16,
            window: (0.0, 1.0),
            sde_steps: 16,
            sigma: 1.0,
        };
        all.validate().unwrap();
        assert_eq!(all.pick_sde_steps(&mut rng::stream(0, &[])), (0..16).collect::<Vec<_>>());
        for (lo, n) in [(0.5, 8), (0.25, 12)] {
            let s = SamplerSchedule {
                window: (lo, 1.0),
                ..SamplerSchedule::default()
            };
            assert_eq!(s.eligible_steps().len(), n);
        }
        let too_many = SamplerSchedule {
            sde_steps: 5,
            ..SamplerSchedule::default()
        };
        assert!(too_many.validate().is_err());
        let mut r = rng::stream(1, &[]);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..100 {
            let p = s.pick_sde_steps(&mut r);
            assert_eq!(p.len(), 2);
            assert_eq!(p[1], p[0] + 1);
            assert!(p[1] <= 3);
            seen.insert(p[0]);
        }
        assert_eq!(seen.len(), 3);
    }

    #[test]
    fn sample_structure_and_determinism() {
        let pol = policy(14, &[16]);
        let l = pol.layout;
        let c = condition(&l, true);
        let noise = rng::standard_normal_vec(&mut rng::stream(15, &[]), l.state_dim());
        let s = SamplerSchedule::default();
        let (xa, ra) = sample(&pol, &c, &noise, &s, &mut rng::stream(16, &[])).unwrap();
        let (xb, rb) = sample(&pol, &c, &noise, &s, &mut rng::stream(16, &[])).unwrap();
        assert_eq!(xa, xb);
        assert_eq!(ra, rb);
        assert_eq!(ra.len(), 16);
        assert_eq!(ra.iter().filter(|r| r.is_sde).count(), 2);
        for r in &ra {
            if !r.is_sde {
                assert_eq!(r.std, 0.0);
                assert_eq!(r.x_next, r.mean);
            } else {
                assert!(r.t >= 0.75 && r.t_next >= 0.75 - 1e-12);
            }
        }
        let zero = SamplerSchedule { sigma: 0.0, ..s };
        let (xz, _) = sample(&pol, &c, &noise, &zero, &mut rng::stream(17, &[])).unwrap();
        assert_eq!(xz, sample_ode(&pol, &c, &noise, 16).unwrap());
    }
}
