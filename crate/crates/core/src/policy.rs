//! Actor-critic over the control input, Gaussian action sampling, and GAE.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::numerics::{he_init, randn, Array, Tape, Var};
use crate::vehicle::ControlAction;

pub const LOG_STD_INIT: f32 = -0.5;
pub const LOG_STD_MIN: f32 = -4.0;
pub const LOG_STD_MAX: f32 = 1.0;
const HALF_LN_2PI: f32 = 0.918_938_5;

/// The policy's observation: world-model vector plus scalar context.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControlInput {
    /// Latent world-model vector (or oracle features in the fast profile).
    pub z: Vec<f32>,
    /// Current speed, m/s.
    pub speed: f64,
    /// Goal position in the ego frame: x forward, y left, meters.
    pub goal_ego: (f64, f64),
    /// Route arc length covered this episode / goal distance.
    pub dist_covered: f64,
}

impl ControlInput {
    /// Flatten with normalization constants into the network input vector.
    pub fn features(&self, v_norm: f64, goal_norm: f64) -> Vec<f32> {
        let mut f = Vec::with_capacity(self.z.len() + 4);
        f.extend_from_slice(&self.z);
        f.push((self.speed / v_norm) as f32);
        f.push((self.goal_ego.0 / goal_norm) as f32);
        f.push((self.goal_ego.1 / goal_norm) as f32);
        f.push(self.dist_covered as f32);
        debug_assert!(f.iter().all(|v| v.is_finite()), "non-finite control input");
        f
    }
}

const TRUNK: [usize; 4] = [512, 256, 128, 64];
const ACTION_DIM: usize = 2;

/// Shared-trunk actor-critic: 4 FC layers, tanh action mean, learnable
/// state-independent log-std, linear value head.
pub struct ActorCritic {
    pub input_dim: usize,
    names: Vec<String>,
    params: Vec<Array>,
}

pub struct PolicyBinding {
    vars: Vec<Var>,
}

impl PolicyBinding {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Forward outputs on a tape.
pub struct PolicyOut {
    /// (N, 2) action mean after tanh.
    pub mean: Var,
    /// (N, 2) clamped log-std broadcast to rows.
    pub log_std_rows: Var,
    /// (N, 1) state value.
    pub value: Var,
}

impl ActorCritic {
    pub fn new(input_dim: usize, rng: &mut impl Rng) -> Self {
        let mut names = Vec::new();
        let mut params = Vec::new();
        let mut dim = input_dim;
        for (i, &width) in TRUNK.iter().enumerate() {
            names.push(format!("trunk.fc{i}.w"));
            params.push(he_init(&[dim, width], dim, rng));
            names.push(format!("trunk.fc{i}.b"));
            params.push(Array::zeros(&[width]));
            dim = width;
        }
        names.push("actor.w".into());
        params.push(randn(&[dim, ACTION_DIM], 0.01, rng));
        names.push("actor.b".into());
        params.push(Array::zeros(&[ACTION_DIM]));
        names.push("actor.log_std".into());
        params.push(Array::full(&[ACTION_DIM], LOG_STD_INIT));
        names.push("critic.w".into());
        params.push(randn(&[dim, 1], 0.01, rng));
        names.push("critic.b".into());
        params.push(Array::zeros(&[1]));
        Self { input_dim, names, params }
    }

    pub fn params(&self) -> &[Array] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Array] {
        &mut self.params
    }

    pub fn param_shapes(&self) -> Vec<&[usize]> {
        self.params.iter().map(|p| p.shape()).collect()
    }

    pub fn named_params(&self) -> Vec<(String, Array)> {
        self.names.iter().cloned().zip(self.params.iter().cloned()).collect()
    }

    pub fn load_named(&mut self, entries: &[(String, Array)]) {
        for (name, arr) in entries {
            let i = self.names.iter().position(|n| n == name).unwrap_or_else(|| panic!("unknown param {name}"));
            assert_eq!(self.params[i].shape(), arr.shape(), "shape mismatch loading {name}");
            self.params[i] = arr.clone();
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> PolicyBinding {
        PolicyBinding { vars: self.params.iter().map(|p| tape.param(p.clone())).collect() }
    }

    pub fn bind_frozen(&self, tape: &mut Tape) -> PolicyBinding {
        PolicyBinding { vars: self.params.iter().map(|p| tape.input(p.clone())).collect() }
    }

    fn var(&self, b: &PolicyBinding, name: &str) -> Var {
        let i = self.names.iter().position(|n| n == name).unwrap_or_else(|| panic!("unknown param {name}"));
        b.vars[i]
    }

    /// Batched forward: inputs (N, input_dim).
    pub fn forward(&self, tape: &mut Tape, b: &PolicyBinding, x: Var) -> PolicyOut {
        let n = tape.value(x).shape()[0];
        let mut h = x;
        for i in 0..TRUNK.len() {
            let w = self.var(b, &format!("trunk.fc{i}.w"));
            let bias = self.var(b, &format!("trunk.fc{i}.b"));
            h = tape.matmul(h, w);
            h = tape.add_row_bias(h, bias);
            h = tape.relu(h);
        }
        let aw = self.var(b, "actor.w");
        let ab = self.var(b, "actor.b");
        let pre = tape.matmul(h, aw);
        let pre = tape.add_row_bias(pre, ab);
        let mean = tape.tanh(pre);
        let ls = self.var(b, "actor.log_std");
        let ls = tape.clamp(ls, LOG_STD_MIN, LOG_STD_MAX);
        let zeros = tape.input(Array::zeros(&[n, ACTION_DIM]));
        let log_std_rows = tape.add_row_bias(zeros, ls);
        let cw = self.var(b, "critic.w");
        let cb = self.var(b, "critic.b");
        let v = tape.matmul(h, cw);
        let value = tape.add_row_bias(v, cb);
        PolicyOut { mean, log_std_rows, value }
    }
}

/// Gaussian log-density of (possibly batched) raw actions under the policy
/// head, built from tape ops: shape (N,).
pub fn log_prob(tape: &mut Tape, out: &PolicyOut, raw_actions: Var) -> Var {
    let diff = tape.sub(raw_actions, out.mean);
    let neg_ls = tape.neg(out.log_std_rows);
    let inv_sigma = tape.exp(neg_ls);
    let t = tape.mul(diff, inv_sigma);
    let sq = tape.mul(t, t);
    let u = tape.scale(sq, -0.5);
    let u = tape.sub(u, out.log_std_rows);
    let u = tape.add_scalar(u, -HALF_LN_2PI);
    tape.row_sum(u)
}

/// Differential entropy of the diagonal Gaussian (state independent).
pub fn entropy(tape: &mut Tape, model: &ActorCritic, b: &PolicyBinding) -> Var {
    let ls = model.var(b, "actor.log_std");
    let ls = tape.clamp(ls, LOG_STD_MIN, LOG_STD_MAX);
    let s = tape.sum(ls);
    tape.add_scalar(s, ACTION_DIM as f32 * (0.5 + HALF_LN_2PI))
}

/// Result of sampling the policy at one step.
#[derive(Debug, Clone, Copy)]
pub struct ActResult {
    /// Clamped action given to the simulator.
    pub action: ControlAction,
    /// Pre-clamp sample; log_prob refers to this value.
    pub raw_action: [f32; 2],
    pub log_prob: f32,
    pub value: f32,
    pub mean: [f32; 2],
}

/// Sample an action. The log-prob is computed pre-clamp via the same tape
/// ops the update uses, so the first update epoch sees ratios of exactly 1.
pub fn act(model: &ActorCritic, features: &[f32], rng: &mut impl Rng, deterministic: bool) -> ActResult {
    assert_eq!(features.len(), model.input_dim, "feature length mismatch");
    let mut tape = Tape::new();
    let b = model.bind_frozen(&mut tape);
    let x = tape.input(Array::from_vec(&[1, model.input_dim], features.to_vec()));
    let out = model.forward(&mut tape, &b, x);
    let mean = [tape.value(out.mean).data()[0], tape.value(out.mean).data()[1]];
    let ls = tape.value(out.log_std_rows).data().to_vec();
    let raw = if deterministic {
        mean
    } else {
        let e0: f32 = rng.sample(StandardNormal);
        let e1: f32 = rng.sample(StandardNormal);
        [mean[0] + ls[0].exp() * e0, mean[1] + ls[1].exp() * e1]
    };
    let actions = tape.input(Array::from_vec(&[1, ACTION_DIM], raw.to_vec()));
    let lp = log_prob(&mut tape, &out, actions);
    ActResult {
        action: ControlAction::new(raw[0].clamp(-1.0, 1.0) as f64, raw[1].clamp(-1.0, 1.0) as f64),
        raw_action: raw,
        log_prob: tape.value(lp).data()[0],
        value: tape.value(out.value).data()[0],
        mean,
    }
}

/// One step of an episode rollout.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub features: Vec<f32>,
    pub raw_action: [f32; 2],
    pub log_prob: f32,
    pub value: f32,
    pub reward: f32,
    pub done: bool,
}

/// Per-episode trajectory; terminal exactly once, at the last step.
#[derive(Debug, Clone, Default)]
pub struct RolloutBuffer {
    pub steps: Vec<StepRecord>,
    /// Value bootstrapped past the final step; zero for true terminations.
    pub bootstrap_value: f32,
}

impl RolloutBuffer {
    pub fn push(&mut self, rec: StepRecord) {
        debug_assert!(self.steps.last().map_or(true, |s| !s.done), "push after terminal");
        self.steps.push(rec);
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn is_complete(&self) -> bool {
        !self.steps.is_empty()
            && self.steps.last().unwrap().done
            && self.steps.iter().filter(|s| s.done).count() == 1
    }

    pub fn total_reward(&self) -> f32 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

#[derive(Debug, Clone)]
pub struct GaeResult {
    /// Normalized advantages (zero mean, unit variance, eps 1e-8).
    pub advantages: Vec<f32>,
    /// Raw advantage plus value: regression targets for the critic.
    pub returns: Vec<f32>,
    pub raw_advantages: Vec<f32>,
}

/// Generalized advantage estimation over a complete rollout.
pub fn gae(buffer: &RolloutBuffer, gamma: f32, lambda: f32) -> GaeResult {
    assert!(buffer.is_complete(), "gae needs a complete rollout (one terminal, at the end)");
    let t_len = buffer.len();
    let mut raw = vec![0f32; t_len];
    let mut acc = 0f32;
    for t in (0..t_len).rev() {
        let s = &buffer.steps[t];
        let next_value = if t + 1 < t_len { buffer.steps[t + 1].value } else { buffer.bootstrap_value };
        let not_done = if s.done { 0.0 } else { 1.0 };
        let delta = s.reward + gamma * next_value * not_done - s.value;
        acc = delta + gamma * lambda * not_done * acc;
        raw[t] = acc;
    }
    let returns: Vec<f32> = raw.iter().zip(&buffer.steps).map(|(a, s)| a + s.value).collect();
    let advantages = normalize(&raw);
    GaeResult { advantages, returns, raw_advantages: raw }
}

fn normalize(xs: &[f32]) -> Vec<f32> {
    let n = xs.len() as f32;
    let mean: f32 = xs.iter().sum::<f32>() / n;
    let var: f32 = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f32>() / n;
    let std = var.sqrt();
    xs.iter().map(|x| (x - mean) / (std + 1e-8)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive, stream};

    fn model() -> ActorCritic {
        let mut rng = derive(0, stream::INIT_SP);
        ActorCritic::new(8, &mut rng)
    }

    fn record(reward: f32, value: f32, done: bool) -> StepRecord {
        StepRecord { features: vec![0.0; 8], raw_action: [0.0, 0.0], log_prob: 0.0, value, reward, done }
    }

    #[test]
    fn action_clamped_logprob_preclamp() {
        let m = model();
        let mut rng = derive(1, stream::ACTION_SP);
        for _ in 0..200 {
            let r = act(&m, &[0.5; 8], &mut rng, false);
            assert!(r.action.steer.abs() <= 1.0 && r.action.accel_cmd.abs() <= 1.0);
            assert!(r.log_prob.is_finite());
        }
    }

    #[test]
    fn deterministic_act_returns_tanh_mean() {
        let m = model();
        let mut rng = derive(2, stream::ACTION_SP);
        let r = act(&m, &[0.1; 8], &mut rng, true);
        assert_eq!(r.raw_action, r.mean);
        assert!(r.mean[0].abs() <= 1.0 && r.mean[1].abs() <= 1.0);
    }

    #[test]
    fn seeded_actions_reproduce() {
        let m = model();
        let seq = |seed| {
            let mut rng = derive(seed, stream::ACTION_SP);
            (0..16).map(|_| act(&m, &[0.3; 8], &mut rng, false).raw_action).collect::<Vec<_>>()
        };
        assert_eq!(seq(7), seq(7));
        assert_ne!(seq(7), seq(8));
    }

    #[test]
    fn log_prob_matches_independent_density() {
        let m = model();
        let mut rng = derive(3, stream::ACTION_SP);
        for _ in 0..50 {
            let r = act(&m, &[0.2, -0.4, 0.0, 0.9, -0.1, 0.5, 0.3, -0.7], &mut rng, false);
            // Independent f64 Gaussian density oracle.
            let mut tape = Tape::new();
            let b = m.bind_frozen(&mut tape);
            let x = tape.input(Array::from_vec(&[1, 8], vec![0.2, -0.4, 0.0, 0.9, -0.1, 0.5, 0.3, -0.7]));
            let out = m.forward(&mut tape, &b, x);
            let mean = tape.value(out.mean).data().to_vec();
            let ls = tape.value(out.log_std_rows).data().to_vec();
            let mut expect = 0f64;
            for d in 0..2 {
                let sigma = (ls[d] as f64).exp();
                let diff = r.raw_action[d] as f64 - mean[d] as f64;
                expect += -0.5 * (diff / sigma).powi(2)
                    - (sigma).ln()
                    - 0.5 * (2.0 * std::f64::consts::PI).ln();
            }
            assert!((r.log_prob as f64 - expect).abs() < 1e-5, "{} vs {}", r.log_prob, expect);
        }
    }

    #[test]
    fn sigma_zero_limit_is_mean() {
        // Degenerate distribution: zero noise scale collapses onto the mean.
        let mean = 0.37f32;
        let sigma = 0.0f32;
        let eps = 1.93f32;
        assert_eq!(mean + sigma * eps, mean);
    }

    #[test]
    fn gae_one_step_unit_reward() {
        let mut buf = RolloutBuffer::default();
        buf.push(record(1.0, 0.0, true));
        let g = gae(&buf, 0.99, 0.95);
        assert!((g.raw_advantages[0] - 1.0).abs() < 1e-7);
        assert!((g.returns[0] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn gae_matches_brute_force_double_loop() {
        let mut rng = derive(4, stream::EVAL);
        for _ in 0..100 {
            let t_len = 1 + (rng.gen::<u32>() % 40) as usize;
            let mut buf = RolloutBuffer::default();
            for t in 0..t_len {
                let r: f32 = rng.gen::<f32>() * 2.0 - 1.0;
                let v: f32 = rng.gen::<f32>() * 2.0 - 1.0;
                buf.push(record(r, v, t == t_len - 1));
            }
            let gamma = 0.99f32;
            let lambda = 0.95f32;
            let got = gae(&buf, gamma, lambda);
            // O(T^2) reference in f64.
            for t in 0..t_len {
                let mut expect = 0f64;
                for l in 0..(t_len - t) {
                    let k = t + l;
                    let next_v = if k + 1 < t_len { buf.steps[k + 1].value } else { 0.0 };
                    let not_done = if buf.steps[k].done { 0.0 } else { 1.0 };
                    let delta = buf.steps[k].reward as f64 + gamma as f64 * next_v as f64 * not_done as f64
                        - buf.steps[k].value as f64;
                    expect += (gamma as f64 * lambda as f64).powi(l as i32) * delta;
                    if buf.steps[k].done {
                        break;
                    }
                }
                assert!(
                    (got.raw_advantages[t] as f64 - expect).abs() < 1e-4,
                    "t {}: {} vs {}",
                    t,
                    got.raw_advantages[t],
                    expect
                );
            }
        }
    }

    #[test]
    fn gae_lambda_edges() {
        let mut rng = derive(5, stream::EVAL);
        let t_len = 20;
        let mut buf = RolloutBuffer::default();
        for t in 0..t_len {
            buf.push(record(rng.gen::<f32>(), rng.gen::<f32>(), t == t_len - 1));
        }
        // lambda = 0: TD residual.
        let g0 = gae(&buf, 0.9, 0.0);
        for t in 0..t_len {
            let next_v = if t + 1 < t_len { buf.steps[t + 1].value } else { 0.0 };
            let nd = if buf.steps[t].done { 0.0 } else { 1.0 };
            let td = buf.steps[t].reward + 0.9 * next_v * nd - buf.steps[t].value;
            assert!((g0.raw_advantages[t] - td).abs() < 1e-6);
        }
        // lambda = 1: discounted Monte Carlo return minus baseline.
        let g1 = gae(&buf, 0.9, 1.0);
        for t in 0..t_len {
            let mut mc = 0f64;
            for k in t..t_len {
                mc += (0.9f64).powi((k - t) as i32) * buf.steps[k].reward as f64;
            }
            let expect = mc - buf.steps[t].value as f64;
            assert!((g1.raw_advantages[t] as f64 - expect).abs() < 1e-4);
        }
    }

    #[test]
    fn gae_constant_value_gamma_one() {
        // All rewards 0, V = c, gamma = lambda = 1: A_t = -c at the final
        // step, propagating -c each step (delta = -c only at the terminal,
        // 0 elsewhere since V cancels).
        let c = 0.7f32;
        let t_len = 10;
        let mut buf = RolloutBuffer::default();
        for t in 0..t_len {
            buf.push(record(0.0, c, t == t_len - 1));
        }
        let g = gae(&buf, 1.0, 1.0);
        for t in 0..t_len {
            assert!((g.raw_advantages[t] + c).abs() < 1e-6, "A_{t} = -c");
        }
    }

    #[test]
    fn normalized_advantages_standardized() {
        let mut buf = RolloutBuffer::default();
        for t in 0..50 {
            buf.push(record((t as f32 * 0.37).sin(), (t as f32 * 0.11).cos(), t == 49));
        }
        let g = gae(&buf, 0.99, 0.95);
        let n = g.advantages.len() as f32;
        let mean: f32 = g.advantages.iter().sum::<f32>() / n;
        let var: f32 = g.advantages.iter().map(|a| (a - mean) * (a - mean)).sum::<f32>() / n;
        assert!(mean.abs() < 1e-6);
        assert!((var.sqrt() - 1.0).abs() < 1e-4);
    }

    #[test]
    #[should_panic(expected = "complete rollout")]
    fn incomplete_rollout_rejected() {
        let mut buf = RolloutBuffer::default();
        buf.push(record(0.0, 0.0, false));
        let _ = gae(&buf, 0.99, 0.95);
    }
}
