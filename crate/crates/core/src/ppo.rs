//! Clipped-surrogate PPO over per-episode rollouts.

use serde::{Deserialize, Serialize};

use crate::numerics::{clip_global_norm, AdamState, Array, Tape};
use crate::policy::{entropy, gae, log_prob, ActorCritic, RolloutBuffer};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpoConfig {
    /// Policy ratio clip epsilon.
    pub clip: f32,
    /// Full-batch epochs per episode.
    pub epochs: usize,
    pub value_clip: f32,
    pub value_coef: f32,
    pub entropy_coef: f32,
    pub max_grad_norm: f32,
    pub gamma: f32,
    pub lambda: f32,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip: 0.1,
            epochs: 15,
            value_clip: 0.1,
            value_coef: 0.5,
            entropy_coef: 0.01,
            max_grad_norm: 0.5,
            gamma: 0.99,
            lambda: 0.95,
        }
    }
}

/// Probability ratio between new and old policies.
pub fn ratio(log_prob_new: f32, log_prob_old: f32) -> f32 {
    (log_prob_new - log_prob_old).exp()
}

/// Per-step clipped surrogate: min(r*A, clip(r, 1-eps, 1+eps)*A).
pub fn clipped_objective(r: f32, advantage: f32, eps: f32) -> f32 {
    (r * advantage).min(r.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EpochStats {
    pub policy_loss: f32,
    pub value_loss: f32,
    pub entropy: f32,
    pub mean_ratio: f32,
    pub clip_fraction: f32,
}

#[derive(Debug, Clone, Default)]
pub struct UpdateStats {
    /// First-epoch statistics (ratios are identically 1 when θ = θ_old).
    pub mean_ratio: f32,
    pub clip_fraction: f32,
    /// Averages over all epochs.
    pub policy_loss: f32,
    pub value_loss: f32,
    pub entropy: f32,
    pub epochs: Vec<EpochStats>,
    pub lr: f32,
}

/// Run the configured number of full-batch epochs on one complete rollout.
///
/// The old-policy snapshot is the rollout itself: stored log-probs were
/// computed by the same forward path at collection time.
pub fn update(
    model: &mut ActorCritic,
    rollout: &RolloutBuffer,
    cfg: &PpoConfig,
    adam: &mut AdamState,
) -> UpdateStats {
    assert!(rollout.is_complete(), "ppo update needs a complete, non-empty rollout");
    let t_len = rollout.len();
    let dim = model.input_dim;

    let g = gae(rollout, cfg.gamma, cfg.lambda);
    let mut xs = Vec::with_capacity(t_len * dim);
    let mut acts = Vec::with_capacity(t_len * 2);
    let mut lp_old = Vec::with_capacity(t_len);
    let mut v_old = Vec::with_capacity(t_len);
    for s in &rollout.steps {
        assert_eq!(s.features.len(), dim, "feature width drifted");
        xs.extend_from_slice(&s.features);
        acts.extend_from_slice(&s.raw_action);
        lp_old.push(s.log_prob);
        v_old.push(s.value);
    }

    let mut stats = UpdateStats { lr: adam.current_lr(), ..Default::default() };
    for epoch in 0..cfg.epochs {
        let mut tape = Tape::new();
        let b = model.bind(&mut tape);
        let x = tape.input(Array::from_vec(&[t_len, dim], xs.clone()));
        let out = model.forward(&mut tape, &b, x);
        let a = tape.input(Array::from_vec(&[t_len, 2], acts.clone()));
        let lp_new = log_prob(&mut tape, &out, a);
        let lp_old_v = tape.input(Array::from_vec(&[t_len], lp_old.clone()));
        let diff = tape.sub(lp_new, lp_old_v);
        let ratio_v = tape.exp(diff);
        let adv = tape.input(Array::from_vec(&[t_len], g.advantages.clone()));
        let surr1 = tape.mul(ratio_v, adv);
        let rclip = tape.clamp(ratio_v, 1.0 - cfg.clip, 1.0 + cfg.clip);
        let surr2 = tape.mul(rclip, adv);
        let surr = tape.minimum(surr1, surr2);
        let mean_surr = tape.mean(surr);
        let policy_loss = tape.neg(mean_surr);

        // Clipped value loss.
        let v_new = {
            let v = out.value;
            tape.reshape(v, &[t_len])
        };
        let v_old_v = tape.input(Array::from_vec(&[t_len], v_old.clone()));
        let ret = tape.input(Array::from_vec(&[t_len], g.returns.clone()));
        let vdiff = tape.sub(v_new, v_old_v);
        let vdiff_c = tape.clamp(vdiff, -cfg.value_clip, cfg.value_clip);
        let v_clipped = tape.add(v_old_v, vdiff_c);
        let e1 = tape.sub(v_new, ret);
        let e1s = tape.mul(e1, e1);
        let e2 = tape.sub(v_clipped, ret);
        let e2s = tape.mul(e2, e2);
        let vmax = tape.maximum(e1s, e2s);
        let value_loss = tape.mean(vmax);

        let ent = entropy(&mut tape, model, &b);

        let vterm = tape.scale(value_loss, cfg.value_coef);
        let eterm = tape.scale(ent, -cfg.entropy_coef);
        let partial = tape.add(policy_loss, vterm);
        let total = tape.add(partial, eterm);

        // Ratio positivity and min-structure invariants, checked live on
        // every epoch of every update.
        let ratios = tape.value(ratio_v).data();
        let surr_min = tape.value(surr).data();
        let surr_un = tape.value(surr1).data();
        for t in 0..t_len {
            assert!(ratios[t] > 0.0, "ratio must be positive");
            assert!(surr_min[t] <= surr_un[t] + 1e-6, "clipped surrogate exceeds unclipped");
        }

        let grads = tape.backward(total);
        let mut gvec: Vec<Array> = b
            .vars()
            .iter()
            .zip(model.params())
            .map(|(v, p)| grads.get(*v).cloned().unwrap_or_else(|| Array::zeros(p.shape())))
            .collect();
        clip_global_norm(&mut gvec, cfg.max_grad_norm);

        let ep = EpochStats {
            policy_loss: tape.value(policy_loss).item(),
            value_loss: tape.value(value_loss).item(),
            entropy: tape.value(ent).item(),
            mean_ratio: ratios.iter().sum::<f32>() / t_len as f32,
            clip_fraction: ratios
                .iter()
                .filter(|r| **r < 1.0 - cfg.clip || **r > 1.0 + cfg.clip)
                .count() as f32
                / t_len as f32,
        };
        if epoch == 0 {
            stats.mean_ratio = ep.mean_ratio;
            stats.clip_fraction = ep.clip_fraction;
        }
        stats.policy_loss += ep.policy_loss;
        stats.value_loss += ep.value_loss;
        stats.entropy += ep.entropy;
        stats.epochs.push(ep);

        adam.step(model.params_mut(), &gvec);
    }
    let n = cfg.epochs as f32;
    stats.policy_loss /= n;
    stats.value_loss /= n;
    stats.entropy /= n;
    stats
}

/// Gradient of the pure clipped-surrogate policy loss at the current
/// parameters (no value/entropy terms, no optimizer state).
pub fn surrogate_gradients(model: &ActorCritic, rollout: &RolloutBuffer, cfg: &PpoConfig) -> Vec<Array> {
    let g = gae(rollout, cfg.gamma, cfg.lambda);
    let t_len = rollout.len();
    let dim = model.input_dim;
    let mut tape = Tape::new();
    let b = model.bind(&mut tape);
    let xs: Vec<f32> = rollout.steps.iter().flat_map(|s| s.features.clone()).collect();
    let x = tape.input(Array::from_vec(&[t_len, dim], xs));
    let out = model.forward(&mut tape, &b, x);
    let acts: Vec<f32> = rollout.steps.iter().flat_map(|s| s.raw_action).collect();
    let a = tape.input(Array::from_vec(&[t_len, 2], acts));
    let lp_new = log_prob(&mut tape, &out, a);
    let lp_old = tape.input(Array::from_vec(&[t_len], rollout.steps.iter().map(|s| s.log_prob).collect()));
    let diff = tape.sub(lp_new, lp_old);
    let ratio_v = tape.exp(diff);
    let adv = tape.input(Array::from_vec(&[t_len], g.advantages.clone()));
    let surr1 = tape.mul(ratio_v, adv);
    let rclip = tape.clamp(ratio_v, 1.0 - cfg.clip, 1.0 + cfg.clip);
    let surr2 = tape.mul(rclip, adv);
    let surr = tape.minimum(surr1, surr2);
    let mean_surr = tape.mean(surr);
    let loss = tape.neg(mean_surr);
    let grads = tape.backward(loss);
    b.vars()
        .iter()
        .zip(model.params())
        .map(|(v, p)| grads.get(*v).cloned().unwrap_or_else(|| Array::zeros(p.shape())))
        .collect()
}

/// Gradient of the vanilla policy-gradient loss -mean(log pi(a|s) * A) on
/// the same batch; at θ = θ_old this equals the surrogate gradient with the
/// clip disabled.
pub fn reinforce_gradients(model: &ActorCritic, rollout: &RolloutBuffer, cfg: &PpoConfig) -> Vec<Array> {
    let g = gae(rollout, cfg.gamma, cfg.lambda);
    let t_len = rollout.len();
    let dim = model.input_dim;
    let mut tape = Tape::new();
    let b = model.bind(&mut tape);
    let xs: Vec<f32> = rollout.steps.iter().flat_map(|s| s.features.clone()).collect();
    let x = tape.input(Array::from_vec(&[t_len, dim], xs));
    let out = model.forward(&mut tape, &b, x);
    let acts: Vec<f32> = rollout.steps.iter().flat_map(|s| s.raw_action).collect();
    let a = tape.input(Array::from_vec(&[t_len, 2], acts));
    let lp = log_prob(&mut tape, &out, a);
    let adv = tape.input(Array::from_vec(&[t_len], g.advantages.clone()));
    let weighted = tape.mul(lp, adv);
    let m = tape.mean(weighted);
    let loss = tape.neg(m);
    let grads = tape.backward(loss);
    b.vars()
        .iter()
        .zip(model.params())
        .map(|(v, p)| grads.get(*v).cloned().unwrap_or_else(|| Array::zeros(p.shape())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::AdamConfig;
    use crate::policy::{act, StepRecord};
    use crate::rng::{derive, stream};

    #[test]
    fn ratio_identities() {
        assert_eq!(ratio(-1.5, -1.5), 1.0);
        assert!((ratio(std::f32::consts::LN_2, 0.0) - 2.0).abs() < 1e-6);
        assert!((ratio(0.0, std::f32::consts::LN_2) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn clipped_objective_paper_cases() {
        assert!((clipped_objective(1.3, 1.0, 0.1) - 1.1).abs() < 1e-6);
        assert!((clipped_objective(0.7, -1.0, 0.1) - (-0.9)).abs() < 1e-6);
        assert!((clipped_objective(1.0, 0.42, 0.1) - 0.42).abs() < 1e-6);
        assert!((clipped_objective(1.0, -3.0, 0.1) - (-3.0)).abs() < 1e-6);
    }

    fn rollout_from_policy(model: &ActorCritic, t_len: usize, seed: u64) -> RolloutBuffer {
        let mut rng = derive(seed, stream::ACTION_SP);
        let mut frng = derive(seed + 1, stream::EVAL);
        let mut buf = RolloutBuffer::default();
        use rand::Rng;
        for t in 0..t_len {
            let features: Vec<f32> = (0..model.input_dim).map(|_| frng.gen::<f32>() - 0.5).collect();
            let r = act(model, &features, &mut rng, false);
            buf.push(StepRecord {
                features,
                raw_action: r.raw_action,
                log_prob: r.log_prob,
                value: r.value,
                reward: if t == t_len - 1 { 1.0 } else { 0.0 },
                done: t == t_len - 1,
            });
        }
        buf
    }

    #[test]
    fn first_epoch_ratio_is_one_with_no_clipping() {
        let mut rng = derive(0, stream::INIT_SP);
        let mut model = ActorCritic::new(6, &mut rng);
        let rollout = rollout_from_policy(&model, 40, 11);
        let mut adam = AdamState::new(AdamConfig { base_lr: 1e-4, ..Default::default() }, &model.param_shapes());
        let stats = update(&mut model, &rollout, &PpoConfig::default(), &mut adam);
        assert!((stats.mean_ratio - 1.0).abs() < 1e-5, "mean ratio {}", stats.mean_ratio);
        assert_eq!(stats.clip_fraction, 0.0);
        assert_eq!(stats.epochs.len(), 15);
    }

    #[test]
    fn update_is_deterministic() {
        let run = || {
            let mut rng = derive(1, stream::INIT_SP);
            let mut model = ActorCritic::new(6, &mut rng);
            let rollout = rollout_from_policy(&model, 24, 5);
            let mut adam = AdamState::new(AdamConfig { base_lr: 1e-4, ..Default::default() }, &model.param_shapes());
            update(&mut model, &rollout, &PpoConfig::default(), &mut adam);
            model.params().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn unclipped_single_epoch_matches_reinforce_direction() {
        let mut rng = derive(2, stream::INIT_SP);
        let model = ActorCritic::new(6, &mut rng);
        let rollout = rollout_from_policy(&model, 32, 9);
        let cfg = PpoConfig { clip: 1e9, ..Default::default() };
        let a = surrogate_gradients(&model, &rollout, &cfg);
        let b = reinforce_gradients(&model, &rollout, &cfg);
        let dot: f64 = a
            .iter()
            .zip(&b)
            .flat_map(|(x, y)| x.data().iter().zip(y.data()))
            .map(|(x, y)| *x as f64 * *y as f64)
            .sum();
        let na: f64 = a.iter().flat_map(|x| x.data()).map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = b.iter().flat_map(|x| x.data()).map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        let cos = dot / (na * nb);
        assert!(cos > 0.999, "cosine {}", cos);
    }
}
