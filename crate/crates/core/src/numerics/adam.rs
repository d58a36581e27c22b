//! Adam with bias correction and the step-wise learning-rate decay schedule.

use serde::{Deserialize, Serialize};

use super::array::Array;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub base_lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Decay the lr by `decay_factor` every `decay_every` steps.
    pub decay_every: u64,
    pub decay_factor: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_every: 5000,
            decay_factor: 0.96,
        }
    }
}

/// Per-parameter first/second moment estimates plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub cfg: AdamConfig,
    m: Vec<Array>,
    v: Vec<Array>,
    t: u64,
}

impl AdamState {
    pub fn new(cfg: AdamConfig, shapes: &[&[usize]]) -> Self {
        Self {
            cfg,
            m: shapes.iter().map(|s| Array::zeros(s)).collect(),
            v: shapes.iter().map(|s| Array::zeros(s)).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// lr(t) = base_lr * factor^floor(t / every), with t the 1-based index of
    /// the step about to be (or just) taken.
    pub fn lr_at(&self, t: u64) -> f32 {
        self.cfg.base_lr * self.cfg.decay_factor.powi((t / self.cfg.decay_every) as i32)
    }

    /// The learning rate the next step will use.
    pub fn current_lr(&self) -> f32 {
        self.lr_at(self.t + 1)
    }

    /// One Adam update over the full parameter list. Gradients must be
    /// positionally aligned with the parameters given at construction.
    pub fn step(&mut self, params: &mut [Array], grads: &[Array]) {
        assert_eq!(params.len(), self.m.len(), "adam: parameter count changed");
        assert_eq!(grads.len(), self.m.len(), "adam: gradient count mismatch");
        self.t += 1;
        let lr = self.lr_at(self.t);
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            assert_eq!(p.shape(), g.shape(), "adam: shape mismatch {:?} vs {:?}", p.shape(), g.shape());
            for ((pv, gv), (mv, vv)) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_drops_when_crossing_decay_step() {
        let st = AdamState::new(AdamConfig::default(), &[&[1]]);
        assert!((st.lr_at(4999) - 1.0e-5).abs() < 1e-12);
        assert!((st.lr_at(5000) - 0.96e-5).abs() < 1e-12);
        assert!((st.lr_at(10000) - 0.96f32 * 0.96 * 1.0e-5).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut st = AdamState::new(AdamConfig::default(), &[&[3]]);
        let mut params = vec![Array::from_vec(&[3], vec![1.0, -2.0, 0.5])];
        let before = params[0].clone();
        for _ in 0..10 {
            st.step(&mut params, &[Array::zeros(&[3])]);
        }
        assert_eq!(params[0], before);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        // With constant gradient g, bias-corrected Adam's first step is
        // -lr * g/|g| (eps-perturbed).
        let cfg = AdamConfig { base_lr: 1e-3, ..Default::default() };
        let mut st = AdamState::new(cfg, &[&[1]]);
        let mut params = vec![Array::scalar(0.0)];
        st.step(&mut params, &[Array::scalar(0.37)]);
        let expect = -1e-3f64 * 0.37 / (0.37 + 1e-8);
        assert!((params[0].item() as f64 - expect).abs() < 1e-9);
    }
}
