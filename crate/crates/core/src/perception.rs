//! VAE world model trained from a replay buffer of navigation views.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::numerics::{he_init, randn, AdamState, Array, Tape, Var};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeConfig {
    /// Square view edge, pixels; must be divisible by 32 (five stride-2 convs).
    pub view_hw: usize,
    /// Encoder filter counts per conv layer; decoder mirrors them.
    pub filters: Vec<usize>,
    pub latent_dim: usize,
    /// KL weight.
    pub beta: f32,
    pub batch_size: usize,
    pub buffer_capacity: usize,
}

impl VaeConfig {
    pub fn full() -> Self {
        Self {
            view_hw: 256,
            filters: vec![32, 64, 128, 256, 256],
            latent_dim: 256,
            beta: 1.0,
            batch_size: 100,
            buffer_capacity: 50_000,
        }
    }

    pub fn desk() -> Self {
        Self {
            view_hw: 64,
            filters: vec![16, 32, 64, 128, 128],
            latent_dim: 32,
            beta: 1.0,
            batch_size: 64,
            buffer_capacity: 384,
        }
    }

    /// Spatial edge after the conv stack.
    pub fn bottleneck_hw(&self) -> usize {
        self.view_hw >> self.filters.len()
    }

    fn flat_dim(&self) -> usize {
        let hw = self.bottleneck_hw();
        self.filters[self.filters.len() - 1] * hw * hw
    }
}

const KERNEL: usize = 4;
const STRIDE: usize = 2;
const PAD: usize = 1;
const LOGVAR_CLAMP: f32 = 10.0;

/// Encoder/decoder parameters, ordered and named for checkpointing.
pub struct Vae {
    pub cfg: VaeConfig,
    names: Vec<String>,
    params: Vec<Array>,
}

/// Tape-bound parameter handles for one forward/backward pass.
pub struct VaeBinding {
    vars: Vec<Var>,
}

impl Vae {
    pub fn new(cfg: VaeConfig, rng: &mut impl Rng) -> Self {
        assert_eq!(cfg.view_hw % 32, 0, "view edge must be divisible by 32");
        assert_eq!(cfg.filters.len(), 5, "five conv layers");
        let mut names = Vec::new();
        let mut params = Vec::new();
        let mut push = |n: String, a: Array, names: &mut Vec<String>, params: &mut Vec<Array>| {
            names.push(n);
            params.push(a);
        };
        let mut c_in = 3usize;
        for (i, &c_out) in cfg.filters.iter().enumerate() {
            push(
                format!("enc.conv{i}.w"),
                he_init(&[c_out, c_in, KERNEL, KERNEL], c_in * KERNEL * KERNEL, rng),
                &mut names,
                &mut params,
            );
            push(format!("enc.conv{i}.b"), Array::zeros(&[c_out]), &mut names, &mut params);
            c_in = c_out;
        }
        let flat = cfg.flat_dim();
        push("enc.mu.w".into(), randn(&[flat, cfg.latent_dim], 0.01, rng), &mut names, &mut params);
        push("enc.mu.b".into(), Array::zeros(&[cfg.latent_dim]), &mut names, &mut params);
        push("enc.logvar.w".into(), randn(&[flat, cfg.latent_dim], 0.01, rng), &mut names, &mut params);
        push("enc.logvar.b".into(), Array::zeros(&[cfg.latent_dim]), &mut names, &mut params);
        push("dec.fc.w".into(), he_init(&[cfg.latent_dim, flat], cfg.latent_dim, rng), &mut names, &mut params);
        push("dec.fc.b".into(), Array::zeros(&[flat]), &mut names, &mut params);
        let mut c_in = cfg.filters[cfg.filters.len() - 1];
        let mut outs: Vec<usize> = cfg.filters.iter().rev().skip(1).copied().collect();
        outs.push(3);
        for (i, &c_out) in outs.iter().enumerate() {
            push(
                format!("dec.tconv{i}.w"),
                he_init(&[c_in, c_out, KERNEL, KERNEL], c_in * KERNEL * KERNEL, rng),
                &mut names,
                &mut params,
            );
            push(format!("dec.tconv{i}.b"), Array::zeros(&[c_out]), &mut names, &mut params);
            c_in = c_out;
        }
        Self { cfg, names, params }
    }

    pub fn params(&self) -> &[Array] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Array] {
        &mut self.params
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

    pub fn param_shapes(&self) -> Vec<&[usize]> {
        self.params.iter().map(|p| p.shape()).collect()
    }

    /// Bind parameters onto a tape as differentiable leaves.
    pub fn bind(&self, tape: &mut Tape) -> VaeBinding {
        VaeBinding { vars: self.params.iter().map(|p| tape.param(p.clone())).collect() }
    }

    /// Bind as constants (inference).
    pub fn bind_frozen(&self, tape: &mut Tape) -> VaeBinding {
        VaeBinding { vars: self.params.iter().map(|p| tape.input(p.clone())).collect() }
    }

    fn var(&self, b: &VaeBinding, name: &str) -> Var {
        let i = self.names.iter().position(|n| n == name).unwrap_or_else(|| panic!("unknown param {name}"));
        b.vars[i]
    }

    /// Encoder: batch (N,3,H,W) in [0,1] -> (mu, logvar), each (N, latent).
    pub fn encode(&self, tape: &mut Tape, b: &VaeBinding, x: Var) -> (Var, Var) {
        let n = tape.value(x).shape()[0];
        let mut h = x;
        for i in 0..self.cfg.filters.len() {
            let w = self.var(b, &format!("enc.conv{i}.w"));
            let bias = self.var(b, &format!("enc.conv{i}.b"));
            h = tape.conv2d(h, w, STRIDE, PAD);
            h = tape.add_chan_bias(h, bias);
            h = tape.relu(h);
        }
        let flat = tape.reshape(h, &[n, self.cfg.flat_dim()]);
        let mu_w = self.var(b, "enc.mu.w");
        let mu_b = self.var(b, "enc.mu.b");
        let mu = tape.matmul(flat, mu_w);
        let mu = tape.add_row_bias(mu, mu_b);
        let lv_w = self.var(b, "enc.logvar.w");
        let lv_b = self.var(b, "enc.logvar.b");
        let lv = tape.matmul(flat, lv_w);
        let lv = tape.add_row_bias(lv, lv_b);
        let lv = tape.clamp(lv, -LOGVAR_CLAMP, LOGVAR_CLAMP);
        (mu, lv)
    }

    /// Decoder: (N, latent) -> pre-sigmoid logits (N,3,H,W).
    pub fn decode_logits(&self, tape: &mut Tape, b: &VaeBinding, z: Var) -> Var {
        let n = tape.value(z).shape()[0];
        let fc_w = self.var(b, "dec.fc.w");
        let fc_b = self.var(b, "dec.fc.b");
        let h = tape.matmul(z, fc_w);
        let h = tape.add_row_bias(h, fc_b);
        let h = tape.relu(h);
        let hw = self.cfg.bottleneck_hw();
        let c5 = self.cfg.filters[self.cfg.filters.len() - 1];
        let mut h = tape.reshape(h, &[n, c5, hw, hw]);
        let layers = self.cfg.filters.len();
        for i in 0..layers {
            let w = self.var(b, &format!("dec.tconv{i}.w"));
            let bias = self.var(b, &format!("dec.tconv{i}.b"));
            h = tape.conv_transpose2d(h, w, STRIDE, PAD);
            h = tape.add_chan_bias(h, bias);
            if i + 1 < layers {
                h = tape.relu(h);
            }
        }
        h
    }

    /// Decoder output in (0,1).
    pub fn decode(&self, tape: &mut Tape, b: &VaeBinding, z: Var) -> Var {
        let logits = self.decode_logits(tape, b, z);
        tape.sigmoid(logits)
    }

    /// Inference-path world vector: the mu head for a single frame.
    pub fn world_vector(&self, frame: &Array) -> Vec<f32> {
        let mut tape = Tape::new();
        let b = self.bind_frozen(&mut tape);
        let s = frame.shape().to_vec();
        assert_eq!(s.len(), 3, "frame must be (3,h,w)");
        let x = tape.input(frame.clone().reshaped(&[1, s[0], s[1], s[2]]));
        let (mu, _) = self.encode(&mut tape, &b, x);
        tape.value(mu).data().to_vec()
    }
}

/// Closed-form KL(N(mu, sigma^2) || N(0, I)) summed over dims, averaged over
/// the batch, built from tape ops so it backpropagates.
pub fn kl_term(tape: &mut Tape, mu: Var, logvar: Var, batch_n: usize) -> Var {
    let mu2 = tape.mul(mu, mu);
    let var = tape.exp(logvar);
    let one_plus = tape.add_scalar(logvar, 1.0);
    let t = tape.sub(one_plus, mu2);
    let t = tape.sub(t, var);
    let s = tape.sum(t);
    tape.scale(s, -0.5 / batch_n as f32)
}

/// Loss pieces for one batch.
pub struct VaeLoss {
    pub loss: Var,
    pub recon: f32,
    pub kl: f32,
}

/// BCE reconstruction (summed per sample, averaged over batch) plus beta*KL.
/// Targets must lie in [0,1]. Noise drives the reparameterized sample.
pub fn vae_loss(vae: &Vae, tape: &mut Tape, b: &VaeBinding, batch: Var, noise: Var) -> VaeLoss {
    let n = tape.value(batch).shape()[0];
    let (mu, logvar) = vae.encode(tape, b, batch);
    let z = tape.gaussian_sample(mu, logvar, noise);
    let logits = vae.decode_logits(tape, b, z);
    let bce = tape.bce_logits(logits, batch);
    let bce_sum = tape.sum(bce);
    let recon = tape.scale(bce_sum, 1.0 / n as f32);
    let kl = kl_term(tape, mu, logvar, n);
    let klw = tape.scale(kl, vae.cfg.beta);
    let loss = tape.add(recon, klw);
    VaeLoss { loss, recon: tape.value(recon).item(), kl: tape.value(kl).item() }
}

/// Ring buffer of rasterized frames stored as raw bytes.
pub struct ReplayBuffer {
    capacity: usize,
    frame_hw: usize,
    frames: Vec<Vec<u8>>,
    cursor: usize,
    total_pushed: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, frame_hw: usize) -> Self {
        Self { capacity, frame_hw, frames: Vec::new(), cursor: 0, total_pushed: 0 }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn total_pushed(&self) -> u64 {
        self.total_pushed
    }

    pub fn push(&mut self, frame: Vec<u8>) {
        assert_eq!(frame.len(), self.frame_hw * self.frame_hw * 3, "frame size mismatch");
        self.total_pushed += 1;
        if self.frames.len() < self.capacity {
            self.frames.push(frame);
        } else {
            self.frames[self.cursor] = frame;
            self.cursor = (self.cursor + 1) % self.capacity;
        }
    }

    /// Float batch (N,3,H,W) in [0,1] from explicit indices.
    pub fn gather(&self, idx: &[usize]) -> Array {
        let hw = self.frame_hw;
        let plane = hw * hw;
        let mut data = vec![0f32; idx.len() * 3 * plane];
        for (bi, &fi) in idx.iter().enumerate() {
            let f = &self.frames[fi];
            let base = bi * 3 * plane;
            for p in 0..plane {
                for c in 0..3 {
                    data[base + c * plane + p] = f[p * 3 + c] as f32 / 255.0;
                }
            }
        }
        Array::from_vec(&[idx.len(), 3, hw, hw], data)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TickStats {
    pub steps: usize,
    pub mean_loss: f32,
    pub mean_recon: f32,
    pub mean_kl: f32,
    /// No-op tick because the buffer was empty.
    pub skipped: bool,
}

/// One pass over the buffer: the snapshot is shuffled and split into batches
/// of at most `batch_size`, one Adam step each.
pub fn train_tick(vae: &mut Vae, buffer: &ReplayBuffer, adam: &mut AdamState, rng: &mut impl Rng) -> TickStats {
    let size = buffer.len();
    if size == 0 {
        return TickStats { skipped: true, ..Default::default() };
    }
    let batch = vae.cfg.batch_size;
    let mut order: Vec<usize> = (0..size).collect();
    order.shuffle(rng);
    let mut stats = TickStats::default();
    for chunk in order.chunks(batch) {
        let target = buffer.gather(chunk);
        let noise_data: Vec<f32> =
            (0..chunk.len() * vae.cfg.latent_dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        let noise = Array::from_vec(&[chunk.len(), vae.cfg.latent_dim], noise_data);

        let mut tape = Tape::new();
        let b = vae.bind(&mut tape);
        let x = tape.input(target);
        let nz = tape.input(noise);
        let out = vae_loss(vae, &mut tape, &b, x, nz);
        let grads = tape.backward(out.loss);
        let gvec: Vec<Array> =
            b.vars.iter().zip(vae.params()).map(|(v, p)| grads.get(*v).cloned().unwrap_or_else(|| Array::zeros(p.shape()))).collect();
        adam.step(vae.params_mut(), &gvec);

        stats.steps += 1;
        stats.mean_loss += tape.value(out.loss).item();
        stats.mean_recon += out.recon;
        stats.mean_kl += out.kl;
    }
    if stats.steps > 0 {
        stats.mean_loss /= stats.steps as f32;
        stats.mean_recon /= stats.steps as f32;
        stats.mean_kl /= stats.steps as f32;
    }
    stats
}

/// Deterministic validation reconstruction loss (z = mu, no sampling).
pub fn validation_recon_loss(vae: &Vae, frames: &Array) -> f32 {
    let n = frames.shape()[0];
    let mut tape = Tape::new();
    let b = vae.bind_frozen(&mut tape);
    let x = tape.input(frames.clone());
    let (mu, _) = vae.encode(&mut tape, &b, x);
    let logits = vae.decode_logits(&mut tape, &b, mu);
    let bce = tape.bce_logits(logits, x);
    let s = tape.sum(bce);
    tape.value(s).item() / n as f32
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive, stream};

    fn tiny_cfg() -> VaeConfig {
        VaeConfig {
            view_hw: 32,
            filters: vec![4, 8, 8, 8, 8],
            latent_dim: 8,
            beta: 1.0,
            batch_size: 4,
            buffer_capacity: 16,
        }
    }

    #[test]
    fn shapes_round_trip() {
        let mut rng = derive(0, stream::INIT_VAE);
        let vae = Vae::new(tiny_cfg(), &mut rng);
        let mut tape = Tape::new();
        let b = vae.bind_frozen(&mut tape);
        let x = tape.input(Array::full(&[2, 3, 32, 32], 0.5));
        let (mu, lv) = vae.encode(&mut tape, &b, x);
        assert_eq!(tape.value(mu).shape(), &[2, 8]);
        assert_eq!(tape.value(lv).shape(), &[2, 8]);
        let out = vae.decode(&mut tape, &b, mu);
        assert_eq!(tape.value(out).shape(), &[2, 3, 32, 32]);
        assert!(tape.value(out).data().iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn encode_is_deterministic_and_finite() {
        let mut rng = derive(1, stream::INIT_VAE);
        let vae = Vae::new(tiny_cfg(), &mut rng);
        let frame = Array::full(&[3, 32, 32], 0.25);
        let a = vae.world_vector(&frame);
        let b = vae.world_vector(&frame);
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn kl_analytic_cases() {
        // mu=0, logvar=0 -> 0; mu=1, logvar=0 -> 0.5 per dim.
        let mut tape = Tape::new();
        let mu = tape.input(Array::zeros(&[1, 4]));
        let lv = tape.input(Array::zeros(&[1, 4]));
        let kl = kl_term(&mut tape, mu, lv, 1);
        assert!(tape.value(kl).item().abs() < 1e-6);

        let mut tape = Tape::new();
        let mu = tape.input(Array::full(&[1, 4], 1.0));
        let lv = tape.input(Array::zeros(&[1, 4]));
        let kl = kl_term(&mut tape, mu, lv, 1);
        assert!((tape.value(kl).item() - 2.0).abs() < 1e-6, "0.5 per dim * 4 dims");
    }

    #[test]
    fn bce_at_half_is_ln2_per_element() {
        // Decoder logits of 0 produce 0.5 everywhere; per-pixel BCE is ln 2
        // for any target.
        let mut tape = Tape::new();
        let logits = tape.input(Array::zeros(&[2, 3]));
        let target = tape.input(Array::from_vec(&[2, 3], vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.1]));
        let bce = tape.bce_logits(logits, target);
        for v in tape.value(bce).data() {
            assert!((v - std::f32::consts::LN_2).abs() < 1e-6);
        }
    }

    #[test]
    fn buffer_overwrites_oldest_when_full() {
        let mut buf = ReplayBuffer::new(3, 1);
        for k in 0..5u8 {
            buf.push(vec![k, k, k]);
        }
        assert_eq!(buf.len(), 3);
        // Frames 0 and 1 were overwritten by 3 and 4.
        let all: Vec<u8> = (0..3).flat_map(|i| buf.gather(&[i]).data().iter().map(|v| (v * 255.0) as u8).collect::<Vec<_>>()).collect();
        assert!(all.contains(&2) && all.contains(&3) && all.contains(&4));
        assert_eq!(buf.total_pushed(), 5);
    }

    #[test]
    fn tick_splits_buffer_into_batches() {
        let mut rng = derive(2, stream::INIT_VAE);
        let mut vae = Vae::new(tiny_cfg(), &mut rng);
        let mut buf = ReplayBuffer::new(16, 32);
        for k in 0..10 {
            buf.push(vec![(k * 20) as u8; 32 * 32 * 3]);
        }
        let mut adam = AdamState::new(crate::numerics::AdamConfig::default(), &vae.param_shapes());
        let mut rng = derive(3, stream::VAE_SAMPLE);
        // batch_size 4, 10 frames -> ceil(10/4) = 3 steps (4,4,2).
        let stats = train_tick(&mut vae, &buf, &mut adam, &mut rng);
        assert_eq!(stats.steps, 3);
        assert!(!stats.skipped);
        assert!(stats.mean_loss.is_finite());
    }

    #[test]
    fn empty_buffer_tick_is_flagged_noop() {
        let mut rng = derive(4, stream::INIT_VAE);
        let mut vae = Vae::new(tiny_cfg(), &mut rng);
        let before = vae.params().to_vec();
        let buf = ReplayBuffer::new(8, 32);
        let mut adam = AdamState::new(crate::numerics::AdamConfig::default(), &vae.param_shapes());
        let mut srng = derive(5, stream::VAE_SAMPLE);
        let stats = train_tick(&mut vae, &buf, &mut adam, &mut srng);
        assert!(stats.skipped);
        assert_eq!(stats.steps, 0);
        assert_eq!(vae.params(), &before[..]);
    }

    #[test]
    fn frozen_buffer_training_is_deterministic() {
        let mk = || {
            let mut rng = derive(6, stream::INIT_VAE);
            let mut vae = Vae::new(tiny_cfg(), &mut rng);
            let mut buf = ReplayBuffer::new(16, 32);
            for k in 0..6 {
                buf.push(vec![(k * 40) as u8; 32 * 32 * 3]);
            }
            let mut adam = AdamState::new(crate::numerics::AdamConfig::default(), &vae.param_shapes());
            let mut srng = derive(7, stream::VAE_SAMPLE);
            for _ in 0..2 {
                train_tick(&mut vae, &buf, &mut adam, &mut srng);
            }
            vae.params().to_vec()
        };
        assert_eq!(mk(), mk());
    }
}
