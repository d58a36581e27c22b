//! Minimal dense-array math with reverse-mode autodiff and Adam.
//!
//! Everything is f32 and strictly sequential; results are bit-reproducible
//! for identical inputs, and per-element accumulation order does not depend
//! on batch size (see [`gemm`]).

mod adam;
mod array;
mod checkpoint;
mod gemm;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use array::Array;
pub use checkpoint::{load as load_checkpoint, save as save_checkpoint, CheckpointError};
pub use tape::{Gradients, Tape, Var};

use rand::Rng;
use rand_distr::StandardNormal;

/// Gaussian-initialized array with the given standard deviation.
pub fn randn(shape: &[usize], std: f32, rng: &mut impl Rng) -> Array {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| { let z: f32 = rng.sample(StandardNormal); z * std }).collect();
    Array::from_vec(shape, data)
}

/// He initialization for a dense layer with `fan_in` inputs.
pub fn he_init(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Array {
    randn(shape, (2.0 / fan_in as f32).sqrt(), rng)
}

/// Global L2 norm across a set of gradient arrays.
pub fn global_norm(grads: &[Array]) -> f32 {
    let ss: f64 = grads.iter().flat_map(|g| g.data()).map(|v| (*v as f64) * (*v as f64)).sum();
    ss.sqrt() as f32
}

/// Scale gradients in place so their global norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [Array], max_norm: f32) -> f32 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}
