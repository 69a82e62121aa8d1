//! Dense `f64` tensors with a reverse-mode autodiff tape.
//!
//! Every op is a method on [`Tape`] that records its output and backward
//! rule; [`Tape::backward`] replays the recording in reverse. Forward passes
//! are pure functions of their inputs (and an explicit RNG for dropout), so
//! independent tapes can run on separate threads.

mod kernels;
mod optim;
mod params;
mod tape;
mod tensor;

pub use kernels::{log_add_exp, log_sum_exp};
pub use optim::{AdamW, WarmupCosine};
pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{attention_score_madds, reset_attention_score_madds, Tape, Var};
pub use tensor::Tensor;

/// Sinusoidal position table of shape `len×dim`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            out[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

#[cfg(test)]
mod tests;
