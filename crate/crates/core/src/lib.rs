//! Bottleneck-token cross-modal fusion for dual-stream sequence recognition.
//!
//! Audio and video streams are encoded by separate Conformer stacks and
//! exchange information only through a short sequence of learnable
//! bottleneck tokens. Training uses per-modality CTC heads together with an
//! attention decoder; decoding runs a joint CTC/attention beam search.
//!
//! Module map:
//! - [`numkernel`]: tensors, autodiff tape, optimizer.
//! - [`model`]: encoder blocks, fusion strategies, decoder, checkpoints.
//! - [`objective`]: CTC, hybrid loss, prefix scoring, beam search, WER.
//! - [`analysis`]: attention rollout, cross-modal influence, attention cost.
//! - [`data`]: synthetic audio-visual task, noise, augmentation, dataset files.
//! - [`train`] / [`eval`]: training loop and noisy-condition evaluation.

pub mod analysis;
pub(crate) mod binio;
pub mod data;
pub mod error;
pub mod eval;
pub mod kv;
pub mod model;
pub mod numkernel;
pub mod objective;
pub mod par;
pub mod train;

pub use error::{Error, Result};
