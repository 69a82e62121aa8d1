//! Attention rollout over the encoder, cross-modal influence measures, and
//! attention cost accounting for the fusion schemes.

mod cost;
mod rollout;
mod sweep;

pub use cost::{attention_cost, CostReport, Scheme};
pub use rollout::{modality_influence, normalized_influence, rollout, Influence, RolloutMatrix};
pub use sweep::{influence_csv, snr_influence_sweep, sweep_conditions, utterance_influence, InfluenceReport, INFLUENCE_HEADER};
