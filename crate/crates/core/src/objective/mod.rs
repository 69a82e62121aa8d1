//! Training objective and decoding: CTC forward-backward, the hybrid
//! CTC/attention loss, CTC prefix scoring, joint beam search, and WER.

mod beam;
mod ctc;
mod loss;
mod prefix;
mod wer;

pub use beam::{beam_search, combine_scores, BeamConfig, Hypothesis, TokenScorer};
pub use ctc::{ctc_loss_and_grad, ctc_nll, BLANK};
pub use loss::{combine_hybrid, hybrid_loss, hybrid_loss_from_outputs, HybridTerms};
pub use prefix::{ctc_prefix_score, CtcPrefixScorer, CtcPrefixState};
pub use wer::{edit_distance, wer, WerAccumulator};
