//! Joint CTC/attention decoding and WER over clean and noisy conditions.

use crate::data::{Condition, NoiseKind, NoiseSpec, SyntheticTask, Utterance};
use crate::error::Result;
use crate::model::{DecoderScorer, ForwardOptions, Modality, Model};
use crate::numkernel::{Tape, Tensor};
use crate::objective::{beam_search, BeamConfig, CtcPrefixScorer, Hypothesis, WerAccumulator};
use crate::par;

/// Best joint-score hypothesis for one utterance. CTC prefix scores come
/// from the audio head, matching the decoder's audio-only memory.
pub fn decode(model: &Model, audio: &Tensor, video: Option<&Tensor>, beam: &BeamConfig) -> Result<Hypothesis> {
    let mut tape = Tape::inference();
    let enc = model.forward_dual_stream(&mut tape, audio, video, &ForwardOptions::default())?;
    let logp = model.ctc_log_probs(&mut tape, Modality::Audio, enc.audio)?;
    let (frames, classes) = (tape.shape(logp)[0], tape.shape(logp)[1]);
    let ctc = CtcPrefixScorer::new(tape.data(logp), frames, classes)?;
    let mut scorer = DecoderScorer::new(model, tape.value(enc.audio));
    beam_search(&mut scorer, &ctc, beam)
}

/// Corpus WER of `utterances` with their audio put through `cond`.
pub fn corpus_wer(
    model: &Model,
    task: &SyntheticTask,
    utterances: &[Utterance],
    cond: &Condition,
    seed: u64,
    beam: &BeamConfig,
) -> Result<WerAccumulator> {
    let per = par::map(utterances, |i, u| -> Result<WerAccumulator> {
        let audio = cond.apply(task, &u.audio, seed, i)?;
        let hyp = decode(model, &audio, Some(&u.video), beam)?;
        let mut acc = WerAccumulator::default();
        acc.add(&hyp.tokens, &u.transcript);
        Ok(acc)
    });
    let mut total = WerAccumulator::default();
    for a in per {
        total.merge(&a?);
    }
    Ok(total)
}

/// Table columns: clean once, then every noise kind (alphabetical) at
/// each SNR from high to low.
pub fn eval_conditions(kinds: &[NoiseKind], snrs: &[f64]) -> Result<Vec<Condition>> {
    let mut kinds = kinds.to_vec();
    kinds.sort_by_key(|k| k.to_string());
    kinds.dedup();
    let mut snrs = snrs.to_vec();
    snrs.sort_by(|a, b| b.total_cmp(a));
    snrs.dedup();
    let mut out = vec![Condition::Clean];
    for k in kinds {
        for &s in &snrs {
            out.push(Condition::Noisy(NoiseSpec::new(k, s)?));
        }
    }
    Ok(out)
}

/// WER in percent for each condition.
#[derive(Debug, Clone, PartialEq)]
pub struct WerRow {
    pub variant: String,
    pub wer: Vec<f64>,
}

pub fn evaluate_grid(
    variant: &str,
    model: &Model,
    task: &SyntheticTask,
    utterances: &[Utterance],
    conditions: &[Condition],
    seed: u64,
    beam: &BeamConfig,
) -> Result<WerRow> {
    let wer = conditions
        .iter()
        .map(|c| corpus_wer(model, task, utterances, c, seed, beam).map(|a| 100.0 * a.rate()))
        .collect::<Result<Vec<_>>>()?;
    Ok(WerRow {
        variant: variant.to_string(),
        wer,
    })
}

pub fn wer_csv(conditions: &[Condition], rows: &[WerRow]) -> String {
    let mut s = String::from("variant");
    for c in conditions {
        s.push(',');
        s.push_str(&c.label());
    }
    s.push('\n');
    for r in rows {
        s.push_str(&r.variant);
        for w in &r.wer {
            s.push_str(&format!(",{w:.4}"));
        }
        s.push('\n');
    }
    s
}
