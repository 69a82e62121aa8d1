use super::prefix::{CtcPrefixScorer, CtcPrefixState};
use crate::error::{Error, Result};

/// Source of attention-decoder scores: log-probabilities over `0..=V`
/// (index 0 ends the sequence) for the token following `prefix`.
pub trait TokenScorer {
    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>>;
    fn vocab_size(&self) -> usize;
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamConfig {
    pub beam: usize,
    /// Weight of the CTC prefix score in the joint score.
    pub ctc_weight: f64,
    pub max_len: usize,
    /// Added per emitted token.
    pub length_bonus: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam: 4,
            ctc_weight: 0.3,
            max_len: 16,
            length_bonus: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub att_score: f64,
    pub ctc_score: f64,
    pub score: f64,
}

/// `λ·ctc + (1−λ)·att`, with the endpoints taken verbatim so an infinite
/// term weighted by zero never contributes.
pub fn combine_scores(ctc: f64, att: f64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        att
    } else if lambda == 1.0 {
        ctc
    } else {
        lambda * ctc + (1.0 - lambda) * att
    }
}

struct Live {
    tokens: Vec<usize>,
    att: f64,
    ctc: CtcPrefixState,
    score: f64,
}

/// Joint CTC/attention beam search. Each step expands every live
/// hypothesis by all tokens and by end-of-sequence and keeps the `beam`
/// best token extensions. An ended candidate is retired into the finished
/// set when it ranks within the beam, or when the step pruned nothing.
/// Ended hypotheses are scored with the probability of the complete CTC
/// output.
pub fn beam_search<S: TokenScorer + ?Sized>(scorer: &mut S, ctc: &CtcPrefixScorer, cfg: &BeamConfig) -> Result<Hypothesis> {
    if cfg.beam == 0 {
        return Err(Error::Config("beam width must be positive".into()));
    }
    if !(0.0..=1.0).contains(&cfg.ctc_weight) {
        return Err(Error::Config(format!("CTC weight {} outside [0, 1]", cfg.ctc_weight)));
    }
    let v = scorer.vocab_size();
    if ctc.classes() != v + 1 {
        return Err(Error::Shape {
            op: "beam_search",
            lhs: vec![v + 1],
            rhs: vec![ctc.classes()],
        });
    }
    let lambda = cfg.ctc_weight;
    let bonus = cfg.length_bonus;
    let mut live = vec![Live {
        tokens: Vec::new(),
        att: 0.0,
        ctc: ctc.initial(),
        score: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for step in 0..=cfg.max_len {
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        let mut dists = Vec::with_capacity(live.len());
        for (h, hyp) in live.iter().enumerate() {
            let att = scorer.next_log_probs(&hyp.tokens)?;
            if att.len() != v + 1 {
                return Err(Error::Shape {
                    op: "beam_search",
                    lhs: vec![v + 1],
                    rhs: vec![att.len()],
                });
            }
            let len = hyp.tokens.len() as f64;
            let end = combine_scores(hyp.ctc.full_score(), hyp.att + att[0], lambda) + bonus * len;
            cands.push((end, h, 0));
            if step < cfg.max_len {
                let mut ext = Vec::with_capacity(v);
                for c in 1..=v {
                    let st = ctc.extend(&hyp.ctc, c);
                    let s = combine_scores(st.prefix_score, hyp.att + att[c], lambda) + bonus * (len + 1.0);
                    cands.push((s, h, c));
                    ext.push(st);
                }
                dists.push((att, ext));
            } else {
                dists.push((att, Vec::new()));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0));
        let extensions = cands.iter().filter(|c| c.2 != 0).count();
        let pruning = extensions > cfg.beam;

        let mut next = Vec::new();
        for (rank, (score, h, c)) in cands.into_iter().enumerate() {
            let hyp = &live[h];
            let (att, ext) = &dists[h];
            if c == 0 {
                if rank < cfg.beam || !pruning {
                    finished.push(Hypothesis {
                        tokens: hyp.tokens.clone(),
                        att_score: hyp.att + att[0],
                        ctc_score: hyp.ctc.full_score(),
                        score,
                    });
                }
            } else if next.len() < cfg.beam {
                let mut tokens = hyp.tokens.clone();
                tokens.push(c);
                next.push(Live {
                    tokens,
                    att: hyp.att + att[c],
                    ctc: ext[c - 1].clone(),
                    score,
                });
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
        // Without a positive bonus no extension can beat its parent.
        if bonus <= 0.0 {
            let best_done = finished.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            let best_live = live.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            if best_done >= best_live {
                break;
            }
        }
    }
    finished
        .into_iter()
        .reduce(|best, h| if h.score > best.score { h } else { best })
        .ok_or_else(|| Error::Usage("beam search produced no hypothesis".into()))
}
