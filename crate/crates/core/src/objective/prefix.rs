use super::ctc::BLANK;
use crate::numkernel::log_add_exp;

/// Forward variables of a prefix: `r_n[t]` / `r_b[t]` are the log-probs of
/// emitting the prefix within frames `0..=t` ending in a non-blank / blank.
#[derive(Debug, Clone, PartialEq)]
pub struct CtcPrefixState {
    r_n: Vec<f64>,
    r_b: Vec<f64>,
    last: Option<usize>,
    /// Log-probability that the frame sequence begins with this prefix.
    pub prefix_score: f64,
}

impl CtcPrefixState {
    /// Log-probability that the prefix is the complete CTC output.
    pub fn full_score(&self) -> f64 {
        match (self.r_n.last(), self.r_b.last()) {
            (Some(&n), Some(&b)) => log_add_exp(n, b),
            _ => f64::NEG_INFINITY,
        }
    }
}

/// Incremental CTC prefix scorer over fixed frame log-posteriors `T×C`.
#[derive(Debug, Clone, Copy)]
pub struct CtcPrefixScorer<'a> {
    logp: &'a [f64],
    frames: usize,
    classes: usize,
}

impl<'a> CtcPrefixScorer<'a> {
    pub fn new(logp: &'a [f64], frames: usize, classes: usize) -> crate::Result<Self> {
        if frames == 0 || logp.len() != frames * classes {
            return Err(crate::Error::Shape {
                op: "ctc_prefix",
                lhs: vec![frames, classes],
                rhs: vec![logp.len()],
            });
        }
        Ok(CtcPrefixScorer { logp, frames, classes })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    fn lp(&self, t: usize, k: usize) -> f64 {
        self.logp[t * self.classes + k]
    }

    pub fn initial(&self) -> CtcPrefixState {
        let mut r_b = Vec::with_capacity(self.frames);
        let mut acc = 0.0;
        for t in 0..self.frames {
            acc += self.lp(t, BLANK);
            r_b.push(acc);
        }
        CtcPrefixState {
            r_n: vec![f64::NEG_INFINITY; self.frames],
            r_b,
            last: None,
            prefix_score: 0.0,
        }
    }

    /// State of `g + c` for a non-blank token `c`.
    pub fn extend(&self, g: &CtcPrefixState, c: usize) -> CtcPrefixState {
        debug_assert!(c != BLANK && c < self.classes);
        let ninf = f64::NEG_INFINITY;
        let mut r_n = vec![ninf; self.frames];
        let mut r_b = vec![ninf; self.frames];
        if g.last.is_none() {
            r_n[0] = self.lp(0, c);
        }
        let mut psi = r_n[0];
        for t in 1..self.frames {
            let phi = if g.last == Some(c) {
                g.r_b[t - 1]
            } else {
                log_add_exp(g.r_b[t - 1], g.r_n[t - 1])
            };
            r_n[t] = log_add_exp(r_n[t - 1], phi) + self.lp(t, c);
            r_b[t] = log_add_exp(r_b[t - 1], r_n[t - 1]) + self.lp(t, BLANK);
            psi = log_add_exp(psi, phi + self.lp(t, c));
        }
        CtcPrefixState {
            r_n,
            r_b,
            last: Some(c),
            prefix_score: psi,
        }
    }

    pub fn state_of(&self, prefix: &[usize]) -> CtcPrefixState {
        prefix.iter().fold(self.initial(), |s, &c| self.extend(&s, c))
    }
}

/// Log-probability that the CTC output starts with `prefix`.
pub fn ctc_prefix_score(logp: &[f64], frames: usize, classes: usize, prefix: &[usize]) -> crate::Result<f64> {
    Ok(CtcPrefixScorer::new(logp, frames, classes)?.state_of(prefix).prefix_score)
}
