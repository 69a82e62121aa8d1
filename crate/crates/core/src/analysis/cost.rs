use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numkernel::{attention_score_madds, reset_attention_score_madds, Tape, Tensor};

/// How two `F_m`-frame streams exchange information in one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    /// One self-attention over the concatenated `2F_m` frames.
    Concat,
    /// Each stream's queries attend over both streams' frames.
    Cross,
    /// Each stream attends over itself plus `F_b` shared tokens.
    Bottleneck,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Concat, Scheme::Cross, Scheme::Bottleneck];
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Concat => "concat",
            Scheme::Cross => "cross",
            Scheme::Bottleneck => "bottleneck",
        })
    }
}

impl FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(Scheme::Concat),
            "cross" => Ok(Scheme::Cross),
            "bottleneck" => Ok(Scheme::Bottleneck),
            other => Err(Error::Config(format!("unknown attention scheme `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostReport {
    pub scheme: Scheme,
    pub f_m: usize,
    pub f_b: usize,
    pub dim: usize,
    /// Query-key pairs: `(2F_m)²` for concat and cross, `2(F_m+F_b)²` for bottleneck.
    pub formula_pairs: u64,
    /// Multiply-adds spent on attention scores, counted while running it.
    pub measured_madds: u64,
}

/// Attention calls `(queries, keys)` that make up one layer of `scheme`.
fn calls(scheme: Scheme, f_m: usize, f_b: usize) -> Vec<(usize, usize)> {
    match scheme {
        Scheme::Concat => vec![(2 * f_m, 2 * f_m)],
        Scheme::Cross => vec![(f_m, 2 * f_m), (f_m, 2 * f_m)],
        Scheme::Bottleneck => vec![(f_m + f_b, f_m + f_b), (f_m + f_b, f_m + f_b)],
    }
}

/// Closed-form pair count together with a measured count from running the
/// attention at width `dim` on random inputs.
pub fn attention_cost(f_m: usize, f_b: usize, scheme: Scheme, dim: usize) -> Result<CostReport> {
    if f_m == 0 || dim == 0 {
        return Err(Error::Usage("frame count and width must be positive".into()));
    }
    if scheme == Scheme::Bottleneck && f_b == 0 {
        return Err(Error::Usage("bottleneck scheme needs at least one token".into()));
    }
    let (m, b) = (f_m as u64, f_b as u64);
    let formula_pairs = match scheme {
        Scheme::Concat | Scheme::Cross => (2 * m) * (2 * m),
        Scheme::Bottleneck => 2 * (m + b) * (m + b),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(f_m as u64 * 1009 + f_b as u64);
    let mut random = |rows: usize| {
        Tensor::new(vec![rows, dim], (0..rows * dim).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
    };
    reset_attention_score_madds();
    for (tq, tk) in calls(scheme, f_m, f_b) {
        let mut tape = Tape::inference();
        let q = tape.leaf(random(tq));
        let k = tape.leaf(random(tk));
        let v = tape.leaf(random(tk));
        tape.scaled_dot_attention(q, k, v, None)?;
    }
    Ok(CostReport {
        scheme,
        f_m,
        f_b: if scheme == Scheme::Bottleneck { f_b } else { 0 },
        dim,
        formula_pairs,
        measured_madds: attention_score_madds(),
    })
}
