use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use super::SyntheticTask;
use crate::error::{Error, Result};
use crate::numkernel::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NoiseKind {
    White,
    Pink,
    /// Sum of independent synthetic speech streams.
    Babble,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 3] = [NoiseKind::Babble, NoiseKind::Pink, NoiseKind::White];
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseKind::White => "white",
            NoiseKind::Pink => "pink",
            NoiseKind::Babble => "babble",
        })
    }
}

impl FromStr for NoiseKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "white" => Ok(NoiseKind::White),
            "pink" => Ok(NoiseKind::Pink),
            "babble" | "babble_surrogate" => Ok(NoiseKind::Babble),
            other => Err(Error::Config(format!("unknown noise kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub snr_db: f64,
}

impl NoiseSpec {
    pub fn new(kind: NoiseKind, snr_db: f64) -> Result<Self> {
        if !snr_db.is_finite() {
            return Err(Error::Config(format!("SNR must be finite, got {snr_db}")));
        }
        Ok(NoiseSpec { kind, snr_db })
    }
}

pub const BABBLE_STREAMS: usize = 6;

/// Pole count of the pink filter bank; poles sit one octave apart.
const PINK_SECTIONS: i32 = 10;

/// Noise of shape `length×dim`, independent across feature columns.
///
/// Pink noise sums first-order IIR sections `y_t = a·y_{t−1} + √(1−a)·e_t`
/// with `1 − a = 2^{−k}`, `k = 1..=10`, each fed its own white input, and
/// scales the sum to unit variance. The spectrum falls as `1/f` between
/// the outermost poles.
pub fn synth_noise<R: Rng>(kind: NoiseKind, length: usize, dim: usize, task: &SyntheticTask, rng: &mut R) -> Result<Tensor> {
    if length == 0 || dim == 0 {
        return Err(Error::Usage(format!("noise shape {length}×{dim} is empty")));
    }
    match kind {
        NoiseKind::White => {
            let data = (0..length * dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            Tensor::new(vec![length, dim], data)
        }
        NoiseKind::Pink => Ok(pink(length, dim, rng)),
        NoiseKind::Babble => {
            if dim != task.spec.audio_dim {
                return Err(Error::Usage(format!(
                    "babble noise has the audio width {}, requested {dim}",
                    task.spec.audio_dim
                )));
            }
            babble(task, length, BABBLE_STREAMS, rng)
        }
    }
}

fn pink<R: Rng>(length: usize, dim: usize, rng: &mut R) -> Tensor {
    let poles: Vec<f64> = (1..=PINK_SECTIONS).map(|k| 1.0 - 2f64.powi(-k)).collect();
    let gains: Vec<f64> = poles.iter().map(|a| (1.0 - a).sqrt()).collect();
    // stationary variance of each section is 1/(1+a)
    let var: f64 = poles.iter().map(|a| 1.0 / (1.0 + a)).sum();
    let norm = 1.0 / var.sqrt();
    let mut out = vec![0.0; length * dim];
    for c in 0..dim {
        // start each section from its stationary distribution
        let mut state: Vec<f64> = poles
            .iter()
            .map(|a| rng.sample::<f64, _>(StandardNormal) / (1.0 + a).sqrt())
            .collect();
        for t in 0..length {
            let mut sum = 0.0;
            for ((s, &a), &g) in state.iter_mut().zip(&poles).zip(&gains) {
                *s = a * *s + g * rng.sample::<f64, _>(StandardNormal);
                sum += *s;
            }
            out[t * dim + c] = sum * norm;
        }
    }
    Tensor::new(vec![length, dim], out).expect("shape matches")
}

/// Sum of `streams` independent clean audio streams, each a concatenation
/// of random utterances cut to `length`, divided by `√streams`.
pub fn babble<R: Rng>(task: &SyntheticTask, length: usize, streams: usize, rng: &mut R) -> Result<Tensor> {
    if streams == 0 {
        return Err(Error::Usage("babble needs at least one stream".into()));
    }
    let dim = task.spec.audio_dim;
    let mut acc = vec![0.0; length * dim];
    for _ in 0..streams {
        let mut stream: Vec<f64> = Vec::with_capacity(length * dim + 64 * dim);
        while stream.len() < length * dim {
            let y = task.sample_transcript(rng);
            stream.extend_from_slice(task.render_audio(&y, rng)?.data());
        }
        acc.iter_mut().zip(&stream).for_each(|(a, s)| *a += s);
    }
    if streams > 1 {
        let inv = 1.0 / (streams as f64).sqrt();
        acc.iter_mut().for_each(|a| *a *= inv);
    }
    Tensor::new(vec![length, dim], acc)
}

/// Mean squared value over all entries.
pub fn power(x: &Tensor) -> f64 {
    if x.numel() == 0 {
        return 0.0;
    }
    x.data().iter().map(|v| v * v).sum::<f64>() / x.numel() as f64
}

/// `signal + s·noise` with `s` chosen so that `10·log10(P_signal / P_{s·noise}) = snr_db`.
pub fn mix_at_snr(signal: &Tensor, noise: &Tensor, snr_db: f64) -> Result<Tensor> {
    if signal.shape() != noise.shape() {
        return Err(Error::Shape {
            op: "mix_at_snr",
            lhs: signal.shape().to_vec(),
            rhs: noise.shape().to_vec(),
        });
    }
    if !snr_db.is_finite() {
        return Err(Error::Config(format!("SNR must be finite, got {snr_db}")));
    }
    let ps = power(signal);
    if ps <= 0.0 {
        return Err(Error::DegenerateSignal);
    }
    let pn = power(noise);
    if pn <= 0.0 {
        return Err(Error::Data("noise has zero power".into()));
    }
    let scale = (ps / (pn * 10f64.powf(snr_db / 10.0))).sqrt();
    let data = signal.data().iter().zip(noise.data()).map(|(s, n)| s + scale * n).collect();
    Tensor::new(signal.shape().to_vec(), data)
}
