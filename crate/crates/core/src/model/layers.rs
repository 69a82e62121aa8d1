//! Parameterized building blocks: linear maps, norms, multi-head attention,
//! Conformer blocks and decoder layers.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::numkernel::{ParamId, ParamStore, Tape, Tensor, Var};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Parameter factory with a single deterministic RNG stream.
pub(crate) struct Init<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    pub fn normal(&mut self, name: String, shape: &[usize], std: f64) -> Result<ParamId> {
        let n = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("positive std");
        let data = (0..n).map(|_| dist.sample(self.rng)).collect();
        self.store.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn fill(&mut self, name: String, shape: &[usize], value: f64) -> Result<ParamId> {
        let n = shape.iter().product();
        self.store.add(name, Tensor::new(shape.to_vec(), vec![value; n])?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub(crate) fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        Ok(Linear {
            w: init.normal(format!("{name}.w"), &[fan_in, fan_out], (1.0 / fan_in as f64).sqrt())?,
            b: init.fill(format!("{name}.b"), &[fan_out], 0.0)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub(crate) fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, dim: usize) -> Result<Self> {
        Ok(Norm {
            gain: init.fill(format!("{name}.g"), &[dim], 1.0)?,
            bias: init.fill(format!("{name}.b"), &[dim], 0.0)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub(crate) fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(MultiHeadAttention {
            q: Linear::new(init, &format!("{name}.q"), dim, dim)?,
            k: Linear::new(init, &format!("{name}.k"), dim, dim)?,
            v: Linear::new(init, &format!("{name}.v"), dim, dim)?,
            o: Linear::new(init, &format!("{name}.o"), dim, dim)?,
            heads,
        })
    }

    /// Queries from `x`, keys and values from `memory`. Returns the output
    /// and the head-averaged attention matrix.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        memory: Var,
        mask: Option<&[bool]>,
    ) -> Result<(Var, Vec<f64>)> {
        let q = self.q.forward(tape, store, x)?;
        let k = self.k.forward(tape, store, memory)?;
        let v = self.v.forward(tape, store, memory)?;
        let d = tape.shape(q)[1];
        let hd = d / self.heads;
        let (tq, tk) = (tape.shape(q)[0], tape.shape(k)[0]);
        let mut outs = Vec::with_capacity(self.heads);
        let mut avg = vec![0.0; tq * tk];
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * hd, hd)?;
            let kh = tape.slice_cols(k, h * hd, hd)?;
            let vh = tape.slice_cols(v, h * hd, hd)?;
            let (oh, wh) = tape.scaled_dot_attention(qh, kh, vh, mask)?;
            avg.iter_mut().zip(tape.data(wh)).for_each(|(a, w)| *a += w);
            outs.push(oh);
        }
        let inv = 1.0 / self.heads as f64;
        avg.iter_mut().for_each(|a| *a *= inv);
        let cat = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        let out = self.o.forward(tape, store, cat)?;
        Ok((out, avg))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub norm: Norm,
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub(crate) fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(FeedForward {
            norm: Norm::new(init, &format!("{name}.ln"), dim)?,
            up: Linear::new(init, &format!("{name}.up"), dim, hidden)?,
            down: Linear::new(init, &format!("{name}.down"), hidden, dim)?,
        })
    }

    /// Pre-norm feed-forward branch (no residual).
    pub fn branch(&self, tape: &mut Tape, store: &ParamStore, x: Var, swish: bool) -> Result<Var> {
        let h = self.norm.forward(tape, store, x)?;
        let h = self.up.forward(tape, store, h)?;
        let h = if swish { tape.swish(h) } else { tape.gelu(h) };
        self.down.forward(tape, store, h)
    }
}

/// Pointwise conv → GLU → depthwise conv → norm → Swish → pointwise conv.
/// The batch norm of the usual Conformer layout is a layer norm here since
/// every forward pass sees a single utterance.
#[derive(Debug, Clone, Copy)]
pub struct ConvModule {
    pub norm: Norm,
    pub pointwise_in: Linear,
    pub depthwise: ParamId,
    pub depthwise_bias: ParamId,
    pub mid_norm: Norm,
    pub pointwise_out: Linear,
}

impl ConvModule {
    pub(crate) fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, dim: usize, kernel: usize) -> Result<Self> {
        Ok(ConvModule {
            norm: Norm::new(init, &format!("{name}.ln"), dim)?,
            pointwise_in: Linear::new(init, &format!("{name}.pw_in"), dim, 2 * dim)?,
            depthwise: init.normal(format!("{name}.dw"), &[kernel, dim], (1.0 / kernel as f64).sqrt())?,
            depthwise_bias: init.fill(format!("{name}.dw_b"), &[dim], 0.0)?,
            mid_norm: Norm::new(init, &format!("{name}.mid_ln"), dim)?,
            pointwise_out: Linear::new(init, &format!("{name}.pw_out"), dim, dim)?,
        })
    }

    pub fn branch(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.norm.forward(tape, store, x)?;
        let h = self.pointwise_in.forward(tape, store, h)?;
        let h = tape.glu(h)?;
        let k = tape.param(store, self.depthwise);
        let kb = tape.param(store, self.depthwise_bias);
        let h = tape.depthwise_conv1d(h, k)?;
        let h = tape.add_bias(h, kb)?;
        let h = self.mid_norm.forward(tape, store, h)?;
        let h = tape.swish(h);
        self.pointwise_out.forward(tape, store, h)
    }
}

/// Macaron Conformer layer: ½FFN → MHSA → conv → ½FFN → layer norm, each
/// branch added residually.
#[derive(Debug, Clone, Copy)]
pub struct ConformerBlock {
    pub ff1: FeedForward,
    pub attn_norm: Norm,
    pub attn: MultiHeadAttention,
    pub conv: ConvModule,
    pub ff2: FeedForward,
    pub out_norm: Norm,
}

impl ConformerBlock {
    pub(crate) fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, cfg: &super::ModelConfig) -> Result<Self> {
        let d = cfg.d_model;
        Ok(ConformerBlock {
            ff1: FeedForward::new(init, &format!("{name}.ff1"), d, cfg.ffn_dim)?,
            attn_norm: Norm::new(init, &format!("{name}.attn_ln"), d)?,
            attn: MultiHeadAttention::new(init, &format!("{name}.attn"), d, cfg.heads)?,
            conv: ConvModule::new(init, &format!("{name}.conv"), d, cfg.conv_kernel)?,
            ff2: FeedForward::new(init, &format!("{name}.ff2"), d, cfg.ffn_dim)?,
            out_norm: Norm::new(init, &format!("{name}.out_ln"), d)?,
        })
    }

    /// Residual-branch output projections; zeroing all of them reduces the
    /// block to its final layer norm.
    pub fn output_projections(&self) -> [Linear; 4] {
        [self.ff1.down, self.attn.o, self.conv.pointwise_out, self.ff2.down]
    }
}

pub(crate) struct Regularizer<'a, R: Rng> {
    pub dropout: f64,
    pub rng: Option<&'a mut R>,
}

impl<R: Rng> Regularizer<'_, R> {
    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.dropout > 0.0 => tape.dropout(x, self.dropout, rng),
            _ => Ok(x),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderLayer {
    pub self_norm: Norm,
    pub self_attn: MultiHeadAttention,
    pub cross_norm: Norm,
    pub cross_attn: MultiHeadAttention,
    pub ff: FeedForward,
}

impl DecoderLayer {
    pub(crate) fn new<R: Rng>(init: &mut Init<'_, R>, name: &str, cfg: &super::ModelConfig) -> Result<Self> {
        let d = cfg.d_model;
        Ok(DecoderLayer {
            self_norm: Norm::new(init, &format!("{name}.self_ln"), d)?,
            self_attn: MultiHeadAttention::new(init, &format!("{name}.self"), d, cfg.heads)?,
            cross_norm: Norm::new(init, &format!("{name}.cross_ln"), d)?,
            cross_attn: MultiHeadAttention::new(init, &format!("{name}.cross"), d, cfg.heads)?,
            ff: FeedForward::new(init, &format!("{name}.ff"), d, cfg.ffn_dim)?,
        })
    }
}
