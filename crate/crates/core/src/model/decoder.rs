use super::Model;
use crate::error::{Error, Result};
use crate::numkernel::{sinusoidal_positions, Tape, Var};
use crate::objective::TokenScorer;

/// Decoder start marker; shares index 0 with the end marker.
pub const SOS: usize = 0;
pub const EOS: usize = 0;

impl Model {
    /// Next-token logits `len×(V+1)` for every prefix position. Self-attention
    /// is causal; cross-attention keys and values come from `audio_out` only.
    pub fn decoder_forward(&self, tape: &mut Tape, prefix: &[usize], audio_out: Var) -> Result<Var> {
        if prefix.is_empty() {
            return Err(Error::Usage("decoder prefix is empty".into()));
        }
        if prefix[0] != SOS {
            return Err(Error::Usage("decoder prefix must begin with the start token".into()));
        }
        let len = prefix.len();
        let d = self.cfg.d_model;
        let store = &self.store;
        let table = tape.param(store, self.dec_embed);
        let emb = tape.embedding(table, prefix)?;
        let pe = tape.constant(&[len, d], sinusoidal_positions(len, d))?;
        let mut x = tape.add(emb, pe)?;
        let causal: Vec<bool> = (0..len * len).map(|i| i % len > i / len).collect();
        for layer in &self.dec_layers {
            let n = layer.self_norm.forward(tape, store, x)?;
            let (a, _) = layer.self_attn.forward(tape, store, n, n, Some(&causal))?;
            x = tape.add(x, a)?;
            let n = layer.cross_norm.forward(tape, store, x)?;
            let (c, _) = layer.cross_attn.forward(tape, store, n, audio_out, None)?;
            x = tape.add(x, c)?;
            let h = layer.ff.branch(tape, store, x, false)?;
            x = tape.add(x, h)?;
        }
        let x = self.dec_norm.forward(tape, store, x)?;
        self.dec_out.forward(tape, store, x)
    }
}

/// Scores continuations of a token prefix with the attention decoder over a
/// fixed encoded audio stream.
pub struct DecoderScorer<'a> {
    model: &'a Model,
    tape: Tape,
    memory: Var,
    base_len: usize,
}

impl<'a> DecoderScorer<'a> {
    /// `audio_out` is copied onto a private inference tape.
    pub fn new(model: &'a Model, audio_out: &crate::numkernel::Tensor) -> Self {
        let mut tape = Tape::inference();
        let memory = tape.leaf(audio_out.clone().with_requires_grad(false));
        let base_len = tape.len();
        DecoderScorer {
            model,
            tape,
            memory,
            base_len,
        }
    }
}

impl TokenScorer for DecoderScorer<'_> {
    fn next_log_probs(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        // fresh tape per query keeps memory flat across a long search
        if self.tape.len() > self.base_len {
            let mem = self.tape.value(self.memory).clone();
            self.tape = Tape::inference();
            self.memory = self.tape.leaf(mem);
        }
        let mut ids = Vec::with_capacity(prefix.len() + 1);
        ids.push(SOS);
        ids.extend_from_slice(prefix);
        let logits = self.model.decoder_forward(&mut self.tape, &ids, self.memory)?;
        let logp = self.tape.log_softmax_rows(logits)?;
        let c = self.model.cfg.vocab_size + 1;
        let last = prefix.len();
        Ok(self.tape.data(logp)[last * c..(last + 1) * c].to_vec())
    }

    fn vocab_size(&self) -> usize {
        self.model.cfg.vocab_size
    }
}
