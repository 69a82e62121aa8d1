//! Dual-stream Conformer encoder with bottleneck fusion, per-modality CTC
//! heads, and a Transformer decoder that attends to the audio stream only.

mod checkpoint;
mod config;
mod decoder;
mod encoder;
mod layers;
mod trace;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use checkpoint::{check_architecture, load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ModelConfig, Strategy, Variant};
pub use decoder::{DecoderScorer, EOS, SOS};
pub use encoder::{conformer_block, fuse_mean, fuse_sequential, BlockOutput, EncoderOutput, ForwardOptions, MeanFusion, SequentialFusion};
pub use layers::{ConformerBlock, ConvModule, DecoderLayer, FeedForward, Linear, MultiHeadAttention, Norm};
pub use trace::{AttentionTrace, Modality, StepMode, TraceEntry};

use crate::error::{Error, Result};
use crate::numkernel::{Gradients, ParamId, ParamStore, Tape, Tensor, Var};
use crate::objective;
use layers::Init;

/// Frames of one modality flowing through the encoder.
#[derive(Debug, Clone, Copy)]
pub struct StreamState {
    pub modality: Modality,
    pub frames: Var,
}

/// Learnable `F_b×D` token block shared by every utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct BottleneckTokens {
    pub values: Tensor,
}

/// Zero-mean Gaussian bottleneck initialization, reproducible from `seed`.
pub fn init_bottleneck(len: usize, dim: usize, sigma: f64, seed: u64) -> Result<BottleneckTokens> {
    if len == 0 {
        return Err(Error::Config("bottleneck length must be at least 1".into()));
    }
    if sigma.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::Config(format!("bottleneck sigma must be positive, got {sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, sigma).expect("positive sigma");
    let data = (0..len * dim).map(|_| dist.sample(&mut rng)).collect();
    Ok(BottleneckTokens {
        values: Tensor::new(vec![len, dim], data)?,
    })
}

/// Per-utterance value of each loss term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub ctc_audio: f64,
    pub ctc_video: Option<f64>,
    pub ce: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub(crate) audio_front: Linear,
    pub(crate) video_front: Option<Linear>,
    pub(crate) bottleneck: Option<ParamId>,
    pub audio_blocks: Vec<ConformerBlock>,
    pub video_blocks: Vec<ConformerBlock>,
    pub(crate) audio_ctc: Linear,
    pub(crate) video_ctc: Option<Linear>,
    pub(crate) dec_embed: ParamId,
    pub(crate) dec_layers: Vec<DecoderLayer>,
    pub(crate) dec_norm: Norm,
    pub(crate) dec_out: Linear,
}

/// Seed offset for the bottleneck's own RNG stream.
const BOTTLENECK_STREAM: u64 = 0x00B0_771E_4EC4;

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let d = cfg.d_model;
        let has_video = cfg.variant.has_video();
        let vocab_out = cfg.vocab_size + 1;

        let audio_front = Linear::new(&mut init, "audio.front", cfg.audio_in, d)?;
        let video_front = has_video
            .then(|| Linear::new(&mut init, "video.front", cfg.video_in, d))
            .transpose()?;
        let audio_blocks = (0..cfg.enc_layers)
            .map(|l| ConformerBlock::new(&mut init, &format!("audio.enc.{l}"), &cfg))
            .collect::<Result<Vec<_>>>()?;
        let video_blocks = if has_video {
            (0..cfg.enc_layers)
                .map(|l| ConformerBlock::new(&mut init, &format!("video.enc.{l}"), &cfg))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let audio_ctc = Linear::new(&mut init, "audio.ctc", d, vocab_out)?;
        let video_ctc = has_video
            .then(|| Linear::new(&mut init, "video.ctc", d, vocab_out))
            .transpose()?;
        let dec_embed = init.normal("dec.embed".into(), &[vocab_out, d], 1.0)?;
        let dec_layers = (0..cfg.decoder_layers)
            .map(|l| DecoderLayer::new(&mut init, &format!("dec.{l}"), &cfg))
            .collect::<Result<Vec<_>>>()?;
        let dec_norm = Norm::new(&mut init, "dec.out_ln", d)?;
        let dec_out = Linear::new(&mut init, "dec.out", d, vocab_out)?;

        let bottleneck = if has_video {
            let tokens = init_bottleneck(
                cfg.bottleneck_len,
                d,
                cfg.bottleneck_sigma,
                cfg.seed ^ BOTTLENECK_STREAM,
            )?;
            Some(store.add("bottleneck", tokens.values)?)
        } else {
            None
        };

        Ok(Model {
            cfg,
            store,
            audio_front,
            video_front,
            bottleneck,
            audio_blocks,
            video_blocks,
            audio_ctc,
            video_ctc,
            dec_embed,
            dec_layers,
            dec_norm,
            dec_out,
        })
    }

    pub fn bottleneck_id(&self) -> Option<ParamId> {
        self.bottleneck
    }

    /// Frame-level CTC log-posteriors `F×(V+1)` for one encoded stream.
    pub fn ctc_log_probs(&self, tape: &mut Tape, modality: Modality, encoded: Var) -> Result<Var> {
        let head = match modality {
            Modality::Audio => &self.audio_ctc,
            Modality::Video => self
                .video_ctc
                .as_ref()
                .ok_or_else(|| Error::Usage("model has no video CTC head".into()))?,
        };
        let logits = head.forward(tape, &self.store, encoded)?;
        tape.log_softmax_rows(logits)
    }

    /// Hybrid training loss of a single utterance, recorded on `tape`.
    #[allow(clippy::too_many_arguments)]
    pub fn loss(
        &self,
        tape: &mut Tape,
        audio: &Tensor,
        video: Option<&Tensor>,
        transcript: &[usize],
        opts: &ForwardOptions,
        label_smoothing: f64,
    ) -> Result<(Var, LossBreakdown)> {
        if let Some(&bad) = transcript.iter().find(|&&t| t == 0 || t > self.cfg.vocab_size) {
            return Err(Error::Usage(format!("token {bad} outside 1..={}", self.cfg.vocab_size)));
        }
        let enc = self.forward_dual_stream(tape, audio, video, opts)?;
        let a_logp = self.ctc_log_probs(tape, Modality::Audio, enc.audio)?;
        let v_logp = enc.video.map(|v| self.ctc_log_probs(tape, Modality::Video, v)).transpose()?;
        let mut dec_in = Vec::with_capacity(transcript.len() + 1);
        dec_in.push(SOS);
        dec_in.extend_from_slice(transcript);
        let logits = self.decoder_forward(tape, &dec_in, enc.audio)?;
        let objective::HybridTerms {
            total,
            ctc_audio: ctc_a,
            ctc_video: ctc_v,
            ce,
        } = objective::hybrid_loss_from_outputs(tape, a_logp, v_logp, logits, transcript, self.cfg.w_ctc, label_smoothing)?;
        let breakdown = LossBreakdown {
            ctc_audio: tape.scalar(ctc_a),
            ctc_video: ctc_v.map(|v| tape.scalar(v)),
            ce: tape.scalar(ce),
            total: tape.scalar(total),
        };
        Ok((total, breakdown))
    }

    /// Loss value and parameter gradients of one utterance.
    pub fn loss_and_grad(
        &self,
        audio: &Tensor,
        video: Option<&Tensor>,
        transcript: &[usize],
        opts: &ForwardOptions,
        label_smoothing: f64,
    ) -> Result<(LossBreakdown, Gradients)> {
        let mut tape = Tape::new();
        let (loss, parts) = self.loss(&mut tape, audio, video, transcript, opts, label_smoothing)?;
        tape.backward(loss)?;
        Ok((parts, Gradients::from_tape(&self.store, &tape)))
    }

    /// Loss value only, without recording gradients for parameters.
    pub fn loss_value(
        &self,
        audio: &Tensor,
        video: Option<&Tensor>,
        transcript: &[usize],
        opts: &ForwardOptions,
        label_smoothing: f64,
    ) -> Result<LossBreakdown> {
        let mut tape = Tape::inference();
        Ok(self.loss(&mut tape, audio, video, transcript, opts, label_smoothing)?.1)
    }
}
