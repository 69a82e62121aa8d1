//! Dual-stream encoder and the two bottleneck update strategies.

use rand_chacha::ChaCha8Rng;

use super::layers::{ConformerBlock, Regularizer};
use super::trace::{AttentionTrace, Modality, StepMode};
use super::{Model, StreamState};
use crate::error::{Error, Result};
use crate::numkernel::{sinusoidal_positions, ParamStore, Tape, Tensor, Var};

/// Result of running one Conformer block on `[bottleneck ∥ frames]`.
#[derive(Debug, Clone)]
pub struct BlockOutput {
    pub bottleneck: Option<Var>,
    pub frames: Var,
    pub attention: Vec<f64>,
}

pub(crate) fn conformer_forward(
    block: &ConformerBlock,
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    temporal_start: usize,
    reg: &mut Regularizer<'_, ChaCha8Rng>,
) -> Result<(Var, Vec<f64>)> {
    let h = block.ff1.branch(tape, store, x, true)?;
    let h = reg.apply(tape, h)?;
    let h = tape.scale(h, 0.5);
    let x = tape.add(x, h)?;

    let n = block.attn_norm.forward(tape, store, x)?;
    let (a, weights) = block.attn.forward(tape, store, n, n, None)?;
    let a = reg.apply(tape, a)?;
    let x = tape.add(x, a)?;

    // bottleneck rows have no temporal order and bypass the convolution
    let x = if temporal_start == 0 {
        let c = block.conv.branch(tape, store, x)?;
        let c = reg.apply(tape, c)?;
        tape.add(x, c)?
    } else {
        let (tokens, frames) = tape.split_rows(x, temporal_start)?;
        let c = block.conv.branch(tape, store, frames)?;
        let c = reg.apply(tape, c)?;
        let frames = tape.add(frames, c)?;
        tape.concat_rows(&[tokens, frames])?
    };

    let h = block.ff2.branch(tape, store, x, true)?;
    let h = reg.apply(tape, h)?;
    let h = tape.scale(h, 0.5);
    let x = tape.add(x, h)?;

    let y = block.out_norm.forward(tape, store, x)?;
    Ok((y, weights))
}

/// One Conformer layer on `x` of shape `T×D`; returns `T×D` and the
/// head-averaged `T×T` self-attention.
pub fn conformer_block(tape: &mut Tape, store: &ParamStore, block: &ConformerBlock, x: Var) -> Result<(Var, Vec<f64>)> {
    conformer_forward(block, tape, store, x, 0, &mut Regularizer { dropout: 0.0, rng: None })
}

pub(crate) fn run_block(
    tape: &mut Tape,
    store: &ParamStore,
    block: &ConformerBlock,
    bottleneck: Option<Var>,
    frames: Var,
    reg: &mut Regularizer<'_, ChaCha8Rng>,
) -> Result<BlockOutput> {
    let Some(b) = bottleneck else {
        let (y, attention) = conformer_forward(block, tape, store, frames, 0, reg)?;
        return Ok(BlockOutput {
            bottleneck: None,
            frames: y,
            attention,
        });
    };
    let fb = tape.shape(b)[0];
    let joint = tape.concat_rows(&[b, frames])?;
    let (y, attention) = conformer_forward(block, tape, store, joint, fb, reg)?;
    let (b_out, f_out) = tape.split_rows(y, fb)?;
    Ok(BlockOutput {
        bottleneck: Some(b_out),
        frames: f_out,
        attention,
    })
}

/// Output of a sequential fusion layer.
#[derive(Debug, Clone)]
pub struct SequentialFusion {
    /// Bottleneck after the video block (x̂_b).
    pub intermediate: Var,
    pub bottleneck: Var,
    pub video: Var,
    pub audio: Var,
    pub video_attention: Vec<f64>,
    pub audio_attention: Vec<f64>,
}

/// Video block on `[x_b ∥ x_v]`, then audio block on `[x̂_b ∥ x_a]`.
///
/// With `ablate_video` the audio block sees the incoming `x_b` instead of
/// x̂_b, which cuts the only path from video into the audio stream.
#[allow(clippy::too_many_arguments)]
pub fn fuse_sequential(
    tape: &mut Tape,
    store: &ParamStore,
    x_b: Var,
    x_v: Var,
    x_a: Var,
    video_block: &ConformerBlock,
    audio_block: &ConformerBlock,
    ablate_video: bool,
) -> Result<SequentialFusion> {
    let mut reg = Regularizer { dropout: 0.0, rng: None };
    fuse_sequential_with(tape, store, x_b, x_v, x_a, video_block, audio_block, ablate_video, &mut reg)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn fuse_sequential_with(
    tape: &mut Tape,
    store: &ParamStore,
    x_b: Var,
    x_v: Var,
    x_a: Var,
    video_block: &ConformerBlock,
    audio_block: &ConformerBlock,
    ablate_video: bool,
    reg: &mut Regularizer<'_, ChaCha8Rng>,
) -> Result<SequentialFusion> {
    let v = run_block(tape, store, video_block, Some(x_b), x_v, reg)?;
    let intermediate = v.bottleneck.expect("bottleneck attached");
    let audio_in = if ablate_video { x_b } else { intermediate };
    let a = run_block(tape, store, audio_block, Some(audio_in), x_a, reg)?;
    Ok(SequentialFusion {
        intermediate,
        bottleneck: a.bottleneck.expect("bottleneck attached"),
        video: v.frames,
        audio: a.frames,
        video_attention: v.attention,
        audio_attention: a.attention,
    })
}

/// Output of a mean fusion layer.
#[derive(Debug, Clone)]
pub struct MeanFusion {
    pub bottleneck: Var,
    /// Per-modality bottleneck outputs x̂_b,m, in input order.
    pub per_stream_bottleneck: Vec<Var>,
    pub streams: Vec<StreamState>,
    pub attention: Vec<Vec<f64>>,
}

/// Every stream's block runs on `[x_b ∥ x_m]`; the new bottleneck is the
/// mean of their bottleneck outputs.
pub fn fuse_mean(
    tape: &mut Tape,
    store: &ParamStore,
    x_b: Var,
    streams: &[(StreamState, &ConformerBlock)],
) -> Result<MeanFusion> {
    let mut reg = Regularizer { dropout: 0.0, rng: None };
    fuse_mean_with(tape, store, x_b, streams, &mut reg)
}

pub(crate) fn fuse_mean_with(
    tape: &mut Tape,
    store: &ParamStore,
    x_b: Var,
    streams: &[(StreamState, &ConformerBlock)],
    reg: &mut Regularizer<'_, ChaCha8Rng>,
) -> Result<MeanFusion> {
    if streams.is_empty() {
        return Err(Error::Usage("mean fusion needs at least one stream".into()));
    }
    let mut per_stream_bottleneck = Vec::with_capacity(streams.len());
    let mut out_streams = Vec::with_capacity(streams.len());
    let mut attention = Vec::with_capacity(streams.len());
    for (state, block) in streams {
        let r = run_block(tape, store, block, Some(x_b), state.frames, reg)?;
        per_stream_bottleneck.push(r.bottleneck.expect("bottleneck attached"));
        out_streams.push(StreamState {
            modality: state.modality,
            frames: r.frames,
        });
        attention.push(r.attention);
    }
    let bottleneck = if per_stream_bottleneck.len() == 1 {
        per_stream_bottleneck[0]
    } else {
        tape.mean_of(&per_stream_bottleneck)?
    };
    Ok(MeanFusion {
        bottleneck,
        per_stream_bottleneck,
        streams: out_streams,
        attention,
    })
}

/// Per-call switches for [`Model::forward_dual_stream`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Feed the audio block of each sequential fusion layer the bottleneck
    /// from before the video block.
    pub ablate_video_to_bottleneck: bool,
    /// Enables dropout (when the config asks for it) with this seed.
    pub dropout_seed: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub audio: Var,
    pub video: Option<Var>,
    pub bottleneck: Option<Var>,
    pub trace: AttentionTrace,
}

impl Model {
    fn front_end(&self, tape: &mut Tape, modality: Modality, input: &Tensor) -> Result<Var> {
        let (front, dim) = match modality {
            Modality::Audio => (&self.audio_front, self.cfg.audio_in),
            Modality::Video => (
                self.video_front
                    .as_ref()
                    .ok_or_else(|| Error::Usage("model has no video stream".into()))?,
                self.cfg.video_in,
            ),
        };
        let (frames, feat) = input.dims2()?;
        if feat != dim || frames == 0 {
            return Err(Error::Shape {
                op: "front_end",
                lhs: input.shape().to_vec(),
                rhs: vec![frames.max(1), dim],
            });
        }
        let x = tape.leaf(input.clone().with_requires_grad(false));
        let x = front.forward(tape, &self.store, x)?;
        let pe = tape.constant(&[frames, self.cfg.d_model], sinusoidal_positions(frames, self.cfg.d_model))?;
        tape.add(x, pe)
    }

    /// Encode both streams. Layers `0..fusion_layer` run each modality on its
    /// own; later layers attach the bottleneck per the configured strategy.
    pub fn forward_dual_stream(
        &self,
        tape: &mut Tape,
        audio: &Tensor,
        video: Option<&Tensor>,
        opts: &ForwardOptions,
    ) -> Result<EncoderOutput> {
        let cfg = &self.cfg;
        let has_video = cfg.variant.has_video();
        let video = match (has_video, video) {
            (true, Some(v)) => Some(v),
            (true, None) => return Err(Error::Usage("bottleneck model needs a video input".into())),
            (false, _) => None,
        };
        let mut rng = opts
            .dropout_seed
            .filter(|_| cfg.dropout > 0.0)
            .map(<ChaCha8Rng as rand::SeedableRng>::seed_from_u64);
        let mut reg = Regularizer {
            dropout: cfg.dropout,
            rng: rng.as_mut(),
        };

        let mut x_a = self.front_end(tape, Modality::Audio, audio)?;
        let mut x_v = match video {
            Some(v) => Some(self.front_end(tape, Modality::Video, v)?),
            None => None,
        };
        let fa = audio.rows();
        let fv = video.map_or(0, Tensor::rows);
        let fb = if has_video { cfg.bottleneck_len } else { 0 };
        let mut trace = AttentionTrace::new(fa, fv, fb);
        let mut x_b = self.bottleneck.map(|id| tape.param(&self.store, id));

        for layer in 0..cfg.enc_layers {
            let audio_block = &self.audio_blocks[layer];
            if !cfg.is_fused(layer) {
                if let Some(v) = x_v {
                    let r = run_block(tape, &self.store, &self.video_blocks[layer], None, v, &mut reg)?;
                    trace.push(layer, Modality::Video, StepMode::Independent, false, r.attention);
                    x_v = Some(r.frames);
                }
                let r = run_block(tape, &self.store, audio_block, None, x_a, &mut reg)?;
                trace.push(layer, Modality::Audio, StepMode::Independent, false, r.attention);
                x_a = r.frames;
                continue;
            }
            let (b, v) = (x_b.expect("fused layer has bottleneck"), x_v.expect("fused layer has video"));
            let video_block = &self.video_blocks[layer];
            match cfg.strategy {
                super::Strategy::Sequential => {
                    let s = fuse_sequential_with(
                        tape,
                        &self.store,
                        b,
                        v,
                        x_a,
                        video_block,
                        audio_block,
                        opts.ablate_video_to_bottleneck,
                        &mut reg,
                    )?;
                    trace.push(layer, Modality::Video, StepMode::Sequential, true, s.video_attention);
                    trace.push(layer, Modality::Audio, StepMode::Sequential, true, s.audio_attention);
                    x_b = Some(s.bottleneck);
                    x_v = Some(s.video);
                    x_a = s.audio;
                }
                super::Strategy::Mean => {
                    let streams = [
                        (StreamState { modality: Modality::Video, frames: v }, video_block),
                        (StreamState { modality: Modality::Audio, frames: x_a }, audio_block),
                    ];
                    let m = fuse_mean_with(tape, &self.store, b, &streams, &mut reg)?;
                    let mut attn = m.attention.into_iter();
                    trace.push(layer, Modality::Video, StepMode::MeanParallel, true, attn.next().unwrap());
                    trace.push(layer, Modality::Audio, StepMode::MeanParallel, true, attn.next().unwrap());
                    x_b = Some(m.bottleneck);
                    x_v = Some(m.streams[0].frames);
                    x_a = m.streams[1].frames;
                }
            }
        }
        Ok(EncoderOutput {
            audio: x_a,
            video: x_v,
            bottleneck: x_b,
            trace,
        })
    }
}
