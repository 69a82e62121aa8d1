use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kv::KvRecord;

/// How the bottleneck is updated inside a fused layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Video block first, then the audio block consumes its bottleneck output.
    Sequential,
    /// Both blocks read the same bottleneck; their outputs are averaged.
    Mean,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Sequential => "sequential",
            Strategy::Mean => "mean",
        })
    }
}

impl FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sequential" | "seq" => Ok(Strategy::Sequential),
            "mean" => Ok(Strategy::Mean),
            other => Err(format!("unknown fusion strategy `{other}`")),
        }
    }
}

/// Model family. `AudioOnly` drops the video stream and the bottleneck.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Bottleneck,
    AudioOnly,
}

impl Variant {
    pub fn has_video(self) -> bool {
        matches!(self, Variant::Bottleneck)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Bottleneck => "bottleneck",
            Variant::AudioOnly => "audio_only",
        })
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "bottleneck" => Ok(Variant::Bottleneck),
            "audio_only" => Ok(Variant::AudioOnly),
            other => Err(format!("unknown model variant `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub enc_layers: usize,
    /// First fused encoder layer, 0-based. `fusion_layer == enc_layers`
    /// disables fusion.
    pub fusion_layer: usize,
    pub bottleneck_len: usize,
    pub bottleneck_sigma: f64,
    pub heads: usize,
    pub ffn_dim: usize,
    pub conv_kernel: usize,
    pub strategy: Strategy,
    /// Number of real output tokens; CTC adds a blank and the decoder adds
    /// an end marker, both at index 0.
    pub vocab_size: usize,
    pub decoder_layers: usize,
    pub w_ctc: f64,
    pub dropout: f64,
    pub audio_in: usize,
    pub video_in: usize,
    pub variant: Variant,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            enc_layers: 6,
            fusion_layer: 2,
            bottleneck_len: 8,
            bottleneck_sigma: 0.02,
            heads: 4,
            ffn_dim: 256,
            conv_kernel: 7,
            strategy: Strategy::Sequential,
            vocab_size: 12,
            decoder_layers: 2,
            w_ctc: 0.3,
            dropout: 0.0,
            audio_in: 16,
            video_in: 16,
            variant: Variant::Bottleneck,
            seed: 0,
        }
    }
}

const KEYS: &[&str] = &[
    "d_model",
    "enc_layers",
    "fusion_layer",
    "bottleneck_len",
    "bottleneck_sigma",
    "heads",
    "ffn_dim",
    "conv_kernel",
    "strategy",
    "vocab_size",
    "decoder_layers",
    "w_ctc",
    "dropout",
    "audio_in",
    "video_in",
    "variant",
    "seed",
];

impl ModelConfig {
    pub fn keys() -> &'static [&'static str] {
        KEYS
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.enc_layers == 0 {
            return fail("d_model and enc_layers must be positive".into());
        }
        if self.fusion_layer > self.enc_layers {
            return fail(format!(
                "fusion_layer {} exceeds enc_layers {}",
                self.fusion_layer, self.enc_layers
            ));
        }
        if self.bottleneck_len == 0 {
            return fail("bottleneck_len must be at least 1".into());
        }
        if self.bottleneck_sigma.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return fail("bottleneck_sigma must be positive".into());
        }
        if self.conv_kernel.is_multiple_of(2) {
            return fail(format!("conv_kernel must be odd, got {}", self.conv_kernel));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        if !(0.0..=1.0).contains(&self.w_ctc) {
            return fail(format!("w_ctc {} outside [0, 1]", self.w_ctc));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.vocab_size == 0 || self.audio_in == 0 || self.video_in == 0 || self.ffn_dim == 0 {
            return fail("vocab_size, ffn_dim and input dims must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Whether encoder layer `l` runs with the bottleneck attached.
    pub fn is_fused(&self, layer: usize) -> bool {
        self.variant.has_video() && layer >= self.fusion_layer
    }

    pub fn to_kv(&self) -> KvRecord {
        let mut r = KvRecord::new();
        r.set("d_model", self.d_model);
        r.set("enc_layers", self.enc_layers);
        r.set("fusion_layer", self.fusion_layer);
        r.set("bottleneck_len", self.bottleneck_len);
        r.set("bottleneck_sigma", self.bottleneck_sigma);
        r.set("heads", self.heads);
        r.set("ffn_dim", self.ffn_dim);
        r.set("conv_kernel", self.conv_kernel);
        r.set("strategy", self.strategy);
        r.set("vocab_size", self.vocab_size);
        r.set("decoder_layers", self.decoder_layers);
        r.set("w_ctc", self.w_ctc);
        r.set("dropout", self.dropout);
        r.set("audio_in", self.audio_in);
        r.set("video_in", self.video_in);
        r.set("variant", self.variant);
        r.set("seed", self.seed);
        r
    }

    pub fn from_kv(r: &KvRecord) -> Result<Self> {
        r.reject_unknown(KEYS)?;
        let cfg = ModelConfig {
            d_model: r.require("d_model")?,
            enc_layers: r.require("enc_layers")?,
            fusion_layer: r.require("fusion_layer")?,
            bottleneck_len: r.require("bottleneck_len")?,
            bottleneck_sigma: r.require("bottleneck_sigma")?,
            heads: r.require("heads")?,
            ffn_dim: r.require("ffn_dim")?,
            conv_kernel: r.require("conv_kernel")?,
            strategy: r.require("strategy")?,
            vocab_size: r.require("vocab_size")?,
            decoder_layers: r.require("decoder_layers")?,
            w_ctc: r.require("w_ctc")?,
            dropout: r.require("dropout")?,
            audio_in: r.require("audio_in")?,
            video_in: r.require("video_in")?,
            variant: r.require("variant")?,
            seed: r.require("seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
