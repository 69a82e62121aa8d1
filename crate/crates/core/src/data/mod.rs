//! Synthetic audio-visual recognition task. Tokens are rendered as audio
//! template blocks; video frames only reveal each token's viseme class, so
//! several tokens look identical to the video stream.

mod augment;
mod dataset;
mod noise;

pub use augment::{masked_frames, time_mask};
pub use dataset::{build_dataset, read_dataset, write_dataset, Dataset, DatasetFiles, DATASET_MAGIC, DATASET_VERSION};
pub use noise::{babble, mix_at_snr, power, synth_noise, NoiseKind, NoiseSpec, BABBLE_STREAMS};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::kv::KvRecord;
use crate::numkernel::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTaskSpec {
    pub vocab_size: usize,
    pub viseme_classes: usize,
    /// Audio frames per token.
    pub frames_per_token: usize,
    /// Audio frames per video frame.
    pub video_rate_divisor: usize,
    pub audio_dim: usize,
    pub video_dim: usize,
    pub jitter_std: f64,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Seeds the token and viseme templates.
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            vocab_size: 12,
            viseme_classes: 4,
            frames_per_token: 4,
            video_rate_divisor: 2,
            audio_dim: 16,
            video_dim: 16,
            jitter_std: 0.3,
            min_tokens: 2,
            max_tokens: 5,
            seed: 0,
        }
    }
}

const KEYS: &[&str] = &[
    "vocab_size",
    "viseme_classes",
    "frames_per_token",
    "video_rate_divisor",
    "audio_dim",
    "video_dim",
    "jitter_std",
    "min_tokens",
    "max_tokens",
    "seed",
];

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size < 2 {
            return fail(format!("vocab_size must be at least 2, got {}", self.vocab_size));
        }
        if self.viseme_classes == 0 || self.viseme_classes >= self.vocab_size {
            return fail(format!(
                "viseme_classes must be in 1..{}, got {}",
                self.vocab_size, self.viseme_classes
            ));
        }
        if self.frames_per_token == 0 || self.video_rate_divisor == 0 || !self.frames_per_token.is_multiple_of(self.video_rate_divisor) {
            return fail(format!(
                "frames_per_token ({}) must be a positive multiple of video_rate_divisor ({})",
                self.frames_per_token, self.video_rate_divisor
            ));
        }
        if self.audio_dim == 0 || self.video_dim == 0 {
            return fail("feature dimensions must be positive".into());
        }
        if !(self.jitter_std >= 0.0 && self.jitter_std.is_finite()) {
            return fail(format!("jitter_std must be finite and non-negative, got {}", self.jitter_std));
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return fail(format!("token range {}..={} is empty or starts at 0", self.min_tokens, self.max_tokens));
        }
        Ok(())
    }

    pub fn video_frames_per_token(&self) -> usize {
        self.frames_per_token / self.video_rate_divisor
    }

    /// Viseme class of token `t ∈ 1..=V`.
    pub fn viseme_of(&self, token: usize) -> usize {
        (token - 1) % self.viseme_classes
    }

    pub fn to_kv(&self) -> KvRecord {
        let mut r = KvRecord::new();
        r.set("vocab_size", self.vocab_size);
        r.set("viseme_classes", self.viseme_classes);
        r.set("frames_per_token", self.frames_per_token);
        r.set("video_rate_divisor", self.video_rate_divisor);
        r.set("audio_dim", self.audio_dim);
        r.set("video_dim", self.video_dim);
        r.set("jitter_std", self.jitter_std);
        r.set("min_tokens", self.min_tokens);
        r.set("max_tokens", self.max_tokens);
        r.set("seed", self.seed);
        r
    }

    pub fn from_kv(r: &KvRecord) -> Result<Self> {
        r.reject_unknown(KEYS)?;
        let mut s = SyntheticTaskSpec::default();
        s.read_kv(r)?;
        s.validate()?;
        Ok(s)
    }

    /// Overwrite fields present in `r`, leaving the others untouched.
    pub fn read_kv(&mut self, r: &KvRecord) -> Result<()> {
        r.read_into("vocab_size", &mut self.vocab_size)?;
        r.read_into("viseme_classes", &mut self.viseme_classes)?;
        r.read_into("frames_per_token", &mut self.frames_per_token)?;
        r.read_into("video_rate_divisor", &mut self.video_rate_divisor)?;
        r.read_into("audio_dim", &mut self.audio_dim)?;
        r.read_into("video_dim", &mut self.video_dim)?;
        r.read_into("jitter_std", &mut self.jitter_std)?;
        r.read_into("min_tokens", &mut self.min_tokens)?;
        r.read_into("max_tokens", &mut self.max_tokens)?;
        r.read_into("seed", &mut self.seed)?;
        Ok(())
    }

    pub fn keys() -> &'static [&'static str] {
        KEYS
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub transcript: Vec<usize>,
    pub audio: Tensor,
    pub video: Tensor,
}

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream seed for `(seed, stream, index)`.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    mix64(mix64(mix64(seed) ^ stream) ^ index)
}

pub(crate) const STREAM_TEMPLATES: u64 = 1;
pub(crate) const STREAM_TRAIN: u64 = 2;
pub(crate) const STREAM_EVAL: u64 = 3;
pub(crate) const STREAM_NOISE: u64 = 0x100;

/// Evaluation condition of the audio stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Condition {
    Clean,
    Noisy(NoiseSpec),
}

impl Condition {
    /// Audio of utterance `index` under this condition. The noise draw
    /// depends on `(seed, kind, index)` only, so one realization is shared
    /// by every SNR of a kind.
    pub fn apply(&self, task: &SyntheticTask, audio: &Tensor, seed: u64, index: usize) -> Result<Tensor> {
        match self {
            Condition::Clean => Ok(audio.clone()),
            Condition::Noisy(n) => {
                let stream = STREAM_NOISE + n.kind as u64;
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, index as u64));
                let (t, d) = audio.dims2()?;
                let noise = synth_noise(n.kind, t, d, task, &mut rng)?;
                mix_at_snr(audio, &noise, n.snr_db)
            }
        }
    }

    /// `clean` or `<kind>_<snr>`, e.g. `white_-7.5`.
    pub fn label(&self) -> String {
        match self {
            Condition::Clean => "clean".into(),
            Condition::Noisy(n) => format!("{}_{}", n.kind, n.snr_db),
        }
    }
}

/// A task spec with its templates drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub spec: SyntheticTaskSpec,
    /// Per token `1..=V`, `frames_per_token × audio_dim`; index 0 unused.
    audio_templates: Vec<Vec<f64>>,
    /// Per viseme class, `video_frames_per_token × video_dim`.
    video_templates: Vec<Vec<f64>>,
}

impl SyntheticTask {
    pub fn new(spec: SyntheticTaskSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, STREAM_TEMPLATES, 0));
        let mut draw = |n: usize| (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect::<Vec<_>>();
        let mut audio_templates = vec![Vec::new()];
        for _ in 0..spec.vocab_size {
            audio_templates.push(draw(spec.frames_per_token * spec.audio_dim));
        }
        let vf = spec.video_frames_per_token() * spec.video_dim;
        let video_templates = (0..spec.viseme_classes).map(|_| draw(vf)).collect();
        Ok(SyntheticTask {
            spec,
            audio_templates,
            video_templates,
        })
    }

    pub fn audio_template(&self, token: usize) -> &[f64] {
        &self.audio_templates[token]
    }

    pub fn video_template(&self, viseme: usize) -> &[f64] {
        &self.video_templates[viseme]
    }

    pub fn sample_transcript<R: Rng>(&self, rng: &mut R) -> Vec<usize> {
        let len = rng.random_range(self.spec.min_tokens..=self.spec.max_tokens);
        (0..len).map(|_| rng.random_range(1..=self.spec.vocab_size)).collect()
    }

    fn jitter<R: Rng>(&self, base: &[f64], rng: &mut R, out: &mut Vec<f64>) {
        let s = self.spec.jitter_std;
        if s == 0.0 {
            out.extend_from_slice(base);
        } else {
            out.extend(base.iter().map(|&b| b + s * rng.sample::<f64, _>(StandardNormal)));
        }
    }

    /// Audio stream for a transcript: template blocks plus jitter.
    pub fn render_audio<R: Rng>(&self, transcript: &[usize], rng: &mut R) -> Result<Tensor> {
        self.check_tokens(transcript)?;
        let mut data = Vec::with_capacity(transcript.len() * self.audio_templates[1].len());
        for &t in transcript {
            self.jitter(&self.audio_templates[t], rng, &mut data);
        }
        Tensor::new(vec![transcript.len() * self.spec.frames_per_token, self.spec.audio_dim], data)
    }

    /// Video stream for a transcript: viseme-class template blocks plus jitter.
    pub fn render_video<R: Rng>(&self, transcript: &[usize], rng: &mut R) -> Result<Tensor> {
        self.check_tokens(transcript)?;
        let mut data = Vec::new();
        for &t in transcript {
            self.jitter(&self.video_templates[self.spec.viseme_of(t)], rng, &mut data);
        }
        Tensor::new(vec![transcript.len() * self.spec.video_frames_per_token(), self.spec.video_dim], data)
    }

    fn check_tokens(&self, transcript: &[usize]) -> Result<()> {
        if transcript.is_empty() {
            return Err(Error::Data("empty transcript".into()));
        }
        match transcript.iter().find(|&&t| t == 0 || t > self.spec.vocab_size) {
            Some(bad) => Err(Error::Data(format!("token {bad} outside 1..={}", self.spec.vocab_size))),
            None => Ok(()),
        }
    }

    /// Render a given transcript; audio draws its jitter before video.
    pub fn render<R: Rng>(&self, id: &str, transcript: Vec<usize>, rng: &mut R) -> Result<Utterance> {
        let audio = self.render_audio(&transcript, rng)?;
        let video = self.render_video(&transcript, rng)?;
        Ok(Utterance {
            id: id.to_string(),
            transcript,
            audio,
            video,
        })
    }

    pub fn generate_utterance<R: Rng>(&self, id: &str, rng: &mut R) -> Result<Utterance> {
        let transcript = self.sample_transcript(rng);
        self.render(id, transcript, rng)
    }
}

#[cfg(test)]
mod tests;
