//! Mini-batch training with AdamW, warm-up plus cosine learning rate,
//! additive-noise and time-mask augmentation, and per-epoch evaluation.

use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{derive_seed, mix_at_snr, synth_noise, time_mask, Dataset, NoiseKind, SyntheticTask};
use crate::error::{Error, Result};
use crate::eval::corpus_wer;
use crate::kv::{format_list, parse_list, KvRecord};
use crate::model::{ForwardOptions, LossBreakdown, Model};
use crate::numkernel::{AdamW, Gradients, Tensor, WarmupCosine};
use crate::objective::BeamConfig;
use crate::par;

const STREAM_SHUFFLE: u64 = 0x200;
const STREAM_AUGMENT: u64 = 0x201;
const STREAM_DROPOUT: u64 = 0x202;

/// Utterances whose gradients are summed on one worker before the in-order
/// reduction across workers.
const GRAD_CHUNK: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Upper bound on summed audio frames per mini-batch.
    pub batch_frames: usize,
    pub lr_peak: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub label_smoothing: f64,
    /// Noise kinds mixed into training audio.
    pub train_noise: Vec<NoiseKind>,
    /// Probability that an utterance gets additive noise.
    pub noise_prob: f64,
    pub snr_min: f64,
    pub snr_max: f64,
    pub time_mask_span: usize,
    pub time_mask_count: usize,
    /// Eval utterances decoded after each epoch; 0 decodes the whole split.
    pub epoch_eval_utterances: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 6,
            batch_frames: 400,
            lr_peak: 2e-3,
            warmup_epochs: 1,
            weight_decay: 0.01,
            grad_clip: 5.0,
            label_smoothing: 0.0,
            train_noise: vec![NoiseKind::Babble],
            noise_prob: 0.8,
            snr_min: -5.0,
            snr_max: 20.0,
            time_mask_span: 2,
            time_mask_count: 1,
            epoch_eval_utterances: 100,
            seed: 0,
        }
    }
}

const KEYS: &[&str] = &[
    "epochs",
    "batch_frames",
    "lr_peak",
    "warmup_epochs",
    "weight_decay",
    "grad_clip",
    "label_smoothing",
    "train_noise",
    "noise_prob",
    "snr_min",
    "snr_max",
    "time_mask_span",
    "time_mask_count",
    "epoch_eval_utterances",
];

impl TrainConfig {
    pub fn keys() -> &'static [&'static str] {
        KEYS
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_frames == 0 {
            return fail("epochs and batch_frames must be positive".into());
        }
        if !(self.lr_peak > 0.0 && self.lr_peak.is_finite()) {
            return fail(format!("lr_peak must be positive, got {}", self.lr_peak));
        }
        if !(0.0..=1.0).contains(&self.noise_prob) || !(0.0..1.0).contains(&self.label_smoothing) {
            return fail("noise_prob must be in [0, 1] and label_smoothing in [0, 1)".into());
        }
        if !(self.snr_min.is_finite() && self.snr_max.is_finite() && self.snr_min <= self.snr_max) {
            return fail(format!("bad training SNR range [{}, {}]", self.snr_min, self.snr_max));
        }
        if self.noise_prob > 0.0 && self.train_noise.is_empty() {
            return fail("noise_prob > 0 needs at least one train_noise kind".into());
        }
        if self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return fail("weight_decay and grad_clip must be non-negative".into());
        }
        Ok(())
    }

    pub fn read_kv(&mut self, r: &KvRecord) -> Result<()> {
        r.read_into("epochs", &mut self.epochs)?;
        r.read_into("batch_frames", &mut self.batch_frames)?;
        r.read_into("lr_peak", &mut self.lr_peak)?;
        r.read_into("warmup_epochs", &mut self.warmup_epochs)?;
        r.read_into("weight_decay", &mut self.weight_decay)?;
        r.read_into("grad_clip", &mut self.grad_clip)?;
        r.read_into("label_smoothing", &mut self.label_smoothing)?;
        if let Some(v) = r.get("train_noise") {
            self.train_noise = parse_list("train_noise", v)?;
        }
        r.read_into("noise_prob", &mut self.noise_prob)?;
        r.read_into("snr_min", &mut self.snr_min)?;
        r.read_into("snr_max", &mut self.snr_max)?;
        r.read_into("time_mask_span", &mut self.time_mask_span)?;
        r.read_into("time_mask_count", &mut self.time_mask_count)?;
        r.read_into("epoch_eval_utterances", &mut self.epoch_eval_utterances)?;
        Ok(())
    }

    pub fn write_kv(&self, r: &mut KvRecord) {
        r.set("epochs", self.epochs);
        r.set("batch_frames", self.batch_frames);
        r.set("lr_peak", self.lr_peak);
        r.set("warmup_epochs", self.warmup_epochs);
        r.set("weight_decay", self.weight_decay);
        r.set("grad_clip", self.grad_clip);
        r.set("label_smoothing", self.label_smoothing);
        r.set("train_noise", format_list(&self.train_noise));
        r.set("noise_prob", self.noise_prob);
        r.set("snr_min", self.snr_min);
        r.set("snr_max", self.snr_max);
        r.set("time_mask_span", self.time_mask_span);
        r.set("time_mask_count", self.time_mask_count);
        r.set("epoch_eval_utterances", self.epoch_eval_utterances);
    }
}

/// Mean per-utterance loss terms and clean eval WER of one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub ctc_audio: f64,
    pub ctc_video: Option<f64>,
    pub ce: f64,
    pub eval_wer: f64,
}

pub const TRAIN_LOG_HEADER: &str = "epoch,lr,loss,ctc_audio,ctc_video,ce,eval_wer";

pub fn train_log_csv(rows: &[EpochLog]) -> String {
    let mut s = String::from(TRAIN_LOG_HEADER);
    s.push('\n');
    for r in rows {
        let v = r.ctc_video.map_or(String::new(), |v| format!("{v:.6}"));
        s.push_str(&format!(
            "{},{:.8},{:.6},{:.6},{v},{:.6},{:.6}\n",
            r.epoch, r.lr, r.loss, r.ctc_audio, r.ce, r.eval_wer
        ));
    }
    s
}

pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest eval WER (earliest on ties).
    pub best: Model,
    pub best_epoch: usize,
    pub last: Model,
    pub log: Vec<EpochLog>,
}

/// Group shuffled utterance indices into batches of at most `max_frames`
/// audio frames; an utterance longer than the limit gets its own batch.
fn batches(order: &[usize], frames: impl Fn(usize) -> usize, max_frames: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = Vec::new();
    let mut cur = Vec::new();
    let mut used = 0;
    for &i in order {
        let f = frames(i);
        if !cur.is_empty() && used + f > max_frames {
            out.push(std::mem::take(&mut cur));
            used = 0;
        }
        cur.push(i);
        used += f;
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Training view of one utterance: noise and time masking on the audio.
fn augment(task: &SyntheticTask, cfg: &TrainConfig, audio: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let noisy = rng.random::<f64>() < cfg.noise_prob;
    let mut x = if noisy {
        let kind = cfg.train_noise[rng.random_range(0..cfg.train_noise.len())];
        let snr = rng.random_range(cfg.snr_min..=cfg.snr_max);
        let (t, d) = audio.dims2()?;
        let noise = synth_noise(kind, t, d, task, rng)?;
        mix_at_snr(audio, &noise, snr)?
    } else {
        audio.clone()
    };
    let span = cfg.time_mask_span.min(x.rows().saturating_sub(1));
    if cfg.time_mask_count > 0 && span > 0 {
        x = time_mask(&x, span, cfg.time_mask_count, rng)?;
    }
    Ok(x)
}

struct Contribution {
    parts: Vec<LossBreakdown>,
    grads: Gradients,
}

/// Train `model` on `train`, decoding `eval` after every epoch.
pub fn train(
    mut model: Model,
    task: &SyntheticTask,
    train: &Dataset,
    eval: &Dataset,
    cfg: &TrainConfig,
    beam: &BeamConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.utterances.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    let spec = &task.spec;
    if model.cfg.vocab_size != spec.vocab_size || model.cfg.audio_in != spec.audio_dim || model.cfg.video_in != spec.video_dim {
        return Err(Error::Mismatch(format!(
            "model expects vocab {} and widths {}/{}; data has vocab {} and widths {}/{}",
            model.cfg.vocab_size, model.cfg.audio_in, model.cfg.video_in, spec.vocab_size, spec.audio_dim, spec.video_dim
        )));
    }
    let n = train.utterances.len();
    let frames = |i: usize| train.utterances[i].audio.rows();

    // batch layout is fixed per epoch by the shuffle, so count steps up front
    let orders: Vec<Vec<usize>> = (0..cfg.epochs)
        .map(|e| {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_SHUFFLE, e as u64)));
            order
        })
        .collect();
    let plans: Vec<Vec<Vec<usize>>> = orders.iter().map(|o| batches(o, frames, cfg.batch_frames)).collect();
    let steps_per_epoch = plans[0].len() as u64;
    let sched = WarmupCosine {
        peak: cfg.lr_peak,
        warmup_steps: cfg.warmup_epochs as u64 * steps_per_epoch,
        total_steps: plans.iter().map(|p| p.len() as u64).sum(),
    };
    let mut opt = AdamW::new(&model.store, 0.9, 0.98, cfg.weight_decay);
    let eval_n = match cfg.epoch_eval_utterances {
        0 => eval.utterances.len(),
        k => k.min(eval.utterances.len()),
    };
    let eval_subset: Vec<_> = eval.utterances[..eval_n].to_vec();

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Model)> = None;
    let mut step = 0u64;
    for (epoch, plan) in plans.iter().enumerate() {
        let mut sums = [0.0; 4];
        let mut lr = 0.0;
        for batch in plan {
            let chunks: Vec<&[usize]> = batch.chunks(GRAD_CHUNK).collect();
            let results = par::map(&chunks, |_, chunk| -> Result<Contribution> {
                let mut grads = Gradients::zeros_like(&model.store);
                let mut parts = Vec::with_capacity(chunk.len());
                for &i in *chunk {
                    let u = &train.utterances[i];
                    let key = ((epoch as u64) << 32) | i as u64;
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_AUGMENT, key));
                    let audio = augment(task, cfg, &u.audio, &mut rng)?;
                    let opts = ForwardOptions {
                        ablate_video_to_bottleneck: false,
                        dropout_seed: (model.cfg.dropout > 0.0).then(|| derive_seed(cfg.seed, STREAM_DROPOUT, key)),
                    };
                    let (p, g) = model.loss_and_grad(&audio, Some(&u.video), &u.transcript, &opts, cfg.label_smoothing)?;
                    if !p.total.is_finite() || !g.is_finite() {
                        return Err(Error::NonFiniteLoss {
                            epoch,
                            utterance: u.id.clone(),
                            detail: format!("{p:?}"),
                        });
                    }
                    grads.add_assign(&g);
                    parts.push(p);
                }
                Ok(Contribution { parts, grads })
            });
            let mut total = Gradients::zeros_like(&model.store);
            for r in results {
                let c = r?;
                total.add_assign(&c.grads);
                for p in c.parts {
                    sums[0] += p.total;
                    sums[1] += p.ctc_audio;
                    sums[2] += p.ctc_video.unwrap_or(0.0);
                    sums[3] += p.ce;
                }
            }
            total.scale(1.0 / batch.len() as f64);
            total.clip_global_norm(cfg.grad_clip);
            lr = sched.lr(step);
            opt.step(&mut model.store, &total, lr);
            step += 1;
        }
        let inv = 1.0 / n as f64;
        let wer = corpus_wer(&model, task, &eval_subset, &crate::data::Condition::Clean, cfg.seed, beam)?.rate();
        let row = EpochLog {
            epoch: epoch + 1,
            lr,
            loss: sums[0] * inv,
            ctc_audio: sums[1] * inv,
            ctc_video: model.cfg.variant.has_video().then_some(sums[2] * inv),
            ce: sums[3] * inv,
            eval_wer: wer,
        };
        on_epoch(&row);
        if best.as_ref().is_none_or(|b| wer < b.0) {
            best = Some((wer, epoch + 1, model.clone()));
        }
        log.push(row);
    }
    let (_, best_epoch, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: model,
        log,
    })
}
