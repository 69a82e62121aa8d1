use super::rollout::{modality_influence, normalized_influence, rollout, Influence};
use crate::data::{Condition, Dataset, NoiseKind, NoiseSpec, SyntheticTask};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model};
use crate::numkernel::{Tape, Tensor};
use crate::par;

pub const INFLUENCE_HEADER: &str = "noise_type,snr_db,f_va_raw,f_av_raw,f_va_norm,f_av_norm";

/// Eval-set mean influence under one condition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InfluenceReport {
    pub noise_type: NoiseKind,
    /// `None` for the clean row.
    pub snr_db: Option<f64>,
    pub f_va_raw: f64,
    pub f_av_raw: f64,
    pub f_va_norm: f64,
    pub f_av_norm: f64,
}

/// Rollout influence for one utterance; returns raw and normalized values.
pub fn utterance_influence(model: &Model, audio: &Tensor, video: &Tensor, residual_weight: f64) -> Result<(Influence, (f64, f64))> {
    if !model.cfg.variant.has_video() {
        return Err(Error::Usage("influence analysis needs a model with a video stream".into()));
    }
    let mut tape = Tape::inference();
    let out = model.forward_dual_stream(&mut tape, audio, Some(video), &ForwardOptions::default())?;
    let r = rollout(&out.trace, residual_weight)?;
    let f = modality_influence(&r, &out.trace.audio_indices(), &out.trace.video_indices())?;
    Ok((f, normalized_influence(&f)?))
}

/// Grid rows in output order: noise kinds alphabetically, each with its
/// clean row first and then SNRs from high to low.
pub fn sweep_conditions(kinds: &[NoiseKind], snrs: &[f64]) -> Result<Vec<(NoiseKind, Condition)>> {
    let mut kinds = kinds.to_vec();
    kinds.sort_by_key(|k| k.to_string());
    kinds.dedup();
    let mut snrs = snrs.to_vec();
    snrs.sort_by(|a, b| b.total_cmp(a));
    snrs.dedup();
    let mut out = Vec::new();
    for k in kinds {
        out.push((k, Condition::Clean));
        for &s in &snrs {
            out.push((k, Condition::Noisy(NoiseSpec::new(k, s)?)));
        }
    }
    Ok(out)
}

fn mean_over_set(
    model: &Model,
    task: &SyntheticTask,
    eval: &Dataset,
    cond: &Condition,
    seed: u64,
    residual_weight: f64,
) -> Result<[f64; 4]> {
    let rows = par::map(&eval.utterances, |i, u| -> Result<[f64; 4]> {
        let audio = cond.apply(task, &u.audio, seed, i)?;
        let (f, (va, av)) = utterance_influence(model, &audio, &u.video, residual_weight)?;
        Ok([f.v_to_a, f.a_to_v, va, av])
    });
    let mut acc = [0.0; 4];
    for r in rows {
        let r = r?;
        acc.iter_mut().zip(r).for_each(|(a, v)| *a += v);
    }
    let inv = 1.0 / eval.utterances.len() as f64;
    Ok(acc.map(|a| a * inv))
}

/// Mean raw and normalized cross-modal influence over `eval` for every
/// grid condition plus one clean row per noise kind.
pub fn snr_influence_sweep(
    model: &Model,
    task: &SyntheticTask,
    eval: &Dataset,
    kinds: &[NoiseKind],
    snrs: &[f64],
    seed: u64,
    residual_weight: f64,
) -> Result<Vec<InfluenceReport>> {
    if eval.utterances.is_empty() {
        return Err(Error::Usage("influence sweep needs at least one utterance".into()));
    }
    let mut clean: Option<[f64; 4]> = None;
    let mut out = Vec::new();
    for (kind, cond) in sweep_conditions(kinds, snrs)? {
        let m = match cond {
            Condition::Clean => match clean {
                Some(m) => m,
                None => *clean.insert(mean_over_set(model, task, eval, &cond, seed, residual_weight)?),
            },
            Condition::Noisy(_) => mean_over_set(model, task, eval, &cond, seed, residual_weight)?,
        };
        out.push(InfluenceReport {
            noise_type: kind,
            snr_db: match cond {
                Condition::Clean => None,
                Condition::Noisy(n) => Some(n.snr_db),
            },
            f_va_raw: m[0],
            f_av_raw: m[1],
            f_va_norm: m[2],
            f_av_norm: m[3],
        });
    }
    Ok(out)
}

pub fn influence_csv(reports: &[InfluenceReport]) -> String {
    let mut s = String::from(INFLUENCE_HEADER);
    s.push('\n');
    for r in reports {
        let snr = r.snr_db.map_or("clean".to_string(), |v| v.to_string());
        s.push_str(&format!(
            "{},{snr},{:.6},{:.6},{:.6},{:.6}\n",
            r.noise_type, r.f_va_raw, r.f_av_raw, r.f_va_norm, r.f_av_norm
        ));
    }
    s
}
