use super::ctc::ctc_nll;
use crate::error::{Error, Result};
use crate::numkernel::{Tape, Var};

/// Scalar weighting of the hybrid objective in its minimized form:
/// `w·(ctc_audio + ctc_video) + (1−w)·ce`. The boundaries are returned
/// without arithmetic so that `w ∈ {0, 1}` reproduces a single term exactly.
pub fn combine_hybrid(ctc_audio: f64, ctc_video: Option<f64>, ce: f64, w: f64) -> f64 {
    let ctc = ctc_audio + ctc_video.unwrap_or(0.0);
    if w == 1.0 {
        ctc
    } else if w == 0.0 {
        ce
    } else {
        w * ctc + (1.0 - w) * ce
    }
}

fn check_weight(w: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Config(format!("CTC weight {w} outside [0, 1]")));
    }
    Ok(())
}

/// Combine already-recorded loss terms on the tape. At `w == 0` the CTC
/// terms stay on the tape for logging but receive no gradient.
pub fn hybrid_loss(tape: &mut Tape, ctc_audio: Var, ctc_video: Option<Var>, ce: Var, w: f64) -> Result<Var> {
    check_weight(w)?;
    let ctc = match ctc_video {
        Some(v) => tape.add(ctc_audio, v)?,
        None => ctc_audio,
    };
    if w == 1.0 {
        return Ok(ctc);
    }
    if w == 0.0 {
        return Ok(ce);
    }
    let a = tape.scale(ctc, w);
    let b = tape.scale(ce, 1.0 - w);
    tape.add(a, b)
}

#[derive(Debug, Clone, Copy)]
pub struct HybridTerms {
    pub total: Var,
    pub ctc_audio: Var,
    pub ctc_video: Option<Var>,
    pub ce: Var,
}

/// Hybrid loss from raw head outputs: CTC log-posteriors per stream and
/// decoder logits for the shifted target (`target` followed by the end
/// marker, with the decoder fed the start marker followed by `target`).
pub fn hybrid_loss_from_outputs(
    tape: &mut Tape,
    audio_logp: Var,
    video_logp: Option<Var>,
    decoder_logits: Var,
    target: &[usize],
    w: f64,
    label_smoothing: f64,
) -> Result<HybridTerms> {
    let ctc_audio = ctc_nll(tape, audio_logp, target)?;
    let ctc_video = video_logp.map(|v| ctc_nll(tape, v, target)).transpose()?;
    let mut shifted = target.to_vec();
    shifted.push(crate::model::EOS);
    let ce = tape.cross_entropy(decoder_logits, &shifted, label_smoothing)?;
    let total = hybrid_loss(tape, ctc_audio, ctc_video, ce, w)?;
    Ok(HybridTerms {
        total,
        ctc_audio,
        ctc_video,
        ce,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalars(tape: &mut Tape, a: f64, v: f64, c: f64) -> (Var, Var, Var) {
        let x = tape.constant(&[], vec![a]).unwrap();
        let y = tape.constant(&[], vec![v]).unwrap();
        let z = tape.constant(&[], vec![c]).unwrap();
        (x, y, z)
    }

    #[test]
    fn boundaries_and_arithmetic() {
        let mut tape = Tape::new();
        let (a, v, c) = scalars(&mut tape, 2.0, 3.0, 1.5);
        let l1 = hybrid_loss(&mut tape, a, Some(v), c, 1.0).unwrap();
        assert_eq!(tape.scalar(l1), 5.0);
        let l0 = hybrid_loss(&mut tape, a, Some(v), c, 0.0).unwrap();
        assert_eq!(tape.scalar(l0), 1.5);
        let l = hybrid_loss(&mut tape, a, Some(v), c, 0.3).unwrap();
        assert!((tape.scalar(l) - 2.55).abs() < 1e-12);
        assert!((combine_hybrid(2.0, Some(3.0), 1.5, 0.3) - 2.55).abs() < 1e-12);
        assert!(hybrid_loss(&mut tape, a, None, c, 1.2).is_err());
    }

    #[test]
    fn monotone_in_weight_toward_ctc_sum() {
        let (a, v, ce) = (2.0, 3.0, 1.5);
        let mut prev = combine_hybrid(a, Some(v), ce, 0.0);
        for i in 1..=20 {
            let cur = combine_hybrid(a, Some(v), ce, i as f64 / 20.0);
            assert!(cur >= prev);
            prev = cur;
        }
        assert_eq!(prev, 5.0);
    }

    #[test]
    fn zero_weight_sends_no_gradient_to_ctc_terms() {
        let mut tape = Tape::new();
        let a = tape.leaf(crate::numkernel::Tensor::scalar(2.0).with_requires_grad(true));
        let c = tape.leaf(crate::numkernel::Tensor::scalar(1.0).with_requires_grad(true));
        let l = hybrid_loss(&mut tape, a, None, c, 0.0).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(a).is_none());
        assert_eq!(tape.grad(c).unwrap(), &[1.0]);
    }
}
