use rand::Rng;

use crate::error::{Error, Result};
use crate::numkernel::Tensor;

/// Zero `n_masks` random runs of whole frames, each of length
/// `0..=max_span`. Runs may overlap.
pub fn time_mask<R: Rng>(x: &Tensor, max_span: usize, n_masks: usize, rng: &mut R) -> Result<Tensor> {
    let (t, d) = x.dims2()?;
    if n_masks == 0 {
        return Ok(x.clone());
    }
    if max_span >= t {
        return Err(Error::Usage(format!("mask span {max_span} must be below the frame count {t}")));
    }
    let mut out = x.clone();
    let data = out.data_mut();
    for _ in 0..n_masks {
        let span = rng.random_range(0..=max_span);
        let start = rng.random_range(0..=t - span);
        data[start * d..(start + span) * d].iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(out)
}

/// Frames whose every entry is exactly zero.
pub fn masked_frames(x: &Tensor) -> usize {
    let d = x.shape().last().copied().unwrap_or(1).max(1);
    x.data().chunks(d).filter(|r| r.iter().all(|&v| v == 0.0)).count()
}
