use crate::error::{Error, Result};
use crate::numkernel::{log_add_exp, Tape, Var};

pub const BLANK: usize = 0;

/// Negative log-likelihood of `target` under frame log-posteriors
/// `logp[T×C]` (blank at 0), and its gradient with respect to `logp`.
///
/// Runs the forward-backward recursions over the blank-augmented label
/// sequence entirely in log space.
pub fn ctc_loss_and_grad(logp: &[f64], frames: usize, classes: usize, target: &[usize]) -> Result<(f64, Vec<f64>)> {
    if frames == 0 || logp.len() != frames * classes {
        return Err(Error::Shape {
            op: "ctc",
            lhs: vec![frames, classes],
            rhs: vec![logp.len()],
        });
    }
    if let Some(&bad) = target.iter().find(|&&y| y == BLANK || y >= classes) {
        return Err(Error::Usage(format!("CTC target token {bad} outside 1..{classes}")));
    }
    let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
    if frames < target.len() + repeats {
        return Err(Error::InfeasibleAlignment {
            frames,
            target_len: target.len(),
            repeats,
        });
    }

    let s_len = 2 * target.len() + 1;
    let ext: Vec<usize> = (0..s_len).map(|s| if s % 2 == 0 { BLANK } else { target[s / 2] }).collect();
    let lp = |t: usize, k: usize| logp[t * classes + k];
    let skip_ok = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = lp(0, ext[0]);
    if s_len > 1 {
        alpha[1] = lp(0, ext[1]);
    }
    for t in 1..frames {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let mut a = prev[s];
            if s >= 1 {
                a = log_add_exp(a, prev[s - 1]);
            }
            if skip_ok(s) {
                a = log_add_exp(a, prev[s - 2]);
            }
            cur[s] = if a == ninf { ninf } else { a + lp(t, ext[s]) };
        }
    }
    let last = (frames - 1) * s_len;
    let log_p = if s_len > 1 {
        log_add_exp(alpha[last + s_len - 1], alpha[last + s_len - 2])
    } else {
        alpha[last]
    };
    if log_p == ninf {
        return Err(Error::InfeasibleAlignment {
            frames,
            target_len: target.len(),
            repeats,
        });
    }

    // beta[t][s]: log-prob of frames t+1.. given state s at frame t
    let mut beta = vec![ninf; frames * s_len];
    beta[last + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[last + s_len - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let next = (t + 1) * s_len;
            let mut b = beta[next + s] + lp(t + 1, ext[s]);
            if s + 1 < s_len {
                b = log_add_exp(b, beta[next + s + 1] + lp(t + 1, ext[s + 1]));
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                b = log_add_exp(b, beta[next + s + 2] + lp(t + 1, ext[s + 2]));
            }
            beta[t * s_len + s] = b;
        }
    }

    let mut grad = vec![0.0; frames * classes];
    for t in 0..frames {
        for s in 0..s_len {
            let occ = alpha[t * s_len + s] + beta[t * s_len + s] - log_p;
            if occ > ninf {
                grad[t * classes + ext[s]] -= occ.exp();
            }
        }
    }
    Ok((-log_p, grad))
}

/// CTC negative log-likelihood recorded on the tape, differentiable with
/// respect to `log_probs` (`T×(V+1)`, typically a log-softmax output).
pub fn ctc_nll(tape: &mut Tape, log_probs: Var, target: &[usize]) -> Result<Var> {
    let (frames, classes) = match tape.shape(log_probs) {
        [t, c] => (*t, *c),
        s => {
            return Err(Error::Shape {
                op: "ctc_nll",
                lhs: s.to_vec(),
                rhs: vec![],
            })
        }
    };
    let (nll, grad) = ctc_loss_and_grad(tape.data(log_probs), frames, classes, target)?;
    Ok(tape.scalar_with_grad(log_probs, nll, grad))
}
