use crate::error::{Error, Result};
use crate::model::{AttentionTrace, StepMode, TraceEntry};

/// Row-stochastic `n×n` matrix over the global token index space.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutMatrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl RolloutMatrix {
    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        (0..n).for_each(|i| data[i * n + i] = 1.0);
        RolloutMatrix { n, data }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    /// `self · rhs`.
    pub fn matmul(&self, rhs: &RolloutMatrix) -> RolloutMatrix {
        let n = self.n;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let a = self.data[i * n + k];
                if a == 0.0 {
                    continue;
                }
                let row = &rhs.data[k * n..(k + 1) * n];
                out[i * n..(i + 1) * n].iter_mut().zip(row).for_each(|(o, r)| *o += a * r);
            }
        }
        RolloutMatrix { n, data: out }
    }

    pub fn max_row_error(&self) -> f64 {
        (0..self.n)
            .map(|i| (self.row(i).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

fn check_entry(e: &TraceEntry, n: usize) -> Result<()> {
    let p = e.participants.len();
    if e.attention.len() != p * p || e.participants.iter().any(|&i| i >= n) {
        return Err(Error::Data(format!("sub-step {}: attention does not match its participants", e.sub_step)));
    }
    for (r, row) in e.attention.chunks(p.max(1)).enumerate() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || row.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::Data(format!(
                "sub-step {} row {r}: not a probability row (sum {sum})",
                e.sub_step
            )));
        }
    }
    Ok(())
}

/// Global matrix of one encoder step. Tokens outside every entry keep an
/// identity row; tokens shared by several entries (the bottleneck in mean
/// fusion) get the average of their rows.
fn step_matrix(entries: &[&TraceEntry], n: usize) -> RolloutMatrix {
    let mut data = vec![0.0; n * n];
    let mut cover = vec![0usize; n];
    for e in entries {
        let p = e.participants.len();
        for (r, &gi) in e.participants.iter().enumerate() {
            cover[gi] += 1;
            for (c, &gj) in e.participants.iter().enumerate() {
                data[gi * n + gj] += e.attention[r * p + c];
            }
        }
    }
    for (i, &k) in cover.iter().enumerate() {
        match k {
            0 => data[i * n + i] = 1.0,
            1 => {}
            k => {
                let inv = 1.0 / k as f64;
                data[i * n..(i + 1) * n].iter_mut().for_each(|v| *v *= inv);
            }
        }
    }
    RolloutMatrix { n, data }
}

/// Attention rollout: each step's attention `A` is mixed with the identity
/// as `(1−r)·A + r·I`, row-normalized, and left-multiplied into the running
/// product. Mean-fusion entries of one layer form a single step; every
/// other entry is its own step.
pub fn rollout(trace: &AttentionTrace, residual_weight: f64) -> Result<RolloutMatrix> {
    if !(0.0..=1.0).contains(&residual_weight) {
        return Err(Error::Usage(format!("residual weight {residual_weight} outside [0, 1]")));
    }
    let n = trace.num_tokens();
    for e in &trace.entries {
        check_entry(e, n)?;
    }
    let mut acc = RolloutMatrix::identity(n);
    let mut i = 0;
    while i < trace.entries.len() {
        let e = &trace.entries[i];
        let mut group = vec![e];
        if e.mode == StepMode::MeanParallel {
            while let Some(next) = trace.entries.get(i + group.len()) {
                if next.mode != StepMode::MeanParallel || next.layer != e.layer {
                    break;
                }
                group.push(next);
            }
        }
        i += group.len();
        let mut step = step_matrix(&group, n);
        for r in 0..n {
            let row = &mut step.data[r * n..(r + 1) * n];
            row.iter_mut().for_each(|v| *v *= 1.0 - residual_weight);
            row[r] += residual_weight;
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        acc = step.matmul(&acc);
    }
    Ok(acc)
}

/// Mean rollout mass between modality index sets (`x_to_y` is the mass
/// that rows of `y` draw from columns of `x`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Influence {
    pub a_to_a: f64,
    pub v_to_a: f64,
    pub v_to_v: f64,
    pub a_to_v: f64,
}

fn block_mean(m: &RolloutMatrix, rows: &[usize], cols: &[usize]) -> f64 {
    let mut s = 0.0;
    for &i in rows {
        let row = m.row(i);
        for &j in cols {
            s += row[j];
        }
    }
    s / (rows.len() * cols.len()) as f64
}

pub fn modality_influence(m: &RolloutMatrix, audio_idx: &[usize], video_idx: &[usize]) -> Result<Influence> {
    if audio_idx.is_empty() || video_idx.is_empty() {
        return Err(Error::Usage("influence needs non-empty audio and video index sets".into()));
    }
    if audio_idx.iter().chain(video_idx).any(|&i| i >= m.n) {
        return Err(Error::Usage(format!("index outside the {}-token rollout", m.n)));
    }
    if audio_idx.iter().any(|i| video_idx.contains(i)) {
        return Err(Error::Usage("audio and video index sets overlap".into()));
    }
    Ok(Influence {
        a_to_a: block_mean(m, audio_idx, audio_idx),
        v_to_a: block_mean(m, audio_idx, video_idx),
        v_to_v: block_mean(m, video_idx, video_idx),
        a_to_v: block_mean(m, video_idx, audio_idx),
    })
}

/// Cross-modal share of incoming mass: `(v→a / (a→a + v→a), a→v / (v→v + a→v))`.
pub fn normalized_influence(f: &Influence) -> Result<(f64, f64)> {
    let da = f.a_to_a + f.v_to_a;
    let dv = f.v_to_v + f.a_to_v;
    if da <= 0.0 || dv <= 0.0 {
        return Err(Error::DegenerateRollout(format!(
            "no incoming frame mass (audio {da}, video {dv})"
        )));
    }
    Ok((f.v_to_a / da, f.a_to_v / dv))
}
