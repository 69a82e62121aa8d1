use std::cell::Cell;
use std::collections::HashMap;

use rand::Rng;

use super::kernels::{dot, gemm_nn, gemm_nt, gemm_tn, sigmoid};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

thread_local! {
    static SCORE_MADDS: Cell<u64> = const { Cell::new(0) };
}

/// Multiply-adds spent on attention score products (`q·kᵀ`) on this thread.
pub fn attention_score_madds() -> u64 {
    SCORE_MADDS.with(Cell::get)
}

pub fn reset_attention_score_madds() {
    SCORE_MADDS.with(|c| c.set(0));
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Swish(Var),
    Gelu(Var),
    Glu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    DepthwiseConv {
        x: Var,
        kernel: Var,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Mean(Vec<Var>),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    /// Scalar losses whose input gradient is computed during the forward pass.
    PrecomputedGrad {
        input: Var,
        dinput: Vec<f64>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Reverse-mode autodiff tape. Operations append nodes; [`Tape::backward`]
/// walks them in exact reverse order of recording.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
    track_params: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            bound: HashMap::new(),
            track_params: true,
        }
    }

    /// A tape whose bound parameters do not require gradients.
    pub fn inference() -> Self {
        Tape {
            track_params: false,
            ..Tape::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let value = Tensor::new(shape, data)
            .expect("op produced inconsistent shape")
            .with_requires_grad(requires_grad);
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        let (shape, data) = (t.shape().to_vec(), t.into_data());
        self.push(shape, data, Op::Leaf, rg)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.leaf(t))
    }

    /// Bind a stored parameter as a leaf. Binding the same id twice returns
    /// the same node, so gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let t = store.get(id).clone().with_requires_grad(self.track_params);
        let v = self.leaf(t);
        self.bound.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.data(v)[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    /// Accumulated gradients of every bound parameter.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.bound
            .iter()
            .filter_map(|(&id, &v)| self.grad(v).map(|g| (id, g)))
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.data(a), self.data(b), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` for `a[m×k]`, `b[n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_nt",
                lhs: vec![m, k],
                rhs: vec![n, k2],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(self.data(a), self.data(b), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMulNT(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg))
    }

    /// Row-broadcast add of a length-`C` bias onto an `R×C` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "add_bias")?;
        if self.shape(bias) != [c] {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: vec![r, c],
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.data(bias);
        let out = self
            .data(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(v, bv)| v + bv))
            .collect();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(vec![r, c], out, Op::AddBias(x, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.data(x).iter().map(|v| v * s).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, s), rg)
    }

    pub fn swish(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|&v| v * sigmoid(v)).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Swish(x), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self
            .data(x)
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()))
            .collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x), rg)
    }

    /// Gated linear unit over the column axis: `[a | b] -> a ⊙ σ(b)`.
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let (r, c2) = self.dims2(x, "glu")?;
        if c2 % 2 != 0 {
            return Err(Error::Shape {
                op: "glu",
                lhs: vec![r, c2],
                rhs: vec![],
            });
        }
        let c = c2 / 2;
        let out = self
            .data(x)
            .chunks(c2)
            .flat_map(|row| {
                let (a, b) = row.split_at(c);
                a.iter().zip(b).map(|(av, bv)| av * sigmoid(*bv))
            })
            .collect();
        let rg = self.rg(x);
        Ok(self.push(vec![r, c], out, Op::Glu(x), rg))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.softmax_rows_masked(x, None)
    }

    /// Row softmax; `mask[i*C + j] == true` removes column `j` from row `i`.
    /// Masked entries come out as exact zeros.
    pub fn softmax_rows_masked(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (r, c) = self.dims2(x, "softmax_rows")?;
        if let Some(m) = mask {
            if m.len() != r * c {
                return Err(Error::Shape {
                    op: "softmax_rows",
                    lhs: vec![r, c],
                    rhs: vec![m.len()],
                });
            }
        }
        let src = self.data(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let visible = |j: usize| mask.is_none_or(|m| !m[i * c + j]);
            let mx = (0..c)
                .filter(|&j| visible(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                return Err(Error::DegenerateMask { row: i });
            }
            let dst = &mut out[i * c..(i + 1) * c];
            let mut z = 0.0;
            for j in 0..c {
                if visible(j) {
                    dst[j] = (row[j] - mx).exp();
                    z += dst[j];
                }
            }
            dst.iter_mut().for_each(|v| *v /= z);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![r, c], out, Op::Softmax(x), rg))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "log_softmax_rows")?;
        let out = self
            .data(x)
            .chunks(c)
            .flat_map(|row| {
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                row.iter().map(move |v| v - lse)
            })
            .collect();
        let rg = self.rg(x);
        Ok(self.push(vec![r, c], out, Op::LogSoftmax(x), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (t, d) = self.dims2(x, "layer_norm")?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: vec![t, d],
                rhs: self.shape(gain).to_vec(),
            });
        }
        let (g, b) = (self.data(gain), self.data(bias));
        let mut xhat = vec![0.0; t * d];
        let mut rstd = vec![0.0; t];
        let mut out = vec![0.0; t * d];
        for (i, row) in self.data(x).chunks(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            vec![t, d],
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Per-channel 1-D convolution along the row (time) axis with zero
    /// "same" padding. `kernel` is `K×D` with `K` odd.
    pub fn depthwise_conv1d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (t, d) = self.dims2(x, "depthwise_conv1d")?;
        let (k, d2) = self.dims2(kernel, "depthwise_conv1d")?;
        if d != d2 {
            return Err(Error::Shape {
                op: "depthwise_conv1d",
                lhs: vec![t, d],
                rhs: vec![k, d2],
            });
        }
        if k % 2 == 0 {
            return Err(Error::Config(format!("convolution kernel size must be odd, got {k}")));
        }
        let half = k / 2;
        let (xs, ws) = (self.data(x), self.data(kernel));
        let mut out = vec![0.0; t * d];
        for ti in 0..t {
            let dst = &mut out[ti * d..(ti + 1) * d];
            for ki in 0..k {
                let src_t = ti as isize + ki as isize - half as isize;
                if src_t < 0 || src_t >= t as isize {
                    continue;
                }
                let src = &xs[src_t as usize * d..(src_t as usize + 1) * d];
                let w = &ws[ki * d..(ki + 1) * d];
                for c in 0..d {
                    dst[c] += src[c] * w[c];
                }
            }
        }
        let rg = self.rg(x) || self.rg(kernel);
        Ok(self.push(vec![t, d], out, Op::DepthwiseConv { x, kernel }, rg))
    }

    /// Stack along the frame (row) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Usage("concat_rows of nothing".into()));
        };
        let (_, c) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c2) = self.dims2(p, "concat_rows")?;
            if c2 != c {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: vec![rows, c],
                    rhs: vec![r, c2],
                });
            }
            rows += r;
            out.extend_from_slice(self.data(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![rows, c], out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice_rows")?;
        if start + len > r {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: vec![r, c],
                rhs: vec![start, len],
            });
        }
        let out = self.data(x)[start * c..(start + len) * c].to_vec();
        let rg = self.rg(x);
        Ok(self.push(vec![len, c], out, Op::SliceRows { x, start }, rg))
    }

    /// Split along the frame axis at `at`.
    pub fn split_rows(&mut self, x: Var, at: usize) -> Result<(Var, Var)> {
        let r = self.dims2(x, "split_rows")?.0;
        if at > r {
            return Err(Error::Shape {
                op: "split_rows",
                lhs: self.shape(x).to_vec(),
                rhs: vec![at],
            });
        }
        Ok((self.slice_rows(x, 0, at)?, self.slice_rows(x, at, r - at)?))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Usage("concat_cols of nothing".into()));
        };
        let (r, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r2, c) = self.dims2(p, "concat_cols")?;
            if r2 != r {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: vec![r, 0],
                    rhs: vec![r2, c],
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![r, total], out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice_cols")?;
        if start + len > c {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: vec![r, c],
                rhs: vec![start, len],
            });
        }
        let out = self
            .data(x)
            .chunks(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let rg = self.rg(x);
        Ok(self.push(vec![r, len], out, Op::SliceCols { x, start }, rg))
    }

    /// Elementwise mean of same-shaped tensors.
    pub fn mean_of(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Usage("mean of an empty set".into()));
        };
        for &p in &parts[1..] {
            self.same_shape(first, p, "mean_of")?;
        }
        let n = parts.len() as f64;
        let mut out = self.data(first).to_vec();
        for &p in &parts[1..] {
            out.iter_mut().zip(self.data(p)).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= n);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(self.shape(first).to_vec(), out, Op::Mean(parts.to_vec()), rg))
    }

    /// Inverted dropout. `p == 0` records nothing and returns `x`.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let rg = self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Dropout { x, mask }, rg))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table, "embedding")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Usage(format!("token id {bad} outside table of {v} rows")));
        }
        let t = self.data(table);
        let out = ids
            .iter()
            .flat_map(|&i| t[i * d..(i + 1) * d].iter().copied())
            .collect();
        let rg = self.rg(table);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Summed cross-entropy of `logits[T×C]` against `targets`, with the
    /// target distribution `(1-ε)·onehot + ε/C`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], smoothing: f64) -> Result<Var> {
        let (t, c) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != t {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: vec![t, c],
                rhs: vec![targets.len()],
            });
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::Config(format!("label smoothing {smoothing} outside [0, 1)")));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= c) {
            return Err(Error::Usage(format!("target class {bad} outside {c} classes")));
        }
        let mut loss = 0.0;
        let mut dlogits = vec![0.0; t * c];
        let off = smoothing / c as f64;
        for (i, row) in self.data(logits).chunks(c).enumerate() {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for j in 0..c {
                let q = off + if j == targets[i] { 1.0 - smoothing } else { 0.0 };
                let logp = row[j] - lse;
                if q > 0.0 {
                    loss -= q * logp;
                }
                dlogits[i * c + j] = logp.exp() - q;
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            vec![],
            vec![loss],
            Op::PrecomputedGrad {
                input: logits,
                dinput: dlogits,
            },
            rg,
        ))
    }

    /// Record a scalar computed outside the tape together with its gradient
    /// with respect to `input`.
    pub(crate) fn scalar_with_grad(&mut self, input: Var, value: f64, dinput: Vec<f64>) -> Var {
        debug_assert_eq!(dinput.len(), self.value(input).numel());
        let rg = self.rg(input);
        self.push(vec![], vec![value], Op::PrecomputedGrad { input, dinput }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![], vec![s], Op::Sum(x), rg)
    }

    /// `softmax(q·kᵀ/√d)·v`, returning both the output and the weights.
    /// `mask[i*T_k + j] == true` hides key `j` from query `i`.
    pub fn scaled_dot_attention(&mut self, q: Var, k: Var, v: Var, mask: Option<&[bool]>) -> Result<(Var, Var)> {
        let (tq, d) = self.dims2(q, "scaled_dot_attention")?;
        let (tk, dk) = self.dims2(k, "scaled_dot_attention")?;
        let (tv, _) = self.dims2(v, "scaled_dot_attention")?;
        if d != dk || tk != tv {
            return Err(Error::Shape {
                op: "scaled_dot_attention",
                lhs: vec![tq, d],
                rhs: vec![tk, dk],
            });
        }
        let scores = self.matmul_nt(q, k)?;
        SCORE_MADDS.with(|c| c.set(c.get() + (tq * tk * d) as u64));
        let scaled = self.scale(scores, 1.0 / (d as f64).sqrt());
        let weights = self.softmax_rows_masked(scaled, mask)?;
        let out = self.matmul(weights, v)?;
        Ok((out, weights))
    }

    /// Populate gradients of `loss` for every `requires_grad` leaf. Leaf
    /// gradients accumulate across calls until [`Tape::zero_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].value.requires_grad() {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                self.nodes[idx].value.accumulate_grad(&g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        macro_rules! with_grad {
            ($v:expr, |$d:ident| $body:block) => {
                if let Some($d) = grad_slot(nodes, grads, $v) $body
            };
        }
        let out = &nodes[idx].value;
        let data = |v: Var| nodes[v.0].value.data();
        let dims = |v: Var| {
            let s = nodes[v.0].value.shape();
            (s[0], s[1])
        };
        match &nodes[idx].op {
            Op::Leaf => unreachable!(),
            Op::MatMul(a, b) => {
                let (m, k) = dims(*a);
                let n = dims(*b).1;
                with_grad!(*a, |da| { gemm_nt(g, data(*b), da, m, n, k); });
                with_grad!(*b, |db| { gemm_tn(data(*a), g, db, m, k, n); });
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = dims(*a);
                let n = dims(*b).0;
                with_grad!(*a, |da| { gemm_nn(g, data(*b), da, m, n, k); });
                with_grad!(*b, |db| { gemm_tn(g, data(*a), db, m, n, k); });
            }
            Op::Add(a, b) => {
                with_grad!(*a, |da| { add_into(da, g); });
                with_grad!(*b, |db| { add_into(db, g); });
            }
            Op::AddBias(x, b) => {
                with_grad!(*x, |dx| { add_into(dx, g); });
                with_grad!(*b, |db| {
                    let c = db.len();
                    for row in g.chunks(c) {
                        add_into(db, row);
                    }
                });
            }
            Op::Mul(a, b) => {
                with_grad!(*a, |da| {
                    for ((d, gv), bv) in da.iter_mut().zip(g).zip(data(*b)) {
                        *d += gv * bv;
                    }
                });
                with_grad!(*b, |db| {
                    for ((d, gv), av) in db.iter_mut().zip(g).zip(data(*a)) {
                        *d += gv * av;
                    }
                });
            }
            Op::Scale(x, s) => {
                with_grad!(*x, |dx| {
                    for (d, gv) in dx.iter_mut().zip(g) {
                        *d += s * gv;
                    }
                });
            }
            Op::Swish(x) => {
                with_grad!(*x, |dx| {
                    for ((d, gv), &xv) in dx.iter_mut().zip(g).zip(data(*x)) {
                        let s = sigmoid(xv);
                        *d += gv * (s + xv * s * (1.0 - s));
                    }
                });
            }
            Op::Gelu(x) => {
                with_grad!(*x, |dx| {
                    for ((d, gv), &xv) in dx.iter_mut().zip(g).zip(data(*x)) {
                        let u = GELU_C * (xv + 0.044715 * xv * xv * xv);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * xv * xv);
                        *d += gv * (0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * du);
                    }
                });
            }
            Op::Glu(x) => {
                let c = out.shape()[1];
                with_grad!(*x, |dx| {
                    for ((drow, xrow), grow) in dx.chunks_mut(2 * c).zip(data(*x).chunks(2 * c)).zip(g.chunks(c)) {
                        for j in 0..c {
                            let (a, b) = (xrow[j], xrow[c + j]);
                            let s = sigmoid(b);
                            drow[j] += grow[j] * s;
                            drow[c + j] += grow[j] * a * s * (1.0 - s);
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let c = out.shape()[1];
                with_grad!(*x, |dx| {
                    for ((drow, yrow), grow) in dx.chunks_mut(c).zip(out.data().chunks(c)).zip(g.chunks(c)) {
                        let s = dot(grow, yrow);
                        for j in 0..c {
                            drow[j] += yrow[j] * (grow[j] - s);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let c = out.shape()[1];
                with_grad!(*x, |dx| {
                    for ((drow, yrow), grow) in dx.chunks_mut(c).zip(out.data().chunks(c)).zip(g.chunks(c)) {
                        let s: f64 = grow.iter().sum();
                        for j in 0..c {
                            drow[j] += grow[j] - yrow[j].exp() * s;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = out.shape()[1];
                let gv = data(*gain);
                with_grad!(*gain, |dg| {
                    for (hrow, grow) in xhat.chunks(d).zip(g.chunks(d)) {
                        for j in 0..d {
                            dg[j] += grow[j] * hrow[j];
                        }
                    }
                });
                with_grad!(*bias, |db| {
                    for grow in g.chunks(d) {
                        add_into(db, grow);
                    }
                });
                with_grad!(*x, |dx| {
                    let mut dh = vec![0.0; d];
                    for (i, ((drow, hrow), grow)) in
                        dx.chunks_mut(d).zip(xhat.chunks(d)).zip(g.chunks(d)).enumerate()
                    {
                        for j in 0..d {
                            dh[j] = grow[j] * gv[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = dot(&dh, hrow) / d as f64;
                        for j in 0..d {
                            drow[j] += rstd[i] * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                });
            }
            Op::DepthwiseConv { x, kernel } => {
                let (t, d) = dims(*x);
                let k = dims(*kernel).0;
                let half = k / 2;
                let (xs, ws) = (data(*x), data(*kernel));
                let taps = |ti: usize, ki: usize| -> Option<usize> {
                    let s = ti as isize + ki as isize - half as isize;
                    (s >= 0 && s < t as isize).then_some(s as usize)
                };
                with_grad!(*x, |dx| {
                    for ti in 0..t {
                        for ki in 0..k {
                            if let Some(s) = taps(ti, ki) {
                                for c in 0..d {
                                    dx[s * d + c] += g[ti * d + c] * ws[ki * d + c];
                                }
                            }
                        }
                    }
                });
                with_grad!(*kernel, |dw| {
                    for ti in 0..t {
                        for ki in 0..k {
                            if let Some(s) = taps(ti, ki) {
                                for c in 0..d {
                                    dw[ki * d + c] += g[ti * d + c] * xs[s * d + c];
                                }
                            }
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = nodes[p.0].value.numel();
                    with_grad!(p, |dp| { add_into(dp, &g[off..off + n]); });
                    off += n;
                }
            }
            Op::SliceRows { x, start } => {
                let c = dims(*x).1;
                with_grad!(*x, |dx| { add_into(&mut dx[start * c..start * c + g.len()], g); });
            }
            Op::ConcatCols(parts) => {
                let total = out.shape()[1];
                let mut off = 0;
                for &p in parts {
                    let w = dims(p).1;
                    with_grad!(p, |dp| {
                        for (drow, grow) in dp.chunks_mut(w).zip(g.chunks(total)) {
                            add_into(drow, &grow[off..off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::SliceCols { x, start } => {
                let c = dims(*x).1;
                let w = out.shape()[1];
                with_grad!(*x, |dx| {
                    for (drow, grow) in dx.chunks_mut(c).zip(g.chunks(w)) {
                        add_into(&mut drow[*start..start + w], grow);
                    }
                });
            }
            Op::Mean(parts) => {
                let inv = 1.0 / parts.len() as f64;
                for &p in parts {
                    with_grad!(p, |dp| {
                        for (d, gv) in dp.iter_mut().zip(g) {
                            *d += gv * inv;
                        }
                    });
                }
            }
            Op::Dropout { x, mask } => {
                with_grad!(*x, |dx| {
                    for ((d, gv), m) in dx.iter_mut().zip(g).zip(mask) {
                        *d += gv * m;
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = dims(*table).1;
                with_grad!(*table, |dt| {
                    for (row, &id) in g.chunks(d).zip(ids) {
                        add_into(&mut dt[id * d..(id + 1) * d], row);
                    }
                });
            }
            Op::PrecomputedGrad { input, dinput } => {
                let s = g[0];
                with_grad!(*input, |di| {
                    for (d, v) in di.iter_mut().zip(dinput) {
                        *d += s * v;
                    }
                });
            }
            Op::Sum(x) => {
                let s = g[0];
                with_grad!(*x, |dx| { dx.iter_mut().for_each(|d| *d += s); });
            }
        }
    }
}

fn grad_slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let value = &nodes[v.0].value;
    if !value.requires_grad() {
        return None;
    }
    let n = value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
