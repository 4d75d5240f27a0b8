//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Every primitive appends one node to the tape, so node order is a
//! topological order and a single reverse sweep yields all gradients.
//! Two-dimensional primitives view their inputs as `[rows, cols]` with
//! rank-1 tensors treated as one row.

use super::kernels::{self, ConvDims};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise (or, for softmax, row-wise) nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    /// Normalized over the last axis.
    Softmax,
}

pub const BATCH_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, row: Var },
    Scale(Var, f64),
    Act(Var, Activation),
    Softplus(Var),
    Exp(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    Transpose(Var),
    Reshape(Var),
    TileCols { x: Var, reps: usize },
    GatherRows { table: Var, ids: Vec<usize> },
    Conv1d { x: Var, w: Var, b: Var, dims: ConvDims },
    BatchNorm { x: Var, gamma: Var, beta: Var, stats: BatchStats, xhat: Vec<f64> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, inv_std: Vec<f64> },
    MaxPoolTime { x: Var, argmax: Vec<usize> },
    Sum(Var),
    WeightedSum { x: Var, weights: Vec<f64> },
    WeightedSqErr { a: Var, target: Var, row_weights: Vec<f64> },
    KlDiag { mu: Var, log_var: Var },
    Mixture(Box<MixtureSaved>),
}

/// Per-channel batch statistics computed by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    inv_std: Vec<f64>,
}

#[derive(Debug)]
struct MixtureSaved {
    pi: Var,
    kappa: Var,
    sigma: Var,
    emb: Var,
    lengths: Vec<usize>,
    /// `[B × L]` phoneme weights.
    weights: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Linear record of primitive applications.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to tracked leaves.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn raw(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

fn ensure(cond: bool, op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::shape(op, lhs, rhs))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; it is differentiated iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let tracked = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an untracked leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        let (m, n, p) = (ta.rows(), ta.cols(), tb.cols());
        ensure(ta.rank() == 2 && tb.rank() == 2 && tb.rows() == n, "matmul", ta.shape(), tb.shape())?;
        let mut out = vec![0.0; m * p];
        kernels::matmul_acc(ta.data(), tb.data(), &mut out, m, n, p);
        Ok(self.push(Tensor::from_parts(vec![m, p], out), Op::MatMul(a, b), &[a, b]))
    }

    /// `x · w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.val(x), self.val(w), self.val(b));
        let (m, n, p) = (tx.rows(), tx.cols(), tw.cols());
        ensure(tw.rank() == 2 && tw.rows() == n, "linear", tx.shape(), tw.shape())?;
        ensure(tb.numel() == p, "linear bias", tw.shape(), tb.shape())?;
        let mut out = Vec::with_capacity(m * p);
        for _ in 0..m {
            out.extend_from_slice(tb.data());
        }
        kernels::matmul_acc(tx.data(), tw.data(), &mut out, m, n, p);
        Ok(self.push(Tensor::from_parts(vec![m, p], out), Op::Linear { x, w, b }, &[x, w, b]))
    }

    fn zip_same(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.val(a), self.val(b));
        ensure(ta.shape() == tb.shape(), op, ta.shape(), tb.shape())?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.val(a), self.val(row));
        let cols = ta.cols();
        ensure(tr.numel() == cols, "add_row", ta.shape(), tr.shape())?;
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(cols) {
            for (d, &r) in chunk.iter_mut().zip(tr.data()) {
                *d += r;
            }
        }
        let shape = ta.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::AddRow { a, row }, &[a, row]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.val(a);
        let t = Tensor::from_parts(ta.shape().to_vec(), ta.data().iter().map(|v| v * c).collect());
        self.push(t, Op::Scale(a, c), &[a])
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let tx = self.val(x);
        let data = match kind {
            Activation::Relu => tx.data().iter().map(|&v| v.max(0.0)).collect(),
            Activation::Tanh => tx.data().iter().map(|v| v.tanh()).collect(),
            Activation::Sigmoid => tx.data().iter().map(|&v| kernels::sigmoid(v)).collect(),
            Activation::Softmax => {
                let cols = tx.cols();
                let mut out = vec![0.0; tx.numel()];
                for (src, dst) in tx.data().chunks(cols).zip(out.chunks_mut(cols)) {
                    kernels::softmax_row(src, dst);
                }
                out
            }
        };
        let t = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push(t, Op::Act(x, kind), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Softmax)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let tx = self.val(x);
        let t = Tensor::from_parts(tx.shape().to_vec(), tx.data().iter().map(|&v| kernels::softplus(v)).collect());
        self.push(t, Op::Softplus(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let tx = self.val(x);
        let t = Tensor::from_parts(tx.shape().to_vec(), tx.data().iter().map(|v| v.exp()).collect());
        self.push(t, Op::Exp(x), &[x])
    }

    /// Clamps into `[lo, hi]`; gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let tx = self.val(x);
        let t = Tensor::from_parts(tx.shape().to_vec(), tx.data().iter().map(|v| v.clamp(lo, hi)).collect());
        self.push(t, Op::Clamp { x, lo, hi }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat_cols of nothing"))?;
        let rows = self.val(*first).rows();
        let mut total = 0;
        for p in parts {
            let t = self.val(*p);
            ensure(t.rank() <= 2 && t.rows() == rows, "concat_cols", self.val(*first).shape(), t.shape())?;
            total += t.cols();
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.val(*p).row_slice(r));
            }
        }
        Ok(self.push(Tensor::from_parts(vec![rows, total], out), Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Columns `[start, end)` of a 2-D value.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.val(x);
        let (rows, cols) = (tx.rows(), tx.cols());
        ensure(start < end && end <= cols, "slice_cols", tx.shape(), &[start, end])?;
        let mut out = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            out.extend_from_slice(&tx.row_slice(r)[start..end]);
        }
        Ok(self.push(Tensor::from_parts(vec![rows, end - start], out), Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat_rows of nothing"))?;
        let cols = self.val(*first).cols();
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            let t = self.val(*p);
            ensure(t.rank() <= 2 && t.cols() == cols, "concat_rows", self.val(*first).shape(), t.shape())?;
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        Ok(self.push(Tensor::from_parts(vec![rows, cols], out), Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.val(x);
        let cols = tx.cols();
        ensure(start < end && end <= tx.rows(), "slice_rows", tx.shape(), &[start, end])?;
        let data = tx.data()[start * cols..end * cols].to_vec();
        let mut shape = vec![end - start];
        if tx.rank() >= 2 {
            shape.extend_from_slice(&tx.shape()[1..]);
        } else {
            shape.push(cols);
        }
        Ok(self.push(Tensor::from_parts(shape, data), Op::SliceRows { x, start }, &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.val(x);
        ensure(tx.rank() == 2, "transpose", tx.shape(), &[])?;
        let (m, n) = (tx.rows(), tx.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = tx.data()[i * n + j];
            }
        }
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.val(x).reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Repeats the columns of `x` `reps` times: `[m×n] → [m×(n·reps)]`.
    pub fn tile_cols(&mut self, x: Var, reps: usize) -> Result<Var> {
        let tx = self.val(x);
        ensure(reps >= 1, "tile_cols", tx.shape(), &[reps])?;
        let (rows, cols) = (tx.rows(), tx.cols());
        let mut out = Vec::with_capacity(rows * cols * reps);
        for r in 0..rows {
            for _ in 0..reps {
                out.extend_from_slice(tx.row_slice(r));
            }
        }
        Ok(self.push(Tensor::from_parts(vec![rows, cols * reps], out), Op::TileCols { x, reps }, &[x]))
    }

    /// Row lookup into a `[V×d]` table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.val(table);
        let (v, d) = (tt.rows(), tt.cols());
        if ids.is_empty() {
            return Err(Error::EmptySequence("gather_rows"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::invalid(format!("row id {bad} out of range for table with {v} rows")));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(tt.row_slice(i));
        }
        let t = Tensor::from_parts(vec![ids.len(), d], out);
        Ok(self.push(t, Op::GatherRows { table, ids: ids.to_vec() }, &[table]))
    }

    /// Strided cross-correlation of `x[C_in×L]` with `w[C_out×C_in×K]` plus bias.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (tx, tw, tb) = (self.val(x), self.val(w), self.val(b));
        ensure(tx.rank() == 2 && tw.rank() == 3, "conv1d", tx.shape(), tw.shape())?;
        let (c_out, c_in, kernel) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
        ensure(tx.rows() == c_in, "conv1d", tx.shape(), tw.shape())?;
        ensure(tb.numel() == c_out, "conv1d bias", tw.shape(), tb.shape())?;
        if stride == 0 {
            return Err(Error::invalid("conv1d stride must be positive"));
        }
        let len = tx.cols();
        if len + 2 * padding < kernel {
            return Err(Error::InputTooShort {
                what: "conv1d",
                len: len + 2 * padding,
                min: kernel,
            });
        }
        let out_len = (len + 2 * padding - kernel) / stride + 1;
        let dims = ConvDims {
            c_in,
            c_out,
            len,
            kernel,
            stride,
            padding,
            out_len,
        };
        let out = kernels::conv1d_forward(tx.data(), tw.data(), tb.data(), &dims);
        let t = Tensor::from_parts(vec![c_out, out_len], out);
        Ok(self.push(t, Op::Conv1d { x, w, b, dims }, &[x, w, b]))
    }

    /// Training-mode batch norm over `x[C×N]`: each row is a channel
    /// normalized with the mean and biased variance of its N entries.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.val(x), self.val(gamma), self.val(beta));
        let (c, n) = (tx.rows(), tx.cols());
        ensure(tg.numel() == c && tb.numel() == c, "batch_norm", tx.shape(), tg.shape())?;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        let mut inv_std = vec![0.0; c];
        let mut xhat = vec![0.0; c * n];
        let mut out = vec![0.0; c * n];
        for ch in 0..c {
            let row = tx.row_slice(ch);
            let m = row.iter().sum::<f64>() / n as f64;
            let v = row.iter().map(|&a| (a - m) * (a - m)).sum::<f64>() / n as f64;
            let is = 1.0 / (v + BATCH_NORM_EPS).sqrt();
            for j in 0..n {
                let h = (row[j] - m) * is;
                xhat[ch * n + j] = h;
                out[ch * n + j] = tg.data()[ch] * h + tb.data()[ch];
            }
            mean[ch] = m;
            var[ch] = v;
            inv_std[ch] = is;
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), out);
        let stats = BatchStats { mean, var, inv_std };
        Ok(self.push(t, Op::BatchNorm { x, gamma, beta, stats, xhat }, &[x, gamma, beta]))
    }

    /// Inference-mode batch norm with fixed running statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64]) -> Result<Var> {
        let (tx, tg, tb) = (self.val(x), self.val(gamma), self.val(beta));
        let (c, n) = (tx.rows(), tx.cols());
        ensure(
            tg.numel() == c && tb.numel() == c && mean.len() == c && var.len() == c,
            "batch_norm_eval",
            tx.shape(),
            tg.shape(),
        )?;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
        let mut out = vec![0.0; c * n];
        for ch in 0..c {
            for j in 0..n {
                out[ch * n + j] = tg.data()[ch] * (tx.data()[ch * n + j] - mean[ch]) * inv_std[ch] + tb.data()[ch];
            }
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), out);
        let op = Op::BatchNormEval {
            x,
            gamma,
            beta,
            mean: mean.to_vec(),
            inv_std,
        };
        Ok(self.push(t, op, &[x, gamma, beta]))
    }

    /// Statistics recorded by a training-mode [`Tape::batch_norm`] node.
    pub fn batch_stats(&self, v: Var) -> Option<&BatchStats> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { stats, .. } => Some(stats),
            _ => None,
        }
    }

    /// Per-channel maximum over time, `[C×L] → [C]`.
    pub fn max_pool_time(&mut self, x: Var) -> Result<Var> {
        let tx = self.val(x);
        if tx.numel() == 0 || tx.rank() != 2 {
            return Err(Error::EmptySequence("max_pool_time"));
        }
        let c = tx.rows();
        let mut out = vec![0.0; c];
        let mut argmax = vec![0; c];
        for ch in 0..c {
            let row = tx.row_slice(ch);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            argmax[ch] = best;
            out[ch] = row[best];
        }
        Ok(self.push(Tensor::from_parts(vec![c], out), Op::MaxPoolTime { x, argmax }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.val(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// `Σ_i w_i x_i` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let tx = self.val(x);
        ensure(tx.numel() == weights.len(), "weighted_sum", tx.shape(), &[weights.len()])?;
        let s = tx.data().iter().zip(weights).map(|(a, w)| a * w).sum();
        let op = Op::WeightedSum {
            x,
            weights: weights.to_vec(),
        };
        Ok(self.push(Tensor::scalar(s), op, &[x]))
    }

    /// `Σ_b w_b ‖a_b − t_b‖²` over the rows of two equal-shape values.
    pub fn weighted_sq_err(&mut self, a: Var, target: Var, row_weights: &[f64]) -> Result<Var> {
        let (ta, tt) = (self.val(a), self.val(target));
        ensure(ta.shape() == tt.shape(), "weighted_sq_err", ta.shape(), tt.shape())?;
        ensure(ta.rows() == row_weights.len(), "weighted_sq_err weights", ta.shape(), &[row_weights.len()])?;
        let cols = ta.cols();
        let mut s = 0.0;
        for (r, w) in row_weights.iter().enumerate() {
            let mut row = 0.0;
            for c in 0..cols {
                let d = ta.data()[r * cols + c] - tt.data()[r * cols + c];
                row += d * d;
            }
            s += w * row;
        }
        let op = Op::WeightedSqErr {
            a,
            target,
            row_weights: row_weights.to_vec(),
        };
        Ok(self.push(Tensor::scalar(s), op, &[a, target]))
    }

    /// Row-wise KL divergence of `N(mu, exp(log_var))` from `N(0, I)`: `[B×d] → [B]`.
    pub fn kl_diag_normal(&mut self, mu: Var, log_var: Var) -> Result<Var> {
        let (tm, tl) = (self.val(mu), self.val(log_var));
        ensure(tm.shape() == tl.shape(), "kl_diag_normal", tm.shape(), tl.shape())?;
        let (rows, cols) = (tm.rows(), tm.cols());
        let mut out = vec![0.0; rows];
        for (r, o) in out.iter_mut().enumerate() {
            for c in 0..cols {
                let (m, l) = (tm.data()[r * cols + c], tl.data()[r * cols + c]);
                *o += 0.5 * (m * m + l.exp() - 1.0 - l);
            }
        }
        Ok(self.push(Tensor::from_parts(vec![rows], out), Op::KlDiag { mu, log_var }, &[mu, log_var]))
    }

    /// Gaussian-mixture read over padded phoneme encodings.
    ///
    /// `pi`, `kappa`, `sigma` are `[B×K]`; `emb` is `[B×L×d]` with the first
    /// `lengths[b]` rows of sequence `b` valid. Phoneme `j` of sequence `b`
    /// receives weight `Σ_k pi·exp(−(kappa − j)² / (2·sigma²))` and the
    /// output is the weighted sum of encodings, `[B×d]`.
    pub fn mixture_read(&mut self, pi: Var, kappa: Var, sigma: Var, emb: Var, lengths: &[usize]) -> Result<Var> {
        let (tp, tk, ts, te) = (self.val(pi), self.val(kappa), self.val(sigma), self.val(emb));
        ensure(tp.shape() == tk.shape() && tp.shape() == ts.shape(), "mixture_read", tp.shape(), tk.shape())?;
        ensure(te.rank() == 3 && te.shape()[0] == tp.rows(), "mixture_read", tp.shape(), te.shape())?;
        let (b, k) = (tp.rows(), tp.cols());
        let (l, d) = (te.shape()[1], te.shape()[2]);
        ensure(lengths.len() == b, "mixture_read lengths", te.shape(), &[lengths.len()])?;
        if lengths.contains(&0) {
            return Err(Error::EmptySequence("mixture_read"));
        }
        ensure(lengths.iter().all(|&n| n <= l), "mixture_read lengths", te.shape(), lengths)?;
        let mut weights = vec![0.0; b * l];
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            for j in 0..lengths[bi] {
                let mut w = 0.0;
                for ki in 0..k {
                    let idx = bi * k + ki;
                    let r = tk.data()[idx] - j as f64;
                    let s = ts.data()[idx];
                    w += tp.data()[idx] * (-(r * r) / (2.0 * s * s)).exp();
                }
                weights[bi * l + j] = w;
                let e = &te.data()[(bi * l + j) * d..(bi * l + j + 1) * d];
                for (o, &ev) in out[bi * d..(bi + 1) * d].iter_mut().zip(e) {
                    *o += w * ev;
                }
            }
        }
        let saved = MixtureSaved {
            pi,
            kappa,
            sigma,
            emb,
            lengths: lengths.to_vec(),
            weights,
        };
        let t = Tensor::from_parts(vec![b, d], out);
        Ok(self.push(t, Op::Mixture(Box::new(saved)), &[pi, kappa, sigma, emb]))
    }

    /// Phoneme weights `[B×L]` saved by a [`Tape::mixture_read`] node.
    pub fn mixture_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Mixture(saved) => Some(&saved.weights),
            _ => None,
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.val(loss);
        if lv.numel() != 1 {
            return Err(Error::Rank {
                op: "backward",
                shape: lv.shape().to_vec(),
            });
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        // intermediate gradients were consumed above; only leaves remain
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (m, n, p) = (ta.rows(), ta.cols(), tb.cols());
                if self.tracked(*a) {
                    kernels::matmul_a_bt_acc(g, tb.data(), self.slot(grads, *a), m, n, p);
                }
                if self.tracked(*b) {
                    kernels::matmul_at_b_acc(ta.data(), g, self.slot(grads, *b), m, n, p);
                }
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.val(*x), self.val(*w));
                let (m, n, p) = (tx.rows(), tx.cols(), tw.cols());
                if self.tracked(*x) {
                    kernels::matmul_a_bt_acc(g, tw.data(), self.slot(grads, *x), m, n, p);
                }
                if self.tracked(*w) {
                    kernels::matmul_at_b_acc(tx.data(), g, self.slot(grads, *w), m, n, p);
                }
                if self.tracked(*b) {
                    let gb = self.slot(grads, *b);
                    for row in g.chunks(p) {
                        for (o, &v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |gi, i| gi + g[i]);
                self.acc(grads, *b, |gi, i| gi + g[i]);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |gi, i| gi + g[i]);
                self.acc(grads, *b, |gi, i| gi - g[i]);
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.val(*a).data(), self.val(*b).data());
                self.acc(grads, *a, |gi, i| gi + g[i] * db[i]);
                self.acc(grads, *b, |gi, i| gi + g[i] * da[i]);
            }
            Op::AddRow { a, row } => {
                self.acc(grads, *a, |gi, i| gi + g[i]);
                if self.tracked(*row) {
                    let cols = self.val(*row).numel();
                    let gr = self.slot(grads, *row);
                    for chunk in g.chunks(cols) {
                        for (o, &v) in gr.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Scale(a, c) => self.acc(grads, *a, |gi, i| gi + c * g[i]),
            Op::Act(x, kind) => match kind {
                Activation::Relu => self.acc(grads, *x, |gi, i| if y[i] > 0.0 { gi + g[i] } else { gi }),
                Activation::Tanh => self.acc(grads, *x, |gi, i| gi + g[i] * (1.0 - y[i] * y[i])),
                Activation::Sigmoid => self.acc(grads, *x, |gi, i| gi + g[i] * y[i] * (1.0 - y[i])),
                Activation::Softmax => {
                    if self.tracked(*x) {
                        let cols = node.value.cols();
                        let gx = self.slot(grads, *x);
                        for ((yr, gr), out) in y.chunks(cols).zip(g.chunks(cols)).zip(gx.chunks_mut(cols)) {
                            let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for c in 0..cols {
                                out[c] += yr[c] * (gr[c] - inner);
                            }
                        }
                    }
                }
            },
            Op::Softplus(x) => {
                let dx = self.val(*x).data();
                self.acc(grads, *x, |gi, i| gi + g[i] * kernels::sigmoid(dx[i]));
            }
            Op::Exp(x) => self.acc(grads, *x, |gi, i| gi + g[i] * y[i]),
            Op::Clamp { x, lo, hi } => {
                let dx = self.val(*x).data();
                self.acc(grads, *x, |gi, i| if dx[i] >= *lo && dx[i] <= *hi { gi + g[i] } else { gi });
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let w = self.val(*p).cols();
                    if self.tracked(*p) {
                        let gp = self.slot(grads, *p);
                        for r in 0..rows {
                            for c in 0..w {
                                gp[r * w + c] += g[r * total + offset + c];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                if self.tracked(*x) {
                    let cols = self.val(*x).cols();
                    let w = node.value.cols();
                    let gx = self.slot(grads, *x);
                    for (r, chunk) in g.chunks(w).enumerate() {
                        for (c, &v) in chunk.iter().enumerate() {
                            gx[r * cols + start + c] += v;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.val(*p).numel();
                    let src = &g[offset..offset + len];
                    self.acc(grads, *p, |gi, i| gi + src[i]);
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                if self.tracked(*x) {
                    let off = start * self.val(*x).cols();
                    let gx = self.slot(grads, *x);
                    for (o, &v) in gx[off..off + g.len()].iter_mut().zip(g) {
                        *o += v;
                    }
                }
            }
            Op::Transpose(x) => {
                if self.tracked(*x) {
                    let (m, n) = (self.val(*x).rows(), self.val(*x).cols());
                    let gx = self.slot(grads, *x);
                    for i in 0..m {
                        for j in 0..n {
                            gx[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Reshape(x) => self.acc(grads, *x, |gi, i| gi + g[i]),
            Op::TileCols { x, reps } => {
                if self.tracked(*x) {
                    let cols = self.val(*x).cols();
                    let gx = self.slot(grads, *x);
                    for (r, chunk) in g.chunks(cols * reps).enumerate() {
                        for block in chunk.chunks(cols) {
                            for (c, &v) in block.iter().enumerate() {
                                gx[r * cols + c] += v;
                            }
                        }
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                if self.tracked(*table) {
                    let d = self.val(*table).cols();
                    let gt = self.slot(grads, *table);
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            gt[id * d + c] += g[r * d + c];
                        }
                    }
                }
            }
            Op::Conv1d { x, w, b, dims } => {
                let (tx, tw) = (self.val(*x), self.val(*w));
                let mut gx = self.tracked(*x).then(|| vec![0.0; tx.numel()]);
                let mut gw = self.tracked(*w).then(|| vec![0.0; tw.numel()]);
                let mut gb = self.tracked(*b).then(|| vec![0.0; dims.c_out]);
                kernels::conv1d_backward(
                    tx.data(),
                    tw.data(),
                    g,
                    dims,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                for (v, part) in [(*x, gx), (*w, gw), (*b, gb)] {
                    if let Some(part) = part {
                        self.acc(grads, v, |gi, i| gi + part[i]);
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                stats,
                xhat,
            } => {
                let (c, n) = (node.value.rows(), node.value.cols());
                let tg = self.val(*gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for ch in 0..c {
                    for j in 0..n {
                        sum_g[ch] += g[ch * n + j];
                        sum_gx[ch] += g[ch * n + j] * xhat[ch * n + j];
                    }
                }
                self.acc(grads, *gamma, |gi, i| gi + sum_gx[i]);
                self.acc(grads, *beta, |gi, i| gi + sum_g[i]);
                if self.tracked(*x) {
                    let gx = self.slot(grads, *x);
                    let nf = n as f64;
                    for ch in 0..c {
                        // dxhat = g·gamma; sums scale by gamma as well
                        let k = tg[ch] * stats.inv_std[ch] / nf;
                        for j in 0..n {
                            let idx = ch * n + j;
                            gx[idx] += k * (nf * g[idx] - sum_g[ch] - xhat[idx] * sum_gx[ch]);
                        }
                    }
                }
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let (c, n) = (node.value.rows(), node.value.cols());
                let tx = self.val(*x).data();
                let tg = self.val(*gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for ch in 0..c {
                    for j in 0..n {
                        let idx = ch * n + j;
                        sum_g[ch] += g[idx];
                        sum_gx[ch] += g[idx] * (tx[idx] - mean[ch]) * inv_std[ch];
                    }
                }
                self.acc(grads, *gamma, |gi, i| gi + sum_gx[i]);
                self.acc(grads, *beta, |gi, i| gi + sum_g[i]);
                self.acc(grads, *x, |gi, i| gi + g[i] * tg[i / n] * inv_std[i / n]);
            }
            Op::MaxPoolTime { x, argmax } => {
                if self.tracked(*x) {
                    let len = self.val(*x).cols();
                    let gx = self.slot(grads, *x);
                    for (ch, &j) in argmax.iter().enumerate() {
                        gx[ch * len + j] += g[ch];
                    }
                }
            }
            Op::Sum(x) => self.acc(grads, *x, |gi, _| gi + g[0]),
            Op::WeightedSum { x, weights } => self.acc(grads, *x, |gi, i| gi + g[0] * weights[i]),
            Op::WeightedSqErr { a, target, row_weights } => {
                let (ta, tt) = (self.val(*a).data(), self.val(*target).data());
                let cols = self.val(*a).cols();
                self.acc(grads, *a, |gi, i| gi + 2.0 * g[0] * row_weights[i / cols] * (ta[i] - tt[i]));
                self.acc(grads, *target, |gi, i| gi - 2.0 * g[0] * row_weights[i / cols] * (ta[i] - tt[i]));
            }
            Op::KlDiag { mu, log_var } => {
                let (tm, tl) = (self.val(*mu).data(), self.val(*log_var).data());
                let cols = self.val(*mu).cols();
                self.acc(grads, *mu, |gi, i| gi + g[i / cols] * tm[i]);
                self.acc(grads, *log_var, |gi, i| gi + g[i / cols] * 0.5 * (tl[i].exp() - 1.0));
            }
            Op::Mixture(saved) => self.backprop_mixture(saved, g, grads),
        }
    }

    fn backprop_mixture(&self, s: &MixtureSaved, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (tp, tk, ts, te) = (self.val(s.pi), self.val(s.kappa), self.val(s.sigma), self.val(s.emb));
        let (b, k) = (tp.rows(), tp.cols());
        let (l, d) = (te.shape()[1], te.shape()[2]);
        let mut gp = vec![0.0; b * k];
        let mut gk = vec![0.0; b * k];
        let mut gs = vec![0.0; b * k];
        let emb_tracked = self.tracked(s.emb);
        let mut ge = if emb_tracked { vec![0.0; te.numel()] } else { Vec::new() };
        for bi in 0..b {
            let gc = &g[bi * d..(bi + 1) * d];
            for j in 0..s.lengths[bi] {
                let base = (bi * l + j) * d;
                let e = &te.data()[base..base + d];
                let gw = kernels::dot(gc, e);
                if emb_tracked {
                    let w = s.weights[bi * l + j];
                    for (o, &gv) in ge[base..base + d].iter_mut().zip(gc) {
                        *o += w * gv;
                    }
                }
                if gw == 0.0 {
                    continue;
                }
                for ki in 0..k {
                    let idx = bi * k + ki;
                    let r = tk.data()[idx] - j as f64;
                    let sg = ts.data()[idx];
                    let ex = (-(r * r) / (2.0 * sg * sg)).exp();
                    let pe = tp.data()[idx] * ex;
                    gp[idx] += gw * ex;
                    gk[idx] -= gw * pe * r / (sg * sg);
                    gs[idx] += gw * pe * r * r / (sg * sg * sg);
                }
            }
        }
        for (v, part) in [(s.pi, gp), (s.kappa, gk), (s.sigma, gs)] {
            self.acc(grads, v, |gi, i| gi + part[i]);
        }
        if emb_tracked {
            self.acc(grads, s.emb, |gi, i| gi + ge[i]);
        }
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut [f64] {
        let n = self.nodes[v.0].value.numel();
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    /// Updates every element of `v`'s gradient as `f(current, index)`.
    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl Fn(f64, usize) -> f64) {
        if !self.tracked(v) {
            return;
        }
        let slot = self.slot(grads, v);
        for (i, gi) in slot.iter_mut().enumerate() {
            *gi = f(*gi, i);
        }
    }
}
