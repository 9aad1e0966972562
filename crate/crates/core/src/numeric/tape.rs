//! Reverse-mode differentiation over a linear record of dense ops.
//!
//! Every op appends one node whose inputs are earlier nodes, so the node list
//! is already in topological order and backward is a single reverse sweep.

use std::collections::HashMap;

use crate::error::{Error, Result};

use super::mask::Mask;
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

/// Additive pre-softmax penalty applied at masked attention slots.
pub const MASK_PENALTY: f64 = -1e9;
/// Largest post-softmax weight tolerated at a masked slot.
pub const MASKED_WEIGHT_LIMIT: f64 = 1e-12;
/// Probabilities below this are clamped before taking a log.
pub const LOG_CLAMP: f64 = 1e-300;

// f64::max would turn a NaN probability into the floor.
fn floor_keep_nan(p: f64) -> f64 {
    if p < LOG_CLAMP {
        LOG_CLAMP
    } else {
        p
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    OneMinus(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { src: Var, start: usize },
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding { table: Var, ids: Vec<usize> },
    Mean(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    CrossEntropy { probs: Var, targets: Vec<usize> },
    SquaredError { pred: Var, targets: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Hadamard(..) => "hadamard",
            Op::Scale(..) => "scale",
            Op::OneMinus(_) => "one_minus",
            Op::ConcatRows(_) => "concat_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Gelu(_) => "gelu",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding { .. } => "embedding",
            Op::Mean(_) => "mean",
            Op::Attention { .. } => "attention",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::SquaredError { .. } => "squared_error",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Constant | Op::Param(_) => vec![],
            Op::MatMul(a, b)
            | Op::MatMulT(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Hadamard(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::OneMinus(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Gelu(a)
            | Op::Softmax(a)
            | Op::Mean(a) => vec![*a],
            Op::ConcatRows(vs) | Op::ConcatCols(vs) => vs.clone(),
            Op::SliceRows { src, .. } => vec![*src],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Embedding { table, .. } => vec![*table],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::CrossEntropy { probs, .. } => vec![*probs],
            Op::SquaredError { pred, .. } => vec![*pred],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Per-parameter gradients produced by [`Tape::backward`].
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    entries: Vec<(ParamId, Vec<f64>)>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.entries
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.entries.iter().map(|(p, g)| (*p, g.as_slice()))
    }

    /// Adds every gradient into the matching tensor's grad buffer.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (id, g) in &self.entries {
            store.get_mut(*id).accumulate_grad(g);
        }
    }
}

/// Record of executed ops. Forward ops evaluate eagerly; [`Tape::backward`]
/// replays the record in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    clamped_logs: usize,
}

fn shape_err(op: &str, detail: String) -> Error {
    Error::Dimension(format!("{op}: {detail}"))
}

/// `c (+)= op(a) · op(b)` where `a` is logically `m×k` and `b` is `k×n`.
/// `a_t`/`b_t` mean the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|x| *x = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths are checked by the callers against m, k, n and the
    // strides above address exactly those extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax, written into `out`.
pub(crate) fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Op name of a node, for inspection.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    /// Number of cross-entropy terms whose probability hit the log clamp.
    pub fn clamped_logs(&self) -> usize {
        self.clamped_logs
    }

    /// Per-head attention weights recorded by an attention node, laid out
    /// `[head][query][key]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::matrix(rows, cols, data).expect("op output shape is consistent")
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let t = Self::mat(t.rows(), t.cols(), t.into_data());
        self.push(t, Op::Constant)
    }

    /// Registers a parameter as a leaf. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let src = store.get(id);
        let t = Self::mat(src.rows(), src.cols(), src.data().to_vec());
        let v = self.push(t, Op::Param(id));
        self.params.insert(id, v);
        v
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(shape_err("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, false);
        Ok(self.push(Self::mat(m, n, out), Op::MatMul(a, b)))
    }

    /// `a[m×k] · b[n×k]ᵀ`; the usual linear map `x · Wᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(shape_err("matmul_t", format!("{m}x{k} · ({n}x{k2})ᵀ")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), true, &mut out, false);
        Ok(self.push(Self::mat(m, n, out), Op::MatMulT(a, b)))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(shape_err(op, format!("{da:?} vs {db:?}")));
        }
        Ok(da)
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (r, c) = self.same_shape(op.name(), a, b)?;
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.push(Self::mat(r, c, out), op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Hadamard(a, b), |x, y| x * y)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let (r, c) = self.dims(a);
        let out = self.data(a).iter().map(|&x| f(x)).collect();
        self.push(Self::mat(r, c, out), op)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |x| c * x)
    }

    /// `1 - a` elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        self.map(a, Op::OneMinus(a), |x| 1.0 - x)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    /// Tanh-approximated GELU, the feed-forward activation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, Op::Gelu(a), gelu)
    }

    /// Stacks inputs vertically; all must share a column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = match parts.first() {
            Some(&p) => self.dims(p).1,
            None => return Err(shape_err("concat_rows", "no inputs".into())),
        };
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != cols {
                return Err(shape_err("concat_rows", format!("{c} cols vs {cols}")));
            }
            rows += r;
            out.extend_from_slice(self.data(p));
        }
        Ok(self.push(Self::mat(rows, cols, out), Op::ConcatRows(parts.to_vec())))
    }

    /// Joins inputs side by side; all must share a row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(&p) => self.dims(p).0,
            None => return Err(shape_err("concat_cols", "no inputs".into())),
        };
        if let Some(&p) = parts.iter().find(|&&p| self.dims(p).0 != rows) {
            return Err(shape_err(
                "concat_cols",
                format!("{} rows vs {rows}", self.dims(p).0),
            ));
        }
        let cols: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let c = self.dims(p).1;
                out.extend_from_slice(&self.data(p)[r * c..(r + 1) * c]);
            }
        }
        Ok(self.push(Self::mat(rows, cols, out), Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(src);
        if start + len > r {
            return Err(Error::Index(format!(
                "rows {start}..{} of a {r}-row tensor",
                start + len
            )));
        }
        let out = self.data(src)[start * c..(start + len) * c].to_vec();
        Ok(self.push(Self::mat(len, c, out), Op::SliceRows { src, start }))
    }

    pub fn row(&mut self, src: Var, i: usize) -> Result<Var> {
        self.slice_rows(src, i, 1)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let mut out = vec![0.0; r * c];
        for (src, dst) in self.data(a).chunks(c.max(1)).zip(out.chunks_mut(c.max(1))) {
            softmax_row(src, dst);
        }
        self.push(Self::mat(r, c, out), Op::Softmax(a))
    }

    /// Row-wise layer normalization with gain `gamma` and offset `beta` (both `1×d`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, d) = self.dims(x);
        if self.dims(gamma) != (1, d) || self.dims(beta) != (1, d) {
            return Err(shape_err(
                "layer_norm",
                format!("gain/offset must be 1x{d}"),
            ));
        }
        let xs = self.data(x);
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut xhat = vec![0.0; r * d];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * d];
        for i in 0..r {
            let row = &xs[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[i] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        Ok(self.push(
            Self::mat(r, d, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Gathers rows `ids` of `table`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (n, d) = self.dims(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::Vocab {
                id: bad,
                vocab_size: n,
            });
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            Self::mat(ids.len(), d, out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Mean of all elements, as a `1×1` scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let data = self.data(a);
        if data.is_empty() {
            return Err(shape_err("mean", "empty input".into()));
        }
        let m = data.iter().sum::<f64>() / data.len() as f64;
        Ok(self.push(Tensor::scalar(m), Op::Mean(a)))
    }

    /// Scaled dot-product attention over `heads` column blocks of already
    /// projected queries, keys and values, with a binary mask.
    ///
    /// Masked slots receive [`MASK_PENALTY`] before the softmax.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: &Mask, heads: usize) -> Result<Var> {
        let (lq, d) = self.dims(q);
        let (lk, dk) = self.dims(k);
        let (lv, dv) = self.dims(v);
        if dk != d || dv != d || lv != lk {
            return Err(shape_err(
                "attention",
                format!("q {lq}x{d}, k {lk}x{dk}, v {lv}x{dv}"),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(shape_err(
                "attention",
                format!("width {d} not divisible by {heads} heads"),
            ));
        }
        if mask.rows() != lq || mask.cols() != lk {
            return Err(shape_err(
                "attention",
                format!("mask {}x{} for {lq}x{lk} scores", mask.rows(), mask.cols()),
            ));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qs, ks, vs) = (self.data(q), self.data(k), self.data(v));
        let mut probs = vec![0.0; heads * lq * lk];
        let mut out = vec![0.0; lq * d];
        let mut scores = vec![0.0; lk];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..lq {
                let qi = &qs[i * d + off..i * d + off + dh];
                for j in 0..lk {
                    let kj = &ks[j * d + off..j * d + off + dh];
                    let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                    let penalty = if mask.allowed(i, j) { 0.0 } else { MASK_PENALTY };
                    scores[j] = dot * scale + penalty;
                }
                let p = &mut probs[(h * lq + i) * lk..(h * lq + i + 1) * lk];
                softmax_row(&scores, p);
                for j in 0..lk {
                    if !mask.allowed(i, j) && p[j] >= MASKED_WEIGHT_LIMIT {
                        return Err(Error::Numeric(format!(
                            "masked attention weight {} at ({i},{j}) exceeds {MASKED_WEIGHT_LIMIT}",
                            p[j]
                        )));
                    }
                }
                let oi = &mut out[i * d + off..i * d + off + dh];
                for (j, &pij) in p.iter().enumerate() {
                    if pij == 0.0 {
                        continue;
                    }
                    let vj = &vs[j * d + off..j * d + off + dh];
                    oi.iter_mut().zip(vj).for_each(|(o, x)| *o += pij * x);
                }
            }
        }
        Ok(self.push(
            Self::mat(lq, d, out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        ))
    }

    /// Mean over rows of `-ln p[row, target]` for a matrix of probabilities.
    pub fn cross_entropy(&mut self, probs: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(probs);
        if targets.len() != r || r == 0 {
            return Err(shape_err(
                "cross_entropy",
                format!("{} targets for {r} rows", targets.len()),
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Index(format!("class {t} of {c}")));
        }
        let p = self.data(probs);
        let mut total = 0.0;
        let mut clamped = 0;
        for (i, &t) in targets.iter().enumerate() {
            let pt = p[i * c + t];
            if pt < LOG_CLAMP {
                clamped += 1;
            }
            total -= floor_keep_nan(pt).ln();
        }
        if clamped > 0 {
            log::warn!("cross-entropy: {clamped} true-class probabilities clamped to {LOG_CLAMP}");
            self.clamped_logs += clamped;
        }
        Ok(self.push(
            Tensor::scalar(total / r as f64),
            Op::CrossEntropy {
                probs,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Mean over rows of the per-row mean squared error against `targets`
    /// (row-major, same shape as `pred`).
    pub fn squared_error(&mut self, pred: Var, targets: &[f64]) -> Result<Var> {
        let p = self.data(pred);
        if targets.len() != p.len() || p.is_empty() {
            return Err(shape_err(
                "squared_error",
                format!("{} targets for {} predictions", targets.len(), p.len()),
            ));
        }
        let se = p
            .iter()
            .zip(targets)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / p.len() as f64;
        Ok(self.push(
            Tensor::scalar(se),
            Op::SquaredError {
                pred,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Sweeps the record in reverse from the scalar `loss`, visiting each
    /// node once, and returns the gradients of every parameter leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.dims(loss) != (1, 1) {
            return Err(shape_err(
                "backward",
                format!("loss must be 1x1, got {:?}", self.dims(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let y = node.value.data();
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => out.entries.push((*id, g)),
                Op::MatMul(a, b) => {
                    let (m, k) = self.dims(*a);
                    let n = self.dims(*b).1;
                    let ga = acc(&mut grads, *a, m * k);
                    gemm(m, n, k, &g, false, self.data(*b), true, ga, true);
                    let gb = acc(&mut grads, *b, k * n);
                    gemm(k, m, n, self.data(*a), true, &g, false, gb, true);
                }
                Op::MatMulT(a, b) => {
                    let (m, k) = self.dims(*a);
                    let n = self.dims(*b).0;
                    let ga = acc(&mut grads, *a, m * k);
                    gemm(m, n, k, &g, false, self.data(*b), false, ga, true);
                    let gb = acc(&mut grads, *b, n * k);
                    gemm(n, m, k, &g, true, self.data(*a), false, gb, true);
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut grads, *a, g.len()), &g, 1.0);
                    add_into(acc(&mut grads, *b, g.len()), &g, 1.0);
                }
                Op::Sub(a, b) => {
                    add_into(acc(&mut grads, *a, g.len()), &g, 1.0);
                    add_into(acc(&mut grads, *b, g.len()), &g, -1.0);
                }
                Op::Hadamard(a, b) => {
                    let (da, db) = (self.data(*a), self.data(*b));
                    let ga = acc(&mut grads, *a, g.len());
                    for ((x, gi), bi) in ga.iter_mut().zip(&g).zip(db) {
                        *x += gi * bi;
                    }
                    let gb = acc(&mut grads, *b, g.len());
                    for ((x, gi), ai) in gb.iter_mut().zip(&g).zip(da) {
                        *x += gi * ai;
                    }
                }
                Op::Scale(a, c) => add_into(acc(&mut grads, *a, g.len()), &g, *c),
                Op::OneMinus(a) => add_into(acc(&mut grads, *a, g.len()), &g, -1.0),
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.data(p).len();
                        add_into(acc(&mut grads, p, n), &g[off..off + n], 1.0);
                        off += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let rows = node.value.rows();
                    let total = node.value.cols();
                    let mut off = 0;
                    for &p in parts {
                        let c = self.dims(p).1;
                        let gp = acc(&mut grads, p, rows * c);
                        for r in 0..rows {
                            let src = &g[r * total + off..r * total + off + c];
                            add_into(&mut gp[r * c..(r + 1) * c], src, 1.0);
                        }
                        off += c;
                    }
                }
                Op::SliceRows { src, start } => {
                    let (r, c) = self.dims(*src);
                    let gs = acc(&mut grads, *src, r * c);
                    add_into(&mut gs[start * c..start * c + g.len()], &g, 1.0);
                }
                Op::Tanh(a) => {
                    let ga = acc(&mut grads, *a, g.len());
                    for ((x, gi), yi) in ga.iter_mut().zip(&g).zip(y) {
                        *x += gi * (1.0 - yi * yi);
                    }
                }
                Op::Sigmoid(a) => {
                    let ga = acc(&mut grads, *a, g.len());
                    for ((x, gi), yi) in ga.iter_mut().zip(&g).zip(y) {
                        *x += gi * yi * (1.0 - yi);
                    }
                }
                Op::Gelu(a) => {
                    let xs = self.data(*a);
                    let ga = acc(&mut grads, *a, g.len());
                    for ((x, gi), xi) in ga.iter_mut().zip(&g).zip(xs) {
                        *x += gi * gelu_grad(*xi);
                    }
                }
                Op::Softmax(a) => {
                    let c = node.value.cols().max(1);
                    let ga = acc(&mut grads, *a, g.len());
                    for ((gr, yr), xr) in g.chunks(c).zip(y.chunks(c)).zip(ga.chunks_mut(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            xr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let (r, d) = self.dims(*x);
                    let gam = self.data(*gamma).to_vec();
                    {
                        let gg = acc(&mut grads, *gamma, d);
                        for i in 0..r {
                            for j in 0..d {
                                gg[j] += g[i * d + j] * xhat[i * d + j];
                            }
                        }
                    }
                    {
                        let gb = acc(&mut grads, *beta, d);
                        for i in 0..r {
                            for j in 0..d {
                                gb[j] += g[i * d + j];
                            }
                        }
                    }
                    let gx = acc(&mut grads, *x, r * d);
                    let mut dxhat = vec![0.0; d];
                    for i in 0..r {
                        let mut sum = 0.0;
                        let mut dot = 0.0;
                        for j in 0..d {
                            dxhat[j] = g[i * d + j] * gam[j];
                            sum += dxhat[j];
                            dot += dxhat[j] * xhat[i * d + j];
                        }
                        let s = rstd[i] / d as f64;
                        for j in 0..d {
                            gx[i * d + j] +=
                                s * (d as f64 * dxhat[j] - sum - xhat[i * d + j] * dot);
                        }
                    }
                }
                Op::Embedding { table, ids } => {
                    let (n, d) = self.dims(*table);
                    let gt = acc(&mut grads, *table, n * d);
                    for (r, &i) in ids.iter().enumerate() {
                        add_into(&mut gt[i * d..(i + 1) * d], &g[r * d..(r + 1) * d], 1.0);
                    }
                }
                Op::Mean(a) => {
                    let n = self.data(*a).len();
                    let ga = acc(&mut grads, *a, n);
                    let share = g[0] / n as f64;
                    ga.iter_mut().for_each(|x| *x += share);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                } => {
                    let (lq, d) = self.dims(*q);
                    let lk = self.dims(*k).0;
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let (qs, ks, vs) = (self.data(*q), self.data(*k), self.data(*v));
                    let mut gq = vec![0.0; lq * d];
                    let mut gk = vec![0.0; lk * d];
                    let mut gv = vec![0.0; lk * d];
                    let mut ds = vec![0.0; lk];
                    for h in 0..*heads {
                        let off = h * dh;
                        for i in 0..lq {
                            let p = &probs[(h * lq + i) * lk..(h * lq + i + 1) * lk];
                            let gi = &g[i * d + off..i * d + off + dh];
                            let mut dot = 0.0;
                            for j in 0..lk {
                                let vj = &vs[j * d + off..j * d + off + dh];
                                let dp: f64 = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                                ds[j] = dp;
                                dot += p[j] * dp;
                                if p[j] != 0.0 {
                                    let gvj = &mut gv[j * d + off..j * d + off + dh];
                                    gvj.iter_mut().zip(gi).for_each(|(x, gg)| *x += p[j] * gg);
                                }
                            }
                            for j in 0..lk {
                                let dsj = p[j] * (ds[j] - dot) * scale;
                                if dsj == 0.0 {
                                    continue;
                                }
                                for t in 0..dh {
                                    gq[i * d + off + t] += dsj * ks[j * d + off + t];
                                    gk[j * d + off + t] += dsj * qs[i * d + off + t];
                                }
                            }
                        }
                    }
                    add_into(acc(&mut grads, *q, lq * d), &gq, 1.0);
                    add_into(acc(&mut grads, *k, lk * d), &gk, 1.0);
                    add_into(acc(&mut grads, *v, lk * d), &gv, 1.0);
                }
                Op::CrossEntropy { probs, targets } => {
                    let (r, c) = self.dims(*probs);
                    let p = self.data(*probs).to_vec();
                    let gp = acc(&mut grads, *probs, r * c);
                    for (i, &t) in targets.iter().enumerate() {
                        gp[i * c + t] -= g[0] / (r as f64 * floor_keep_nan(p[i * c + t]));
                    }
                }
                Op::SquaredError { pred, targets } => {
                    let p = self.data(*pred).to_vec();
                    let n = p.len() as f64;
                    let gp = acc(&mut grads, *pred, p.len());
                    for ((x, pi), ti) in gp.iter_mut().zip(&p).zip(targets) {
                        *x += g[0] * 2.0 * (pi - ti) / n;
                    }
                }
            }
        }
        Ok(out)
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64], c: f64) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += c * s);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        use rand::Rng;
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matmul_matches_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, 3, 4);
        let b = rand_tensor(&mut rng, 4, 2);
        let mut t = Tape::new();
        let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
        let c = t.matmul(va, vb).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let want: f64 = (0..4).map(|k| a.get(i, k) * b.get(k, j)).sum();
                assert!((t.value(c).get(i, j) - want).abs() < 1e-14);
            }
        }
        let bt = t.constant(rand_tensor(&mut rng, 5, 4));
        let d = t.matmul_t(va, bt).unwrap();
        assert_eq!(t.value(d).shape(), &[3, 5]);
        assert!(t.matmul(va, va).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut t = Tape::new();
        let x = t.constant(rand_tensor(&mut rng, 4, 7));
        let s = t.softmax(x);
        for r in 0..4 {
            let row = t.value(s).row(r);
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn inputs_precede_their_node() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = Tape::new();
        let a = t.constant(rand_tensor(&mut rng, 2, 2));
        let b = t.tanh(a);
        let c = t.hadamard(a, b).unwrap();
        let _ = t.mean(c).unwrap();
        for i in 0..t.len() {
            for inp in t.inputs(Var(i)) {
                assert!(inp.0 < i);
            }
        }
        assert_eq!(t.op_name(c), "hadamard");
    }

    #[test]
    fn cross_entropy_of_uniform_is_ln_c() {
        let mut t = Tape::new();
        let p = t.constant(Tensor::matrix(1, 6, vec![1.0 / 6.0; 6]).unwrap());
        let l = t.cross_entropy(p, &[2]).unwrap();
        assert!((t.value(l).data()[0] - 6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_clamps_zero_probability() {
        let mut t = Tape::new();
        let p = t.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let l = t.cross_entropy(p, &[1]).unwrap();
        assert!(t.value(l).data()[0].is_finite());
        assert_eq!(t.clamped_logs(), 1);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(2, 2));
        assert!(t.backward(a).is_err());
    }

    #[test]
    fn activations_stay_in_range() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![-30.0, -1.0, 0.0, 1.0, 30.0]));
        let th = t.tanh(x);
        let sg = t.sigmoid(x);
        assert!(t.value(th).data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
        assert!(t.value(sg).data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let mid = [-1.0, 0.0, 1.0];
        let x = t.constant(Tensor::vector(mid.to_vec()));
        let th = t.tanh(x);
        let sg = t.sigmoid(x);
        assert!(t.value(th).data().iter().all(|&v| v > -1.0 && v < 1.0));
        assert!(t.value(sg).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
