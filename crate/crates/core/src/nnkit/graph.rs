//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] borrows a [`ParameterSet`], records every operation applied to
//! its nodes and can replay the tape backwards from a scalar loss. Nodes that
//! depend on no trainable parameter are never visited by the backward pass, so
//! frozen sub-networks cost nothing beyond their forward evaluation while
//! gradients still flow *through* them to trainable inputs.

use std::collections::HashMap;
use std::sync::Arc;

use super::{Gradients, NnError, ParameterSet, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(String),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Silu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax(Var),
    LogSoftmax(Var),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows { table: Var, ids: Vec<usize> },
    Gather { src: Var, idx: Arc<Vec<usize>> },
    MeanRows(Var),
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64>, count: usize },
    DepthwiseConv { x: Var, w: Var },
    Stride2 { x: Var, w: Var },
    External { input: Var, grad: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward computation.
pub struct Graph<'p> {
    params: &'p ParameterSet,
    nodes: Vec<Node>,
    bound: HashMap<String, Var>,
}

/// `c = op(a) * op(b) + beta * c`, row-major, with `op` an optional transpose.
/// `a` is `m x k` after `op`, `b` is `k x n` after `op`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths checked above; strides describe row-major layouts
    // of exactly those extents.
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

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (d, s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        sum += *d;
    }
    for d in dst.iter_mut() {
        *d /= sum;
    }
}

fn log_softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + src.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    for (d, s) in dst.iter_mut().zip(src) {
        *d = s - lse;
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParameterSet) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
            bound: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParameterSet {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn rows(&self, v: Var) -> usize {
        self.nodes[v.0].value.rows()
    }

    pub fn cols(&self, v: Var) -> usize {
        self.nodes[v.0].value.cols()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Constant input; never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Binds a named parameter. Repeated calls return the same node.
    pub fn param(&mut self, name: &str) -> Result<Var, NnError> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let value = self
            .params
            .get(name)
            .ok_or_else(|| NnError::UnknownParameter(name.to_string()))?
            .clone();
        let trainable = self.params.is_trainable(name);
        let v = self.push(value, Op::Param(name.to_string()), trainable);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    fn check_2d(&self, v: Var, what: &str) -> Result<(usize, usize), NnError> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(NnError::Shape(format!("{what}: expected matrix, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (m, k) = self.check_2d(a, "matmul lhs")?;
        let (k2, n) = self.check_2d(b, "matmul rhs")?;
        if k != k2 {
            return Err(NnError::Shape(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), ng))
    }

    /// `a * b^T` for `a: m x k`, `b: n x k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (m, k) = self.check_2d(a, "matmul_nt lhs")?;
        let (n, k2) = self.check_2d(b, "matmul_nt rhs")?;
        if k != k2 {
            return Err(NnError::Shape(format!("matmul_nt {m}x{k} by ({n}x{k2})^T")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), true, &mut out, 0.0);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMulNt(a, b), ng))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), NnError> {
        if self.shape(a) != self.shape(b) {
            return Err(NnError::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let shape = va.shape().to_vec();
        let ng = self.ng(&[a, b]);
        self.push(Tensor::new(shape, data).expect("same shape"), op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_map(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_map(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_map(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| f(*v)).collect();
        let shape = vx.shape().to_vec();
        let ng = self.ng(&[x]);
        self.push(Tensor::new(shape, data).expect("same shape"), op, ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.map(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, Op::Tanh(x), f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.map(x, Op::Silu(x), |v| v * sigmoid(v))
    }

    /// Adds a length-`n` bias to every row of an `m x n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, NnError> {
        let (m, n) = self.check_2d(x, "add_row")?;
        if self.value(bias).numel() != n {
            return Err(NnError::Shape(format!(
                "add_row: bias of {} values for {n} columns",
                self.value(bias).numel()
            )));
        }
        let mut data = self.value(x).data().to_vec();
        let b = self.value(bias).data();
        for r in 0..m {
            for (d, bv) in data[r * n..(r + 1) * n].iter_mut().zip(b) {
                *d += *bv;
            }
        }
        let ng = self.ng(&[x, bias]);
        Ok(self.push(Tensor::matrix(m, n, data), Op::AddRow(x, bias), ng))
    }

    /// Row-wise layer normalisation with affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, NnError> {
        let (m, n) = self.check_2d(x, "layer_norm")?;
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(NnError::Shape("layer_norm affine size".into()));
        }
        let vx = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![0.0; m * n];
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        for r in 0..m {
            let row = &vx[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::matrix(m, n, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var, NnError> {
        let (m, n) = self.check_2d(x, "softmax")?;
        let mut out = vec![0.0; m * n];
        let vx = self.value(x).data();
        for r in 0..m {
            softmax_row(&vx[r * n..(r + 1) * n], &mut out[r * n..(r + 1) * n]);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::matrix(m, n, out), Op::Softmax(x), ng))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var, NnError> {
        let (m, n) = self.check_2d(x, "log_softmax")?;
        let mut out = vec![0.0; m * n];
        let vx = self.value(x).data();
        for r in 0..m {
            log_softmax_row(&vx[r * n..(r + 1) * n], &mut out[r * n..(r + 1) * n]);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::matrix(m, n, out), Op::LogSoftmax(x), ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NnError> {
        let (m, n) = self.check_2d(x, "slice_cols")?;
        if start + len > n {
            return Err(NnError::Shape(format!("slice_cols {start}+{len} of {n}")));
        }
        let vx = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&vx[r * n + start..r * n + start + len]);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::matrix(m, len, out), Op::SliceCols { x, start }, ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NnError> {
        let (m, n) = self.check_2d(x, "slice_rows")?;
        if start + len > m {
            return Err(NnError::Shape(format!("slice_rows {start}+{len} of {m}")));
        }
        let out = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::matrix(len, n, out), Op::SliceRows { x, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        if parts.is_empty() {
            return Err(NnError::Shape("concat_cols of nothing".into()));
        }
        let m = self.rows(parts[0]);
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pm, pn) = self.check_2d(*p, "concat_cols")?;
            if pm != m {
                return Err(NnError::Shape(format!("concat_cols rows {pm} vs {m}")));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for (p, w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*p).data()[r * w..(r + 1) * w]);
            }
        }
        let ng = self.ng(parts);
        Ok(self.push(Tensor::matrix(m, n, out), Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        if parts.is_empty() {
            return Err(NnError::Shape("concat_rows of nothing".into()));
        }
        let n = self.cols(parts[0]);
        let mut m = 0;
        let mut out = Vec::new();
        for p in parts {
            let (pm, pn) = self.check_2d(*p, "concat_rows")?;
            if pn != n {
                return Err(NnError::Shape(format!("concat_rows cols {pn} vs {n}")));
            }
            m += pm;
            out.extend_from_slice(self.value(*p).data());
        }
        let ng = self.ng(parts);
        Ok(self.push(Tensor::matrix(m, n, out), Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, NnError> {
        let (v, d) = self.check_2d(table, "gather_rows")?;
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(NnError::Shape(format!("gather_rows id {id} >= {v}")));
            }
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let ng = self.ng(&[table]);
        Ok(self.push(
            Tensor::matrix(ids.len(), d, out),
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Element gather over the flattened source: `out[i] = src[idx[i]]`.
    pub fn gather(&mut self, src: Var, idx: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var, NnError> {
        let n: usize = shape.iter().product();
        if n != idx.len() {
            return Err(NnError::Shape("gather index/shape mismatch".into()));
        }
        let s = self.value(src).data();
        let mut out = Vec::with_capacity(n);
        for &i in idx.iter() {
            out.push(*s.get(i).ok_or_else(|| NnError::Shape(format!("gather index {i}")))?);
        }
        let ng = self.ng(&[src]);
        Ok(self.push(Tensor::new(shape.to_vec(), out)?, Op::Gather { src, idx }, ng))
    }

    /// Column-wise mean over rows, producing a `1 x n` matrix.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var, NnError> {
        let (m, n) = self.check_2d(x, "mean_rows")?;
        if m == 0 {
            return Err(NnError::Shape("mean_rows of empty matrix".into()));
        }
        let vx = self.value(x).data();
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, v) in out.iter_mut().zip(&vx[r * n..(r + 1) * n]) {
                *o += *v;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::matrix(1, n, out), Op::MeanRows(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`. Rows whose target is `None` are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var, NnError> {
        let (m, n) = self.check_2d(logits, "cross_entropy")?;
        if targets.len() != m {
            return Err(NnError::Shape(format!("cross_entropy: {} targets for {m} rows", targets.len())));
        }
        let vx = self.value(logits).data();
        let mut probs = vec![0.0; m * n];
        let mut total = 0.0;
        let mut count = 0;
        for r in 0..m {
            let row = &vx[r * n..(r + 1) * n];
            softmax_row(row, &mut probs[r * n..(r + 1) * n]);
            if let Some(t) = targets[r] {
                if t >= n {
                    return Err(NnError::Shape(format!("cross_entropy target {t} >= {n}")));
                }
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
                total += lse - row[t];
                count += 1;
            }
        }
        if count == 0 {
            return Err(NnError::Shape("cross_entropy without targets".into()));
        }
        let ng = self.ng(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / count as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            ng,
        ))
    }

    /// Valid depthwise convolution: `x: (T + K - 1) x C`, `w: K x C` gives
    /// `y[t, c] = sum_k w[k, c] * x[t + k, c]`. Causal convolution is obtained
    /// by left-padding `x` with `K - 1` history rows.
    pub fn depthwise_conv(&mut self, x: Var, w: Var) -> Result<Var, NnError> {
        let (tx, c) = self.check_2d(x, "depthwise_conv input")?;
        let (k, c2) = self.check_2d(w, "depthwise_conv kernel")?;
        if c != c2 || tx + 1 < k {
            return Err(NnError::Shape(format!("depthwise_conv {tx}x{c} with {k}x{c2}")));
        }
        let t = tx + 1 - k;
        let vx = self.value(x).data();
        let vw = self.value(w).data();
        let mut out = vec![0.0; t * c];
        for i in 0..t {
            for j in 0..k {
                let xr = &vx[(i + j) * c..(i + j + 1) * c];
                let wr = &vw[j * c..(j + 1) * c];
                for ((o, xv), wv) in out[i * c..(i + 1) * c].iter_mut().zip(xr).zip(wr) {
                    *o += xv * wv;
                }
            }
        }
        let ng = self.ng(&[x, w]);
        Ok(self.push(Tensor::matrix(t, c, out), Op::DepthwiseConv { x, w }, ng))
    }

    /// Non-overlapping stride-2 depthwise reduction:
    /// `y[t, c] = w[0, c] * x[2t, c] + w[1, c] * x[2t + 1, c]`.
    pub fn stride2(&mut self, x: Var, w: Var) -> Result<Var, NnError> {
        let (tx, c) = self.check_2d(x, "stride2 input")?;
        let (k, c2) = self.check_2d(w, "stride2 kernel")?;
        if k != 2 || c != c2 || tx % 2 != 0 {
            return Err(NnError::Shape(format!("stride2 {tx}x{c} with {k}x{c2}")));
        }
        let t = tx / 2;
        let vx = self.value(x).data();
        let vw = self.value(w).data();
        let mut out = vec![0.0; t * c];
        for i in 0..t {
            for ch in 0..c {
                out[i * c + ch] = vw[ch] * vx[2 * i * c + ch] + vw[c + ch] * vx[(2 * i + 1) * c + ch];
            }
        }
        let ng = self.ng(&[x, w]);
        Ok(self.push(Tensor::matrix(t, c, out), Op::Stride2 { x, w }, ng))
    }

    /// Scalar computed outside the tape whose gradient with respect to
    /// `input` is already known (e.g. a dynamic-programming loss).
    pub fn external_scalar(&mut self, input: Var, value: f64, grad: Tensor) -> Result<Var, NnError> {
        if grad.numel() != self.value(input).numel() {
            return Err(NnError::Shape("external_scalar gradient size".into()));
        }
        let ng = self.ng(&[input]);
        Ok(self.push(Tensor::scalar(value), Op::External { input, grad }, ng))
    }

    /// Reverse pass from a scalar `loss`; returns gradients of trainable
    /// parameters reached by the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NnError> {
        if self.value(loss).numel() != 1 {
            return Err(NnError::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.shape(loss), 1.0));
        let mut out = Gradients::new();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &dy, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn backward_node(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>], out: &mut Gradients) {
        let acc = |grads: &mut [Option<Tensor>], v: Var, g: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        let y = &node.value;
        let dyd = dy.data();
        match &node.op {
            Op::Leaf => {}
            Op::Param(name) => out.insert(name.clone(), dy.clone()),
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).rows(), val(*a).cols());
                let n = val(*b).cols();
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, dyd, false, val(*b).data(), true, &mut da, 0.0);
                    acc(grads, *a, Tensor::matrix(m, k, da));
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, val(*a).data(), true, dyd, false, &mut db, 0.0);
                    acc(grads, *b, Tensor::matrix(k, n, db));
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (val(*a).rows(), val(*a).cols());
                let n = val(*b).rows();
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, dyd, false, val(*b).data(), false, &mut da, 0.0);
                    acc(grads, *a, Tensor::matrix(m, k, da));
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![0.0; n * k];
                    gemm(n, m, k, dyd, true, val(*a).data(), false, &mut db, 0.0);
                    acc(grads, *b, Tensor::matrix(n, k, db));
                }
            }
            Op::Add(a, b) => {
                acc(grads, *a, dy.clone());
                acc(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, dy.clone());
                let mut g = dy.clone();
                g.scale_assign(-1.0);
                acc(grads, *b, g);
            }
            Op::Mul(a, b) => {
                let ga: Vec<f64> = dyd.iter().zip(val(*b).data()).map(|(d, v)| d * v).collect();
                let gb: Vec<f64> = dyd.iter().zip(val(*a).data()).map(|(d, v)| d * v).collect();
                acc(grads, *a, Tensor::new(y.shape().to_vec(), ga).expect("shape"));
                acc(grads, *b, Tensor::new(y.shape().to_vec(), gb).expect("shape"));
            }
            Op::Scale(x, s) => {
                let mut g = dy.clone();
                g.scale_assign(*s);
                acc(grads, *x, g);
            }
            Op::AddRow(x, b) => {
                acc(grads, *x, dy.clone());
                if self.nodes[b.0].needs_grad {
                    let n = y.cols();
                    let mut gb = vec![0.0; n];
                    for r in 0..y.rows() {
                        for (g, d) in gb.iter_mut().zip(&dyd[r * n..(r + 1) * n]) {
                            *g += *d;
                        }
                    }
                    let shape = val(*b).shape().to_vec();
                    acc(grads, *b, Tensor::new(shape, gb).expect("shape"));
                }
            }
            Op::Tanh(x) => {
                let g = dyd.iter().zip(y.data()).map(|(d, t)| d * (1.0 - t * t)).collect();
                acc(grads, *x, Tensor::new(y.shape().to_vec(), g).expect("shape"));
            }
            Op::Sigmoid(x) => {
                let g = dyd.iter().zip(y.data()).map(|(d, s)| d * s * (1.0 - s)).collect();
                acc(grads, *x, Tensor::new(y.shape().to_vec(), g).expect("shape"));
            }
            Op::Silu(x) => {
                let g = dyd
                    .iter()
                    .zip(val(*x).data())
                    .map(|(d, xv)| {
                        let s = sigmoid(*xv);
                        d * (s + xv * s * (1.0 - s))
                    })
                    .collect();
                acc(grads, *x, Tensor::new(y.shape().to_vec(), g).expect("shape"));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (m, n) = (y.rows(), y.cols());
                let gv = val(*gamma).data();
                if self.nodes[gamma.0].needs_grad || self.nodes[beta.0].needs_grad {
                    let mut dg = vec![0.0; n];
                    let mut db = vec![0.0; n];
                    for r in 0..m {
                        for c in 0..n {
                            let d = dyd[r * n + c];
                            dg[c] += d * xhat[r * n + c];
                            db[c] += d;
                        }
                    }
                    let gshape = val(*gamma).shape().to_vec();
                    let bshape = val(*beta).shape().to_vec();
                    acc(grads, *gamma, Tensor::new(gshape, dg).expect("shape"));
                    acc(grads, *beta, Tensor::new(bshape, db).expect("shape"));
                }
                if self.nodes[x.0].needs_grad {
                    let mut dx = vec![0.0; m * n];
                    let inv_n = 1.0 / n as f64;
                    for r in 0..m {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for c in 0..n {
                            let dh = dyd[r * n + c] * gv[c];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[r * n + c];
                        }
                        mean_dh *= inv_n;
                        mean_dh_h *= inv_n;
                        for c in 0..n {
                            let dh = dyd[r * n + c] * gv[c];
                            dx[r * n + c] = rstd[r] * (dh - mean_dh - xhat[r * n + c] * mean_dh_h);
                        }
                    }
                    acc(grads, *x, Tensor::matrix(m, n, dx));
                }
            }
            Op::Softmax(x) => {
                let (m, n) = (y.rows(), y.cols());
                let yd = y.data();
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    let s: f64 = (0..n).map(|c| dyd[r * n + c] * yd[r * n + c]).sum();
                    for c in 0..n {
                        dx[r * n + c] = yd[r * n + c] * (dyd[r * n + c] - s);
                    }
                }
                acc(grads, *x, Tensor::matrix(m, n, dx));
            }
            Op::LogSoftmax(x) => {
                let (m, n) = (y.rows(), y.cols());
                let yd = y.data();
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    let s: f64 = dyd[r * n..(r + 1) * n].iter().sum();
                    for c in 0..n {
                        dx[r * n + c] = dyd[r * n + c] - yd[r * n + c].exp() * s;
                    }
                }
                acc(grads, *x, Tensor::matrix(m, n, dx));
            }
            Op::SliceCols { x, start } => {
                let (m, n) = (val(*x).rows(), val(*x).cols());
                let w = y.cols();
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    dx[r * n + start..r * n + start + w].copy_from_slice(&dyd[r * w..(r + 1) * w]);
                }
                acc(grads, *x, Tensor::matrix(m, n, dx));
            }
            Op::SliceRows { x, start } => {
                let (m, n) = (val(*x).rows(), val(*x).cols());
                let mut dx = vec![0.0; m * n];
                dx[start * n..start * n + dyd.len()].copy_from_slice(dyd);
                acc(grads, *x, Tensor::matrix(m, n, dx));
            }
            Op::ConcatCols(parts) => {
                let m = y.rows();
                let n = y.cols();
                let mut off = 0;
                for p in parts {
                    let w = val(*p).cols();
                    if self.nodes[p.0].needs_grad {
                        let mut g = Vec::with_capacity(m * w);
                        for r in 0..m {
                            g.extend_from_slice(&dyd[r * n + off..r * n + off + w]);
                        }
                        acc(grads, *p, Tensor::matrix(m, w, g));
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let n = y.cols();
                let mut off = 0;
                for p in parts {
                    let rows = val(*p).rows();
                    if self.nodes[p.0].needs_grad {
                        let g = dyd[off * n..(off + rows) * n].to_vec();
                        acc(grads, *p, Tensor::matrix(rows, n, g));
                    }
                    off += rows;
                }
            }
            Op::GatherRows { table, ids } => {
                let (v, d) = (val(*table).rows(), val(*table).cols());
                let mut g = vec![0.0; v * d];
                for (i, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        g[id * d + c] += dyd[i * d + c];
                    }
                }
                acc(grads, *table, Tensor::matrix(v, d, g));
            }
            Op::Gather { src, idx } => {
                let mut g = vec![0.0; val(*src).numel()];
                for (i, &j) in idx.iter().enumerate() {
                    g[j] += dyd[i];
                }
                let shape = val(*src).shape().to_vec();
                acc(grads, *src, Tensor::new(shape, g).expect("shape"));
            }
            Op::MeanRows(x) => {
                let (m, n) = (val(*x).rows(), val(*x).cols());
                let inv = 1.0 / m as f64;
                let mut g = vec![0.0; m * n];
                for r in 0..m {
                    for c in 0..n {
                        g[r * n + c] = dyd[c] * inv;
                    }
                }
                acc(grads, *x, Tensor::matrix(m, n, g));
            }
            Op::Sum(x) => {
                let shape = val(*x).shape().to_vec();
                acc(grads, *x, Tensor::filled(&shape, dyd[0]));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let (m, n) = (val(*logits).rows(), val(*logits).cols());
                let scale = dyd[0] / *count as f64;
                let mut g = vec![0.0; m * n];
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = t {
                        for c in 0..n {
                            g[r * n + c] = probs[r * n + c] * scale;
                        }
                        g[r * n + t] -= scale;
                    }
                }
                acc(grads, *logits, Tensor::matrix(m, n, g));
            }
            Op::DepthwiseConv { x, w } => {
                let (tx, c) = (val(*x).rows(), val(*x).cols());
                let k = val(*w).rows();
                let t = y.rows();
                let vx = val(*x).data();
                let vw = val(*w).data();
                if self.nodes[x.0].needs_grad {
                    let mut dx = vec![0.0; tx * c];
                    for i in 0..t {
                        for j in 0..k {
                            for ch in 0..c {
                                dx[(i + j) * c + ch] += dyd[i * c + ch] * vw[j * c + ch];
                            }
                        }
                    }
                    acc(grads, *x, Tensor::matrix(tx, c, dx));
                }
                if self.nodes[w.0].needs_grad {
                    let mut dw = vec![0.0; k * c];
                    for i in 0..t {
                        for j in 0..k {
                            for ch in 0..c {
                                dw[j * c + ch] += dyd[i * c + ch] * vx[(i + j) * c + ch];
                            }
                        }
                    }
                    acc(grads, *w, Tensor::matrix(k, c, dw));
                }
            }
            Op::Stride2 { x, w } => {
                let (tx, c) = (val(*x).rows(), val(*x).cols());
                let t = y.rows();
                let vx = val(*x).data();
                let vw = val(*w).data();
                if self.nodes[x.0].needs_grad {
                    let mut dx = vec![0.0; tx * c];
                    for i in 0..t {
                        for ch in 0..c {
                            dx[2 * i * c + ch] = dyd[i * c + ch] * vw[ch];
                            dx[(2 * i + 1) * c + ch] = dyd[i * c + ch] * vw[c + ch];
                        }
                    }
                    acc(grads, *x, Tensor::matrix(tx, c, dx));
                }
                if self.nodes[w.0].needs_grad {
                    let mut dw = vec![0.0; 2 * c];
                    for i in 0..t {
                        for ch in 0..c {
                            dw[ch] += dyd[i * c + ch] * vx[2 * i * c + ch];
                            dw[c + ch] += dyd[i * c + ch] * vx[(2 * i + 1) * c + ch];
                        }
                    }
                    acc(grads, *w, Tensor::matrix(2, c, dw));
                }
            }
            Op::External { input, grad } => {
                let mut g = grad.clone();
                g.scale_assign(dyd[0]);
                let shape = val(*input).shape().to_vec();
                acc(grads, *input, g.reshape(shape).expect("shape"));
            }
        }
    }
}
