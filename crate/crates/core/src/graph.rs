//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node to the [`Graph`], so node order is already a
//! topological order and `backward` is a single reverse sweep. Gradients
//! accumulate additively when a node feeds several consumers.
//!
//! Accumulation policy: `backward` may run once per graph. A second call
//! fails with [`Error::BackwardTwice`] until [`Graph::zero_grad`] clears the
//! stored gradients.

use crate::error::{Error, Result};
use crate::linalg::{col2im, gemm, im2col, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulBy(Var, Var),
    DivBy(Var, Var),
    Matmul(Var, Var),
    Transpose(Var),
    AddRow(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
        out_c: usize,
    },
    Relu(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Exp(Var),
    Log(Var),
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    LogSoftmax(Var),
    Kl(Var, Var),
    PairwiseSqDist(Var),
    MedianDist {
        d: Var,
        picks: Vec<(usize, f64)>,
    },
    Trace(Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Sign(Var),
    Center(Var),
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
}

/// Recording of one forward computation, plus the gradients `backward`
/// writes for every node that requires them.
#[derive(Debug, Default)]
pub struct Graph {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    requires: Vec<bool>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn bad_shape(op: &'static str, t: &Tensor, reason: &str) -> Error {
    Error::InvalidShape {
        op,
        shape: t.shape().to_vec(),
        reason: reason.to_string(),
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        None => *slot = Some(contribution),
    }
}

fn row_softmax(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.requires.push(requires);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    /// Inserts a leaf. Only leaves created with `requires_grad` receive
    /// gradients; constants stop the backward sweep.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Gradient of the last `backward` root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.values[v.0].shape().to_vec(), g.clone()))
    }

    pub fn grad_data(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    fn req1(&self, a: Var) -> bool {
        self.requires[a.0]
    }

    fn req2(&self, a: Var, b: Var) -> bool {
        self.requires[a.0] || self.requires[b.0]
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta, tb));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    fn scalar_of(&self, op: &'static str, s: Var) -> Result<f64> {
        let t = self.value(s);
        if !t.is_scalar() {
            return Err(bad_shape(op, t, "expected a scalar operand"));
        }
        Ok(t.item())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        let r = self.req2(a, b);
        Ok(self.push(out, Op::Add(a, b), r))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        let r = self.req2(a, b);
        Ok(self.push(out, Op::Sub(a, b), r))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        let r = self.req2(a, b);
        Ok(self.push(out, Op::Mul(a, b), r))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        let r = self.req1(a);
        self.push(out, Op::Scale(a, factor), r)
    }

    pub fn add_scalar(&mut self, a: Var, shift: f64) -> Var {
        let out = self.value(a).map(|x| x + shift);
        let r = self.req1(a);
        self.push(out, Op::AddScalar(a), r)
    }

    /// `a * s` for a scalar node `s`.
    pub fn mul_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.scalar_of("mul_by", s)?;
        let out = self.value(a).map(|x| x * sv);
        let r = self.req2(a, s);
        Ok(self.push(out, Op::MulBy(a, s), r))
    }

    /// `a / s` for a scalar node `s`.
    pub fn div_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.scalar_of("div_by", s)?;
        let out = self.value(a).map(|x| x / sv);
        let r = self.req2(a, s);
        Ok(self.push(out, Op::DivBy(a, s), r))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, 0.0, &mut out);
        let r = self.req2(a, b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::Matmul(a, b), r))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 {
            return Err(bad_shape("transpose", t, "expected a matrix"));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let out = Tensor::from_parts(vec![c, r], transpose_data(t.data(), r, c));
        let req = self.req1(a);
        Ok(self.push(out, Op::Transpose(a), req))
    }

    /// Adds a length-`n` row vector to every row of an `m × n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if ta.shape().len() != 2 || tr.len() != ta.shape()[1] {
            return Err(mismatch("add_row", ta, tr));
        }
        let n = ta.shape()[1];
        let mut out = ta.data().to_vec();
        for chunk in out.chunks_mut(n) {
            for (o, b) in chunk.iter_mut().zip(tr.data()) {
                *o += b;
            }
        }
        let out = Tensor::from_parts(ta.shape().to_vec(), out);
        let r = self.req2(a, row);
        Ok(self.push(out, Op::AddRow(a, row), r))
    }

    /// Stride-1 convolution with symmetric zero padding. `x` is
    /// `(n, c, h, w)`, `w` is `(o, c, k, k)` and `b` has length `o`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let xs = tx.shape();
        let ws = tw.shape();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] {
            return Err(mismatch("conv2d", tx, tw));
        }
        let k = ws[2];
        if xs[2] + 2 * pad < k || xs[3] + 2 * pad < k {
            return Err(mismatch("conv2d", tx, tw));
        }
        if let Some(bv) = b {
            let tb = self.value(bv);
            if tb.len() != ws[0] {
                return Err(mismatch("conv2d", tw, tb));
            }
        }
        let geom = ConvGeom {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            k,
            pad,
            oh: xs[2] + 2 * pad - k + 1,
            ow: xs[3] + 2 * pad - k + 1,
        };
        let out_c = ws[0];
        let cols = im2col(tx.data(), &geom);
        let ncols = geom.col_cols();
        let mut tmp = vec![0.0; out_c * ncols];
        gemm(
            out_c,
            geom.col_rows(),
            ncols,
            tw.data(),
            false,
            &cols,
            false,
            0.0,
            &mut tmp,
        );
        let plane = geom.oh * geom.ow;
        let mut out = vec![0.0; geom.n * out_c * plane];
        let bias = b.map(|bv| self.value(bv).data());
        for o in 0..out_c {
            let shift = bias.map_or(0.0, |bd| bd[o]);
            for n in 0..geom.n {
                let src = &tmp[o * ncols + n * plane..o * ncols + (n + 1) * plane];
                let dst = &mut out[(n * out_c + o) * plane..(n * out_c + o + 1) * plane];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + shift;
                }
            }
        }
        let out = Tensor::from_parts(vec![geom.n, out_c, geom.oh, geom.ow], out);
        let r = self.req2(x, w) || b.is_some_and(|bv| self.req1(bv));
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
                out_c,
            },
            r,
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let r = self.req1(a);
        self.push(out, Op::Relu(a), r)
    }

    /// 2×2 max pooling with stride 2 over `(n, c, h, w)`; odd trailing
    /// rows and columns are dropped.
    pub fn max_pool2(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.shape();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(bad_shape("max_pool2", t, "expected (n, c, h>=2, w>=2)"));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        let data = t.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::from_parts(vec![n, c, oh, ow], out);
        let r = self.req1(a);
        Ok(self.push(out, Op::MaxPool2 { x: a, argmax }, r))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let r = self.req1(a);
        Ok(self.push(out, Op::Reshape(a), r))
    }

    /// `(n, ...) -> (n, prod(...))`.
    pub fn flatten(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let shape = vec![t.rows(), t.row_len()];
        self.reshape(a, shape).expect("flatten preserves element count")
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let r = self.req1(a);
        self.push(out, Op::Sum(a), r)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        let r = self.req1(a);
        self.push(out, Op::Mean(a), r)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let r = self.req1(a);
        self.push(out, Op::Exp(a), r)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        let r = self.req1(a);
        self.push(out, Op::Log(a), r)
    }

    /// Mean softmax cross-entropy of `(m, k)` logits against class indices.
    pub fn softmax_ce(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.shape().len() != 2 || t.shape()[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "softmax_ce",
                left: t.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        let (m, k) = (t.shape()[0], t.shape()[1]);
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
            return Err(Error::LabelOutOfRange {
                index,
                label,
                classes: k,
            });
        }
        let mut probs = vec![0.0; m * k];
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = t.row(i);
            row_softmax(row, &mut probs[i * k..(i + 1) * k]);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let out = Tensor::scalar(total / m as f64);
        let r = self.req1(logits);
        Ok(self.push(
            out,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            r,
        ))
    }

    /// Row-wise log-softmax of an `(m, k)` matrix.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 {
            return Err(bad_shape("log_softmax", t, "expected a matrix"));
        }
        let k = t.shape()[1];
        let mut out = Vec::with_capacity(t.len());
        for row in t.data().chunks(k) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        let r = self.req1(a);
        Ok(self.push(out, Op::LogSoftmax(a), r))
    }

    /// Per-row `KL(p ‖ q) = Σ_j p_j (log p_j − log q_j)` from log-probabilities.
    pub fn kl_div(&mut self, log_p: Var, log_q: Var) -> Result<Var> {
        self.same_shape("kl_div", log_p, log_q)?;
        let (tp, tq) = (self.value(log_p), self.value(log_q));
        if tp.shape().len() != 2 {
            return Err(bad_shape("kl_div", tp, "expected a matrix"));
        }
        let (m, k) = (tp.shape()[0], tp.shape()[1]);
        let out: Vec<f64> = (0..m)
            .map(|i| {
                (0..k)
                    .map(|j| {
                        let lp = tp.data()[i * k + j];
                        lp.exp() * (lp - tq.data()[i * k + j])
                    })
                    .sum()
            })
            .collect();
        let r = self.req2(log_p, log_q);
        Ok(self.push(Tensor::from_parts(vec![m], out), Op::Kl(log_p, log_q), r))
    }

    /// `D[i][j] = ‖a_i − a_j‖²` over the rows of an `(m, d)` matrix.
    pub fn pairwise_sq_dist(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 {
            return Err(bad_shape("pairwise_sq_dist", t, "expected a matrix"));
        }
        let (m, d) = (t.shape()[0], t.shape()[1]);
        let mut gram = vec![0.0; m * m];
        gemm(m, d, m, t.data(), false, t.data(), true, 0.0, &mut gram);
        let mut out = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    let v = gram[i * m + i] + gram[j * m + j] - 2.0 * gram[i * m + j];
                    out[i * m + j] = v.max(0.0);
                }
            }
        }
        let r = self.req1(a);
        Ok(self.push(Tensor::from_parts(vec![m, m], out), Op::PairwiseSqDist(a), r))
    }

    /// Median of the pairwise distances `sqrt(D[i][j])`, `i < j`, of a
    /// squared-distance matrix. Even counts average the two middle values.
    pub fn median_pairwise_dist(&mut self, d: Var) -> Result<Var> {
        let t = self.value(d);
        let s = t.shape();
        if s.len() != 2 || s[0] != s[1] || s[0] < 2 {
            return Err(bad_shape("median_pairwise_dist", t, "expected an m×m matrix, m >= 2"));
        }
        let m = s[0];
        let mut entries: Vec<(f64, usize)> = Vec::with_capacity(m * (m - 1) / 2);
        for i in 0..m {
            for j in i + 1..m {
                entries.push((t.data()[i * m + j], i * m + j));
            }
        }
        entries.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let n = entries.len();
        let picks: Vec<(usize, f64)> = if n % 2 == 1 {
            vec![(entries[n / 2].1, 1.0)]
        } else {
            vec![(entries[n / 2 - 1].1, 0.5), (entries[n / 2].1, 0.5)]
        };
        let value = picks.iter().map(|&(idx, w)| w * t.data()[idx].sqrt()).sum();
        let r = self.req1(d);
        Ok(self.push(Tensor::scalar(value), Op::MedianDist { d, picks }, r))
    }

    pub fn trace(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(bad_shape("trace", t, "expected a square matrix"));
        }
        let n = s[0];
        let value = (0..n).map(|i| t.data()[i * n + i]).sum();
        let r = self.req1(a);
        Ok(self.push(Tensor::scalar(value), Op::Trace(a), r))
    }

    /// Double centering `H K H` with `H = I − 11ᵀ/n`.
    pub fn center(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(bad_shape("center", t, "expected a square matrix"));
        }
        let out = Tensor::from_parts(s.to_vec(), double_center(t.data(), s[0]));
        let r = self.req1(a);
        Ok(self.push(out, Op::Center(a), r))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        let r = self.req1(a);
        self.push(out, Op::Clamp { x: a, lo, hi }, r)
    }

    /// Elementwise sign with `sign(0) = 0`; its derivative is zero.
    pub fn sign(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sign);
        let r = self.req1(a);
        self.push(out, Op::Sign(a), r)
    }

    /// Picks `a[i][idx[i]]` from every row of an `(m, k)` matrix.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 || t.shape()[0] != idx.len() {
            return Err(Error::ShapeMismatch {
                op: "pick",
                left: t.shape().to_vec(),
                right: vec![idx.len()],
            });
        }
        let k = t.shape()[1];
        if let Some((index, &label)) = idx.iter().enumerate().find(|(_, &j)| j >= k) {
            return Err(Error::LabelOutOfRange {
                index,
                label,
                classes: k,
            });
        }
        let out = idx.iter().enumerate().map(|(i, &j)| t.data()[i * k + j]).collect();
        let r = self.req1(a);
        Ok(self.push(
            Tensor::from_parts(vec![idx.len()], out),
            Op::Pick {
                x: a,
                idx: idx.to_vec(),
            },
            r,
        ))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let shape = self.values[root.0].shape();
        if !self.values[root.0].is_scalar() {
            return Err(Error::NonScalarRoot(shape.to_vec()));
        }
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        self.backward_done = true;
        if !self.requires[root.0] {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![1.0]);
        let Graph {
            values,
            ops,
            requires,
            grads,
            ..
        } = self;
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            let mut send = |v: Var, contribution: Vec<f64>| {
                if requires[v.0] {
                    accumulate(&mut grads[v.0], contribution);
                }
            };
            let val = |v: Var| &values[v.0];
            match &ops[i] {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g.clone());
                }
                Op::Sub(a, b) => {
                    send(*a, g.clone());
                    send(*b, g.iter().map(|x| -x).collect());
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (val(*a).data(), val(*b).data());
                    send(*a, g.iter().zip(tb).map(|(g, y)| g * y).collect());
                    send(*b, g.iter().zip(ta).map(|(g, x)| g * x).collect());
                }
                Op::Scale(a, f) => send(*a, g.iter().map(|x| x * f).collect()),
                Op::AddScalar(a) => send(*a, g.clone()),
                Op::MulBy(a, s) => {
                    let sv = val(*s).item();
                    let ta = val(*a).data();
                    send(*a, g.iter().map(|x| x * sv).collect());
                    send(*s, vec![g.iter().zip(ta).map(|(g, x)| g * x).sum()]);
                }
                Op::DivBy(a, s) => {
                    let sv = val(*s).item();
                    let ta = val(*a).data();
                    send(*a, g.iter().map(|x| x / sv).collect());
                    let ds = -g.iter().zip(ta).map(|(g, x)| g * x).sum::<f64>() / (sv * sv);
                    send(*s, vec![ds]);
                }
                Op::Matmul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    if requires[a.0] {
                        let mut da = vec![0.0; m * k];
                        gemm(m, n, k, &g, false, tb.data(), true, 0.0, &mut da);
                        send(*a, da);
                    }
                    if requires[b.0] {
                        let mut db = vec![0.0; k * n];
                        gemm(k, m, n, ta.data(), true, &g, false, 0.0, &mut db);
                        send(*b, db);
                    }
                }
                Op::Transpose(a) => {
                    let s = val(*a).shape();
                    send(*a, transpose_data(&g, s[1], s[0]));
                }
                Op::AddRow(a, row) => {
                    let n = val(*row).len();
                    let mut dr = vec![0.0; n];
                    for chunk in g.chunks(n) {
                        for (d, x) in dr.iter_mut().zip(chunk) {
                            *d += x;
                        }
                    }
                    send(*a, g.clone());
                    send(*row, dr);
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    geom,
                    cols,
                    out_c,
                } => {
                    let plane = geom.oh * geom.ow;
                    let ncols = geom.col_cols();
                    let mut gp = vec![0.0; out_c * ncols];
                    for o in 0..*out_c {
                        for n in 0..geom.n {
                            let src = &g[(n * out_c + o) * plane..(n * out_c + o + 1) * plane];
                            gp[o * ncols + n * plane..o * ncols + (n + 1) * plane].copy_from_slice(src);
                        }
                    }
                    if let Some(bv) = b {
                        if requires[bv.0] {
                            let db = gp.chunks(ncols).map(|r| r.iter().sum()).collect();
                            send(*bv, db);
                        }
                    }
                    let krows = geom.col_rows();
                    if requires[w.0] {
                        let mut dw = vec![0.0; out_c * krows];
                        gemm(*out_c, ncols, krows, &gp, false, cols, true, 0.0, &mut dw);
                        send(*w, dw);
                    }
                    if requires[x.0] {
                        let mut dcols = vec![0.0; krows * ncols];
                        gemm(krows, *out_c, ncols, val(*w).data(), true, &gp, false, 0.0, &mut dcols);
                        let mut dx = vec![0.0; val(*x).len()];
                        col2im(&dcols, geom, &mut dx);
                        send(*x, dx);
                    }
                }
                Op::Relu(a) => {
                    let ta = val(*a).data();
                    send(
                        *a,
                        g.iter().zip(ta).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
                    );
                }
                Op::MaxPool2 { x, argmax } => {
                    let mut dx = vec![0.0; val(*x).len()];
                    for (gv, &idx) in g.iter().zip(argmax) {
                        dx[idx] += gv;
                    }
                    send(*x, dx);
                }
                Op::Reshape(a) => send(*a, g.clone()),
                Op::Sum(a) => send(*a, vec![g[0]; val(*a).len()]),
                Op::Mean(a) => {
                    let n = val(*a).len();
                    send(*a, vec![g[0] / n as f64; n]);
                }
                Op::Exp(a) => {
                    let out = values[i].data();
                    send(*a, g.iter().zip(out).map(|(g, y)| g * y).collect());
                }
                Op::Log(a) => {
                    let ta = val(*a).data();
                    send(*a, g.iter().zip(ta).map(|(g, x)| g / x).collect());
                }
                Op::SoftmaxCe { logits, labels, probs } => {
                    let m = labels.len();
                    let k = probs.len() / m;
                    let scale = g[0] / m as f64;
                    let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (row, &y) in labels.iter().enumerate() {
                        d[row * k + y] -= scale;
                    }
                    send(*logits, d);
                }
                Op::LogSoftmax(a) => {
                    let out = &values[i];
                    let k = out.shape()[1];
                    let mut d = vec![0.0; out.len()];
                    for ((dr, gr), yr) in d.chunks_mut(k).zip(g.chunks(k)).zip(out.data().chunks(k)) {
                        let total: f64 = gr.iter().sum();
                        for ((dv, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                            *dv = gv - yv.exp() * total;
                        }
                    }
                    send(*a, d);
                }
                Op::Kl(lp, lq) => {
                    let (tp, tq) = (val(*lp), val(*lq));
                    let k = tp.shape()[1];
                    let mut dp = vec![0.0; tp.len()];
                    let mut dq = vec![0.0; tp.len()];
                    for idx in 0..tp.len() {
                        let gi = g[idx / k];
                        let lpv = tp.data()[idx];
                        let p = lpv.exp();
                        dp[idx] = gi * p * (lpv - tq.data()[idx] + 1.0);
                        dq[idx] = -gi * p;
                    }
                    send(*lp, dp);
                    send(*lq, dq);
                }
                Op::PairwiseSqDist(a) => {
                    let ta = val(*a);
                    let (m, d) = (ta.shape()[0], ta.shape()[1]);
                    let dist = values[i].data();
                    // dA = 2 (diag(S·1) A − S A) with S = G + Gᵀ restricted to
                    // entries that were not clamped.
                    let mut s = vec![0.0; m * m];
                    for r in 0..m {
                        for c in 0..m {
                            if r != c {
                                let gv = if dist[r * m + c] > 0.0 { g[r * m + c] } else { 0.0 };
                                s[r * m + c] += gv;
                                s[c * m + r] += gv;
                            }
                        }
                    }
                    let mut sa = vec![0.0; m * d];
                    gemm(m, m, d, &s, false, ta.data(), false, 0.0, &mut sa);
                    let mut da = vec![0.0; m * d];
                    for r in 0..m {
                        let rs: f64 = s[r * m..(r + 1) * m].iter().sum();
                        for c in 0..d {
                            da[r * d + c] = 2.0 * (rs * ta.data()[r * d + c] - sa[r * d + c]);
                        }
                    }
                    send(*a, da);
                }
                Op::MedianDist { d, picks } => {
                    let td = val(*d);
                    let mut dd = vec![0.0; td.len()];
                    for &(idx, w) in picks {
                        let v = td.data()[idx];
                        if v > 0.0 {
                            dd[idx] += g[0] * w * 0.5 / v.sqrt();
                        }
                    }
                    send(*d, dd);
                }
                Op::Trace(a) => {
                    let n = val(*a).shape()[0];
                    let mut d = vec![0.0; n * n];
                    for j in 0..n {
                        d[j * n + j] = g[0];
                    }
                    send(*a, d);
                }
                Op::Center(a) => {
                    let n = val(*a).shape()[0];
                    send(*a, double_center(&g, n));
                }
                Op::Clamp { x, lo, hi } => {
                    let tx = val(*x).data();
                    send(
                        *x,
                        g.iter()
                            .zip(tx)
                            .map(|(g, &v)| if v >= *lo && v <= *hi { *g } else { 0.0 })
                            .collect(),
                    );
                }
                Op::Sign(a) => send(*a, vec![0.0; g.len()]),
                Op::Pick { x, idx } => {
                    let tx = val(*x);
                    let k = tx.shape()[1];
                    let mut d = vec![0.0; tx.len()];
                    for (row, &j) in idx.iter().enumerate() {
                        d[row * k + j] = g[row];
                    }
                    send(*x, d);
                }
            }
            grads[i] = Some(g);
        }
        Ok(())
    }
}

pub(crate) fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn transpose_data(d: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; d.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = d[i * cols + j];
        }
    }
    out
}

fn double_center(k: &[f64], n: usize) -> Vec<f64> {
    let mut row_mean = vec![0.0; n];
    let mut col_mean = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            let v = k[i * n + j];
            row_mean[i] += v;
            col_mean[j] += v;
        }
    }
    let inv = 1.0 / n as f64;
    row_mean.iter_mut().for_each(|v| *v *= inv);
    col_mean.iter_mut().for_each(|v| *v *= inv);
    let grand = row_mean.iter().sum::<f64>() * inv;
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = k[i * n + j] - row_mean[i] - col_mean[j] + grand;
        }
    }
    out
}
