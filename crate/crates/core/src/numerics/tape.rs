//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! Every forward op appends one node to the [`Tape`]. Nodes only reference
//! earlier nodes, so a single reverse sweep from the loss visits each node
//! once and produces exact vector-Jacobian products.
//!
//! Leaves may borrow their value (`leaf_ref`) so that model parameters are
//! not copied onto the tape for every step.

use std::sync::atomic::{AtomicU32, Ordering};

use super::tensor::{gemm_acc, gemm_acc_at, gemm_acc_bt, Tensor};
use crate::error::{shape_err, Error, Result};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx as usize
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    /// Second operand may be a row vector broadcast across rows.
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Exp(usize),
    Log(usize),
    Softplus(usize),
    Silu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Square(usize),
    Sum(usize),
    Mean(usize),
    SumLast(usize),
    LogSumExpLast(usize),
    SoftmaxLast(usize),
    SliceCols { src: usize, start: usize },
    ConcatCols(Vec<usize>),
    Transpose(usize),
    ScaleRows(usize, usize),
    RmsNorm(usize),
    Reshape(usize),
    Clamp { src: usize, lo: f64, hi: f64 },
}

enum Value<'p> {
    Owned(Tensor),
    Borrowed(&'p Tensor),
}

impl Value<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
}

/// Append-only record of a forward computation.
pub struct Tape<'p> {
    id: u32,
    nodes: Vec<Node<'p>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient of a scalar loss with respect to every node on the tape.
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index()).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zero-filled when the loss does not depend on it.
    pub fn wrt(&self, v: Var, tape: &Tape<'_>) -> Result<Tensor> {
        let shape = tape.value(v)?.shape().to_vec();
        Ok(self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&shape)))
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub mod scalar {
    //! Scalar reference forms of the pointwise ops.
    pub fn softplus(x: f64) -> f64 {
        super::softplus(x)
    }
    pub fn sigmoid(x: f64) -> f64 {
        super::sigmoid(x)
    }
    pub fn silu(x: f64) -> f64 {
        x * super::sigmoid(x)
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index() >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(v.index())
    }

    fn val(&self, i: usize) -> &Tensor {
        self.nodes[i].value.get()
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        let i = self.idx(v)?;
        Ok(self.val(i))
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        value.check_finite(name)?;
        self.push_unchecked(Value::Owned(value), op)
    }

    fn push_unchecked(&mut self, value: Value<'p>, op: Op) -> Result<Var> {
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node { value, op });
        Ok(Var { tape: self.id, idx })
    }

    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, "leaf")
    }

    /// Leaf that borrows its value for the lifetime of the tape.
    pub fn leaf_ref(&mut self, value: &'p Tensor) -> Result<Var> {
        value.check_finite("leaf")?;
        self.push_unchecked(Value::Borrowed(value), Op::Leaf)
    }

    fn unary(
        &mut self,
        x: Var,
        name: &'static str,
        op: impl FnOnce(usize) -> Op,
        f: impl Fn(f64) -> f64,
    ) -> Result<Var> {
        let i = self.idx(x)?;
        let out = self.val(i).map(f);
        self.push(out, op(i), name)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (self.val(ia), self.val(ib));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return shape_err("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        gemm_acc(ta.data(), tb.data(), &mut out, m, k, n);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(ia, ib), "matmul")
    }

    fn binary_broadcast(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (self.val(ia), self.val(ib));
        let data: Vec<f64> = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else if is_row_broadcast(ta, tb) {
            let n = tb.len();
            ta.data()
                .iter()
                .enumerate()
                .map(|(j, &x)| f(x, tb.data()[j % n]))
                .collect()
        } else {
            return shape_err(name, format!("{:?} vs {:?}", ta.shape(), tb.shape()));
        };
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, op(ia, ib), name)
    }

    /// Elementwise sum; `b` may be a row vector added to every row of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_broadcast(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_broadcast(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (self.val(ia), self.val(ib));
        if ta.shape() != tb.shape() {
            return shape_err("mul", format!("{:?} vs {:?}", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, Op::Mul(ia, ib), "mul")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, "scale", |i| Op::Scale(i, c), |v| v * c)
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, "offset", Op::Offset, |v| v + c)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "exp", Op::Exp, f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "log", Op::Log, f64::ln)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "softplus", Op::Softplus, softplus)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "silu", Op::Silu, |v| v * sigmoid(v))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "tanh", Op::Tanh, f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "sigmoid", Op::Sigmoid, sigmoid)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "square", Op::Square, |v| v * v)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(x, "clamp", |src| Op::Clamp { src, lo, hi }, |v| v.clamp(lo, hi))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let i = self.idx(x)?;
        let s = self.val(i).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(i), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let i = self.idx(x)?;
        let t = self.val(i);
        if t.is_empty() {
            return shape_err("mean", "empty input");
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(i), "mean")
    }

    /// Row sums of `[m, n]`, returned as a `[1, m]` row.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let i = self.idx(x)?;
        let t = self.val(i);
        let sums = (0..t.rows()).map(|r| t.row_slice(r).iter().sum()).collect();
        self.push(Tensor::row(sums), Op::SumLast(i), "sum_last")
    }

    /// Stable `log Σ_j exp(x[r, j])` per row, returned as a `[1, m]` row.
    pub fn logsumexp_last(&mut self, x: Var) -> Result<Var> {
        let i = self.idx(x)?;
        let t = self.val(i);
        let out = (0..t.rows())
            .map(|r| {
                let row = t.row_slice(r);
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
            })
            .collect();
        self.push(Tensor::row(out), Op::LogSumExpLast(i), "logsumexp_last")
    }

    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let i = self.idx(x)?;
        let t = self.val(i);
        let mut out = Vec::with_capacity(t.len());
        for r in 0..t.rows() {
            let row = t.row_slice(r);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            out.extend(e.into_iter().map(|v| v / z));
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        self.push(out, Op::SoftmaxLast(i), "softmax_last")
    }

    /// Columns `start..start + len` of every row.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let i = self.idx(x)?;
        let t = self.val(i);
        let (m, n) = (t.rows(), t.cols());
        if start + len > n {
            return shape_err("slice", format!("cols {start}..{} of {n}", start + len));
        }
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&t.row_slice(r)[start..start + len]);
        }
        let out = Tensor::new(vec![m, len], data)?;
        self.push(out, Op::SliceCols { src: i, start }, "slice")
    }

    /// Column-wise concatenation of tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return shape_err("concat", "no inputs");
        }
        let ids = parts
            .iter()
            .map(|&p| self.idx(p))
            .collect::<Result<Vec<_>>>()?;
        let m = self.val(ids[0]).rows();
        if ids.iter().any(|&i| self.val(i).rows() != m) {
            return shape_err("concat", "row counts differ");
        }
        let n: usize = ids.iter().map(|&i| self.val(i).cols()).sum();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for &i in &ids {
                data.extend_from_slice(self.val(i).row_slice(r));
            }
        }
        let out = Tensor::new(vec![m, n], data)?;
        self.push(out, Op::ConcatCols(ids), "concat")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let i = self.idx(x)?;
        let t = self.val(i);
        let (m, n) = (t.rows(), t.cols());
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                data[c * m + r] = t.data()[r * n + c];
            }
        }
        let out = Tensor::new(vec![n, m], data)?;
        self.push(out, Op::Transpose(i), "transpose")
    }

    /// `out[i, j] = x[i, j] * s[i]` where `s` holds one factor per row.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (ix, is) = (self.idx(x)?, self.idx(s)?);
        let (tx, ts) = (self.val(ix), self.val(is));
        let (m, n) = (tx.rows(), tx.cols());
        if ts.len() != m {
            return shape_err("scale_rows", format!("{m} rows, {} factors", ts.len()));
        }
        let mut data = tx.data().to_vec();
        for r in 0..m {
            let f = ts.data()[r];
            data[r * n..(r + 1) * n].iter_mut().for_each(|v| *v *= f);
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(out, Op::ScaleRows(ix, is), "scale_rows")
    }

    /// Per-row `x / sqrt(mean(x^2) + RMS_EPS)`.
    pub fn rms_norm(&mut self, x: Var) -> Result<Var> {
        let i = self.idx(x)?;
        let t = self.val(i);
        let mut data = Vec::with_capacity(t.len());
        for r in 0..t.rows() {
            let row = t.row_slice(r);
            let inv = rms_inv(row);
            data.extend(row.iter().map(|v| v * inv));
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push(out, Op::RmsNorm(i), "rms_norm")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let i = self.idx(x)?;
        let out = self.val(i).clone().reshaped(shape)?;
        self.push(out, Op::Reshape(i), "reshape")
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let li = self.idx(loss)?;
        let lt = self.val(li);
        if lt.len() != 1 {
            return Err(Error::NotScalar(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[li] = Some(Tensor::filled(lt.shape(), 1.0));

        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.vjp(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn vjp(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let out = self.val(i);
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (ta, tb) = (self.val(a), self.val(b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                accumulate(grads, a, ta, |ga| gemm_acc_bt(gd, tb.data(), ga, m, k, n));
                accumulate(grads, b, tb, |gb| gemm_acc_at(ta.data(), gd, gb, m, k, n));
            }
            &Op::Add(a, b) | &Op::Sub(a, b) => {
                let sign = if matches!(self.nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let (ta, tb) = (self.val(a), self.val(b));
                accumulate(grads, a, ta, |ga| add_into(ga, gd, 1.0));
                let n = tb.len();
                accumulate(grads, b, tb, |gb| {
                    for (j, &v) in gd.iter().enumerate() {
                        gb[j % n] += sign * v;
                    }
                });
            }
            &Op::Mul(a, b) => {
                let (ta, tb) = (self.val(a), self.val(b));
                accumulate(grads, a, ta, |ga| {
                    for ((o, &gv), &bv) in ga.iter_mut().zip(gd).zip(tb.data()) {
                        *o += gv * bv;
                    }
                });
                accumulate(grads, b, tb, |gb| {
                    for ((o, &gv), &av) in gb.iter_mut().zip(gd).zip(ta.data()) {
                        *o += gv * av;
                    }
                });
            }
            &Op::Scale(a, c) => {
                accumulate(grads, a, self.val(a), |ga| add_into(ga, gd, c));
            }
            &Op::Offset(a) | &Op::Reshape(a) => {
                accumulate(grads, a, self.val(a), |ga| add_into(ga, gd, 1.0));
            }
            &Op::Exp(a) => pointwise(grads, a, self.val(a), gd, |_, y| y, out),
            &Op::Log(a) => pointwise(grads, a, self.val(a), gd, |x, _| 1.0 / x, out),
            &Op::Softplus(a) => pointwise(grads, a, self.val(a), gd, |x, _| sigmoid(x), out),
            &Op::Silu(a) => pointwise(
                grads,
                a,
                self.val(a),
                gd,
                |x, _| {
                    let s = sigmoid(x);
                    s * (1.0 + x * (1.0 - s))
                },
                out,
            ),
            &Op::Tanh(a) => pointwise(grads, a, self.val(a), gd, |_, y| 1.0 - y * y, out),
            &Op::Sigmoid(a) => pointwise(grads, a, self.val(a), gd, |_, y| y * (1.0 - y), out),
            &Op::Square(a) => pointwise(grads, a, self.val(a), gd, |x, _| 2.0 * x, out),
            &Op::Clamp { src, lo, hi } => pointwise(
                grads,
                src,
                self.val(src),
                gd,
                |x, _| if x >= lo && x <= hi { 1.0 } else { 0.0 },
                out,
            ),
            &Op::Sum(a) => {
                let s = gd[0];
                accumulate(grads, a, self.val(a), |ga| ga.iter_mut().for_each(|o| *o += s));
            }
            &Op::Mean(a) => {
                let ta = self.val(a);
                let s = gd[0] / ta.len() as f64;
                accumulate(grads, a, ta, |ga| ga.iter_mut().for_each(|o| *o += s));
            }
            &Op::SumLast(a) => {
                let ta = self.val(a);
                let n = ta.cols();
                accumulate(grads, a, ta, |ga| {
                    for (j, o) in ga.iter_mut().enumerate() {
                        *o += gd[j / n];
                    }
                });
            }
            &Op::LogSumExpLast(a) => {
                let ta = self.val(a);
                let n = ta.cols();
                accumulate(grads, a, ta, |ga| {
                    for (j, o) in ga.iter_mut().enumerate() {
                        let r = j / n;
                        *o += gd[r] * (ta.data()[j] - out.data()[r]).exp();
                    }
                });
            }
            &Op::SoftmaxLast(a) => {
                let ta = self.val(a);
                let n = ta.cols();
                accumulate(grads, a, ta, |ga| {
                    for r in 0..ta.rows() {
                        let y = out.row_slice(r);
                        let gr = &gd[r * n..(r + 1) * n];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            ga[r * n + c] += y[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            &Op::SliceCols { src, start } => {
                let ts = self.val(src);
                let (n, len) = (ts.cols(), out.cols());
                accumulate(grads, src, ts, |gs| {
                    for r in 0..out.rows() {
                        for c in 0..len {
                            gs[r * n + start + c] += gd[r * len + c];
                        }
                    }
                });
            }
            Op::ConcatCols(ids) => {
                let total = out.cols();
                let mut offset = 0;
                for &src in ids {
                    let ts = self.val(src);
                    let w = ts.cols();
                    accumulate(grads, src, ts, |gs| {
                        for r in 0..ts.rows() {
                            for c in 0..w {
                                gs[r * w + c] += gd[r * total + offset + c];
                            }
                        }
                    });
                    offset += w;
                }
            }
            &Op::Transpose(a) => {
                let ta = self.val(a);
                let (m, n) = (ta.rows(), ta.cols());
                accumulate(grads, a, ta, |ga| {
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] += gd[c * m + r];
                        }
                    }
                });
            }
            &Op::ScaleRows(x, s) => {
                let (tx, ts) = (self.val(x), self.val(s));
                let n = tx.cols();
                accumulate(grads, x, tx, |gx| {
                    for (j, o) in gx.iter_mut().enumerate() {
                        *o += gd[j] * ts.data()[j / n];
                    }
                });
                accumulate(grads, s, ts, |gs| {
                    for (j, &xv) in tx.data().iter().enumerate() {
                        gs[j / n] += gd[j] * xv;
                    }
                });
            }
            &Op::RmsNorm(a) => {
                let ta = self.val(a);
                let n = ta.cols();
                accumulate(grads, a, ta, |ga| {
                    for r in 0..ta.rows() {
                        let inv = rms_inv(ta.row_slice(r));
                        let y = out.row_slice(r);
                        let gr = &gd[r * n..(r + 1) * n];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for c in 0..n {
                            ga[r * n + c] += inv * (gr[c] - y[c] * dot);
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

pub const RMS_EPS: f64 = 1e-6;

fn rms_inv(row: &[f64]) -> f64 {
    let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
    1.0 / (ms + RMS_EPS).sqrt()
}

fn is_row_broadcast(a: &Tensor, b: &Tensor) -> bool {
    a.shape().len() == 2
        && b.len() == a.cols()
        && (b.shape() == [a.cols()] || b.shape() == [1, a.cols()])
}

fn add_into(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

fn accumulate(
    grads: &mut [Option<Tensor>],
    idx: usize,
    like: &Tensor,
    f: impl FnOnce(&mut [f64]),
) {
    let slot = grads[idx].get_or_insert_with(|| Tensor::zeros(like.shape()));
    f(slot.data_mut());
}

fn pointwise(
    grads: &mut [Option<Tensor>],
    idx: usize,
    input: &Tensor,
    g: &[f64],
    deriv: impl Fn(f64, f64) -> f64,
    out: &Tensor,
) {
    accumulate(grads, idx, input, |ga| {
        for (j, o) in ga.iter_mut().enumerate() {
            *o += g[j] * deriv(input.data()[j], out.data()[j]);
        }
    });
}
