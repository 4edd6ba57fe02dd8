//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every primitive in execution order. Calling
//! [`Graph::backward`] walks the tape in exact reverse order and accumulates
//! gradients additively into each input. Parameters are pulled in from a
//! borrowed [`ParamStore`] and appear once per graph no matter how often
//! they are used.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{gemm, Layout, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User-defined primitive with a hand-written backward rule.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input (or `None` when the input receives no
    /// gradient), given the upstream gradient of the output.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &Tensor)
        -> Vec<Option<Tensor>>;
}

/// Zero padding scheme for [`Graph::conv1d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output length `ceil(T / stride)`; zeros split evenly with the extra
    /// one on the right.
    Same,
    Valid,
}

/// Sequence length after a strided convolution, plus the left/right padding.
pub fn conv1d_geometry(
    t: usize,
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> Result<(usize, usize, usize)> {
    if stride == 0 || kernel == 0 {
        return Err(Error::InvalidArgument(
            "conv1d: stride and kernel must be positive".into(),
        ));
    }
    if t == 0 {
        return Err(Error::EmptyInput { op: "conv1d" });
    }
    let (pad_l, pad_r) = match padding {
        Padding::Valid => (0, 0),
        Padding::Same => {
            let out = t.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(t);
            (total / 2, total - total / 2)
        }
    };
    let padded = t + pad_l + pad_r;
    if padded < kernel {
        return Err(Error::InputTooShort {
            op: "conv1d",
            len: padded,
            kernel,
        });
    }
    Ok(((padded - kernel) / stride + 1, pad_l, pad_r))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Affine(Var, f64),
    ScaleBy(Var, Var),
    MulConst(Var, Tensor),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Tensor,
        count: usize,
    },
    Mse {
        pred: Var,
        target: Tensor,
    },
    Conv1d {
        x: Var,
        w: Var,
        patches: Tensor,
        stride: usize,
        pad_l: usize,
    },
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    Gather(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of a forward computation.
pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    grads: Vec<Option<Tensor>>,
    grad_enabled: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    /// A graph without parameters (inputs and constants only).
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            grads: Vec::new(),
            grad_enabled: true,
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Self {
            params: Some(params),
            ..Self::new()
        }
    }

    /// A graph that records values only; nothing requires a gradient.
    pub fn inference(params: &'p ParamStore) -> Self {
        Self {
            grad_enabled: false,
            ..Self::with_params(params)
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Pulls a parameter onto the graph. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self
            .params
            .expect("graph was created without a parameter store");
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param, !p.frozen);
        self.param_vars.insert(id, v);
        v
    }

    // ---------------------------------------------------------------- linear

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(out, Op::Transpose(a), rg)
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    fn check_row(&self, op: &'static str, a: Var, row: Var) -> Result<()> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.len() != ta.cols() || tr.rows() != 1 {
            return Err(Error::Shape {
                op,
                lhs: ta.shape().to_vec(),
                rhs: tr.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Adds a row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row("add_row", a, row)?;
        let mut out = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r) {
                *o += b;
            }
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    /// Multiplies every row of `a` element-wise by a row vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row("mul_row", a, row)?;
        let mut out = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r) {
                *o *= b;
            }
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(out, Op::MulRow(a, row), rg))
    }

    /// `scale * a + shift`, element-wise, with constant coefficients.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(a).map(|x| scale * x + shift);
        let rg = self.rg(&[a]);
        self.push(out, Op::Affine(a, scale), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    /// Multiplies `a` by a single-element variable `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::Shape {
                op: "scale_by",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let k = self.value(s).item();
        let out = self.value(a).map(|x| k * x);
        let rg = self.rg(&[a, s]);
        Ok(self.push(out, Op::ScaleBy(a, s), rg))
    }

    /// Element-wise product with a constant tensor (masks, dropout).
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        if c.len() != self.value(a).len() {
            return Err(Error::Shape {
                op: "mul_const",
                lhs: self.shape(a).to_vec(),
                rhs: c.shape().to_vec(),
            });
        }
        let out = self.value(a).zip_map(&c, |x, m| x * m);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::MulConst(a, c), rg))
    }

    /// Inverted dropout. `uniform` must yield samples in `[0, 1)`; the mask is
    /// drawn row-major so a seeded source replays the same mask.
    pub fn dropout(&mut self, a: Var, p: f64, mut uniform: impl FnMut() -> f64) -> Result<Var> {
        if p <= 0.0 {
            return Ok(a);
        }
        if p >= 1.0 {
            return Err(Error::InvalidArgument(format!(
                "dropout probability {p} must be below 1"
            )));
        }
        let keep = 1.0 / (1.0 - p);
        let shape = self.shape(a).to_vec();
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if uniform() < p { 0.0 } else { keep })
            .collect();
        self.mul_const(a, Tensor::new(shape, mask)?)
    }

    // ----------------------------------------------------------- activations

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let rg = self.rg(&[a]);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let rg = self.rg(&[a]);
        self.push(out, Op::Gelu(a), rg)
    }

    /// Row-wise softmax with max subtraction. Entries where `allowed` is false
    /// get probability exactly zero.
    pub fn softmax_rows_masked(&mut self, a: Var, allowed: Option<&[bool]>) -> Result<Var> {
        let x = self.value(a);
        if let Some(m) = allowed {
            if m.len() != x.len() {
                return Err(Error::Shape {
                    op: "softmax",
                    lhs: x.shape().to_vec(),
                    rhs: vec![m.len()],
                });
            }
        }
        let cols = x.cols();
        let mut out = Tensor::zeros(x.shape());
        for r in 0..x.rows() {
            let row = x.row(r);
            let ok = |j: usize| allowed.is_none_or(|m| m[r * cols + j]);
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if ok(j) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let dst = out.row_mut(r);
            let mut z = 0.0;
            for j in 0..cols {
                if ok(j) {
                    let e = (row[j] - max).exp();
                    dst[j] = e;
                    z += e;
                }
            }
            for v in dst.iter_mut() {
                *v /= z;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        self.softmax_rows_masked(a, None)
            .expect("unmasked softmax cannot fail")
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for r in 0..x.rows() {
            let lse = log_sum_exp(x.row(r));
            for v in out.row_mut(r) {
                *v -= lse;
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::LogSoftmax(a), rg)
    }

    /// Per-row normalization followed by an affine map `xhat * gain + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        self.check_row("layer_norm", x, gain)?;
        self.check_row("layer_norm", x, bias)?;
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let mut xhat = Tensor::zeros(xv.shape());
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (h, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *h = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut out = xhat.clone();
        for r in 0..rows {
            for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = *o * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    // ---------------------------------------------------------------- losses

    /// Mean negative log-likelihood over the positions whose target is not
    /// `ignore_index`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore_index: Option<usize>,
    ) -> Result<Var> {
        let x = self.value(logits);
        let (rows, classes) = (x.rows(), x.cols());
        if targets.len() != rows {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: x.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut probs = Tensor::zeros(x.shape());
        let mut kept = Vec::with_capacity(rows);
        let mut total = 0.0;
        let mut count = 0;
        for (r, &t) in targets.iter().enumerate() {
            if Some(t) == ignore_index {
                kept.push(None);
                continue;
            }
            if t >= classes {
                return Err(Error::TargetOutOfRange {
                    op: "cross_entropy",
                    target: t,
                    classes,
                });
            }
            let row = x.row(r);
            let lse = log_sum_exp(row);
            total += lse - row[t];
            for (p, v) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
            kept.push(Some(t));
            count += 1;
        }
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / count as f64),
            Op::CrossEntropy {
                logits,
                targets: kept,
                probs,
                count,
            },
            rg,
        ))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::Shape {
                op: "mse",
                lhs: p.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        if p.is_empty() {
            return Err(Error::EmptyInput { op: "mse" });
        }
        let n = p.len() as f64;
        let loss = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        let rg = self.rg(&[pred]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.clone(),
            },
            rg,
        ))
    }

    // ----------------------------------------------------------- convolution

    /// 1-D cross-correlation. `x` is T×C_in, `w` is `[C_out, C_in, K]`;
    /// the result is T'×C_out.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, padding: Padding) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.ndim() != 3 || xv.ndim() != 2 || wv.shape()[1] != xv.cols() {
            return Err(Error::Shape {
                op: "conv1d",
                lhs: xv.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        let (c_out, c_in, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
        let t = xv.rows();
        let (t_out, pad_l, _) = conv1d_geometry(t, k, stride, padding)?;
        let width = c_in * k;
        let mut patches = vec![0.0; t_out * width];
        for o in 0..t_out {
            let dst = &mut patches[o * width..(o + 1) * width];
            for kk in 0..k {
                let src = (o * stride + kk) as isize - pad_l as isize;
                if src < 0 || src as usize >= t {
                    continue;
                }
                let row = xv.row(src as usize);
                for c in 0..c_in {
                    dst[c * k + kk] = row[c];
                }
            }
        }
        let mut out = vec![0.0; t_out * c_out];
        gemm(
            t_out,
            width,
            c_out,
            &patches,
            Layout::RowMajor,
            wv.data(),
            Layout::Transposed,
            &mut out,
            0.0,
        );
        let rg = self.rg(&[x, w]);
        let patches = Tensor::matrix(t_out, width, patches)?;
        Ok(self.push(
            Tensor::matrix(t_out, c_out, out)?,
            Op::Conv1d {
                x,
                w,
                patches,
                stride,
                pad_l,
            },
            rg,
        ))
    }

    // -------------------------------------------------------------- reshaping

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        if start > end || end > x.cols() {
            return Err(Error::InvalidArgument(format!(
                "slice_cols {start}..{end} out of bounds for {:?}",
                x.shape()
            )));
        }
        let rows = x.rows();
        let mut out = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            out.extend_from_slice(&x.row(r)[start..end]);
        }
        let rg = self.rg(&[a]);
        let out = Tensor::matrix(rows, end - start, out)?;
        Ok(self.push(out, Op::SliceCols(a, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            cols += self.value(p).cols();
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = self.rg(parts);
        let out = Tensor::matrix(rows, cols, out)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        if start > end || end > x.rows() || x.ndim() != 2 {
            return Err(Error::InvalidArgument(format!(
                "slice_rows {start}..{end} out of bounds for {:?}",
                x.shape()
            )));
        }
        let out = x.select_rows(start, end);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SliceRows(a, start), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            rows += v.rows();
            out.extend_from_slice(v.data());
        }
        let rg = self.rg(parts);
        let out = Tensor::matrix(rows, cols, out)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Row lookup (embedding): output row `i` is row `ids[i]` of `table`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let cols = t.cols();
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            if i >= t.rows() {
                return Err(Error::TargetOutOfRange {
                    op: "gather_rows",
                    target: i,
                    classes: t.rows(),
                });
            }
            out.extend_from_slice(t.row(i));
        }
        let rg = self.rg(&[table]);
        let out = Tensor::matrix(ids.len(), cols, out)?;
        Ok(self.push(out, Op::Gather(table, ids.to_vec()), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Tensor::scalar(x.sum() / x.len() as f64);
        let rg = self.rg(&[a]);
        self.push(out, Op::Mean(a), rg)
    }

    /// Records a primitive whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Var {
        let rg = self.rg(inputs);
        self.push(value, Op::Custom(inputs.to_vec(), op), rg)
    }

    // -------------------------------------------------------------- backward

    /// Reverse sweep from a single-element `root`. Gradients of leaves and
    /// parameters remain available through [`Graph::grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward root must be a scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(n, || None);
        if !self.nodes[root.0].requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[root.0] = Some(Tensor::full(self.shape(root), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
            if matches!(node.op, Op::Leaf | Op::Param) {
                grads[i] = Some(g);
            }
        }
        self.grads = grads;
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of every parameter that took part in the computation.
    pub fn param_grads(&self) -> Vec<(ParamId, &Tensor)> {
        let mut out: Vec<(ParamId, &Tensor)> = self
            .param_vars
            .iter()
            .filter_map(|(&id, &v)| self.grad(v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    /// Consumes the graph, returning owned parameter gradients (the graph
    /// borrows the store, so gradients must be detached before updating it).
    pub fn into_param_grads(mut self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = self
            .param_vars
            .iter()
            .filter_map(|(&id, &v)| self.grads.get_mut(v.0).and_then(Option::take).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    /// Adds this graph's parameter gradients into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (id, g) in self.param_grads() {
            store.accumulate_grad(id, g);
        }
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), Layout::RowMajor, bv.data(), Layout::Transposed, &mut da, 0.0);
                    acc(*a, Tensor::matrix(m, k, da)?);
                }
                if wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), Layout::Transposed, g.data(), Layout::RowMajor, &mut db, 0.0);
                    acc(*b, Tensor::matrix(k, n, db)?);
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(*a, g.zip_map(val(*b), |x, y| x * y));
                }
                if wants(*b) {
                    acc(*b, g.zip_map(val(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                if wants(*row) {
                    let mut dr = Tensor::zeros(val(*row).shape());
                    for r in 0..g.rows() {
                        for (d, x) in dr.data_mut().iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    acc(*row, dr);
                }
            }
            Op::MulRow(a, row) => {
                let rv = val(*row).data();
                if wants(*a) {
                    let mut da = g.clone();
                    for r in 0..da.rows() {
                        for (d, s) in da.row_mut(r).iter_mut().zip(rv) {
                            *d *= s;
                        }
                    }
                    acc(*a, da);
                }
                if wants(*row) {
                    let av = val(*a);
                    let mut dr = Tensor::zeros(val(*row).shape());
                    for r in 0..g.rows() {
                        for ((d, x), y) in dr.data_mut().iter_mut().zip(g.row(r)).zip(av.row(r)) {
                            *d += x * y;
                        }
                    }
                    acc(*row, dr);
                }
            }
            Op::Affine(a, s) => acc(*a, g.map(|x| s * x)),
            Op::ScaleBy(a, s) => {
                let k = val(*s).item();
                if wants(*a) {
                    acc(*a, g.map(|x| k * x));
                }
                if wants(*s) {
                    let d: f64 = g.data().iter().zip(val(*a).data()).map(|(x, y)| x * y).sum();
                    acc(*s, Tensor::full(val(*s).shape(), d));
                }
            }
            Op::MulConst(a, c) => acc(*a, g.zip_map(c, |x, m| x * m)),
            Op::Sigmoid(a) => acc(*a, g.zip_map(&node.value, |x, y| x * y * (1.0 - y))),
            Op::Tanh(a) => acc(*a, g.zip_map(&node.value, |x, y| x * (1.0 - y * y))),
            Op::Gelu(a) => acc(*a, g.zip_map(val(*a), |x, z| x * gelu_grad(z))),
            Op::Softmax(a) => {
                let y = &node.value;
                let mut da = Tensor::zeros(y.shape());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for ((d, p), q) in da.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *d = p * (q - dot);
                    }
                }
                acc(*a, da);
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let mut da = Tensor::zeros(y.shape());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let s: f64 = gr.iter().sum();
                    for ((d, ly), q) in da.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *d = q - ly.exp() * s;
                    }
                }
                acc(*a, da);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = val(*gain).data();
                let cols = xhat.cols();
                if wants(*gain) || wants(*bias) {
                    let mut dg = Tensor::zeros(val(*gain).shape());
                    let mut db = Tensor::zeros(val(*bias).shape());
                    for r in 0..xhat.rows() {
                        for j in 0..cols {
                            dg.data_mut()[j] += g.get(r, j) * xhat.get(r, j);
                            db.data_mut()[j] += g.get(r, j);
                        }
                    }
                    acc(*gain, dg);
                    acc(*bias, db);
                }
                if wants(*x) {
                    let mut dx = Tensor::zeros(xhat.shape());
                    let n = cols as f64;
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let dxhat: Vec<f64> = (0..cols).map(|j| g.get(r, j) * gv[j]).collect();
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(xhat.row(r)).map(|(a, b)| a * b).sum();
                        for (j, d) in dx.row_mut(r).iter_mut().enumerate() {
                            *d = inv / n * (n * dxhat[j] - s1 - xhat.get(r, j) * s2);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let scale = g.item() / *count as f64;
                let mut d = probs.clone();
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = t {
                        d.row_mut(r)[*t] -= 1.0;
                    }
                }
                d.scale_assign(scale);
                acc(*logits, d);
            }
            Op::Mse { pred, target } => {
                let k = 2.0 * g.item() / target.len() as f64;
                acc(*pred, val(*pred).zip_map(target, |p, t| k * (p - t)));
            }
            Op::Conv1d {
                x,
                w,
                patches,
                stride,
                pad_l,
            } => {
                let wv = val(*w);
                let (c_out, c_in, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
                let t_out = g.rows();
                let width = c_in * k;
                if wants(*w) {
                    let mut dw = vec![0.0; c_out * width];
                    gemm(c_out, t_out, width, g.data(), Layout::Transposed, patches.data(), Layout::RowMajor, &mut dw, 0.0);
                    acc(*w, Tensor::new(wv.shape().to_vec(), dw)?);
                }
                if wants(*x) {
                    let mut dp = vec![0.0; t_out * width];
                    gemm(t_out, c_out, width, g.data(), Layout::RowMajor, wv.data(), Layout::RowMajor, &mut dp, 0.0);
                    let xv = val(*x);
                    let t = xv.rows();
                    let mut dx = Tensor::zeros(xv.shape());
                    for o in 0..t_out {
                        let src = &dp[o * width..(o + 1) * width];
                        for kk in 0..k {
                            let pos = (o * stride + kk) as isize - *pad_l as isize;
                            if pos < 0 || pos as usize >= t {
                                continue;
                            }
                            let dst = dx.row_mut(pos as usize);
                            for c in 0..c_in {
                                dst[c] += src[c * k + kk];
                            }
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::SliceCols(a, start) => {
                let av = val(*a);
                let mut da = Tensor::zeros(av.shape());
                let w = g.cols();
                for r in 0..g.rows() {
                    da.row_mut(r)[*start..start + w].copy_from_slice(g.row(r));
                }
                acc(*a, da);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = val(p);
                    let w = pv.cols();
                    if wants(p) {
                        let mut dp = Tensor::zeros(pv.shape());
                        for r in 0..g.rows() {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        acc(p, dp);
                    }
                    offset += w;
                }
            }
            Op::SliceRows(a, start) => {
                let av = val(*a);
                let mut da = Tensor::zeros(av.shape());
                let c = av.cols();
                da.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                acc(*a, da);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = val(p);
                    let n = pv.len();
                    if wants(p) {
                        let dp = Tensor::new(pv.shape().to_vec(), g.data()[offset..offset + n].to_vec())?;
                        acc(p, dp);
                    }
                    offset += n;
                }
            }
            Op::Gather(table, ids) => {
                let tv = val(*table);
                let mut dt = Tensor::zeros(tv.shape());
                for (r, &i) in ids.iter().enumerate() {
                    for (d, x) in dt.row_mut(i).iter_mut().zip(g.row(r)) {
                        *d += x;
                    }
                }
                acc(*table, dt);
            }
            Op::Sum(a) => acc(*a, Tensor::full(val(*a).shape(), g.item())),
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                acc(*a, Tensor::full(val(*a).shape(), g.item() / n));
            }
            Op::Custom(inputs, op) => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let outs = op.backward(&ins, &node.value, g);
                for (&v, d) in inputs.iter().zip(outs) {
                    if let Some(d) = d {
                        if d.shape() != val(v).shape() {
                            return Err(Error::Shape {
                                op: op.name(),
                                lhs: val(v).shape().to_vec(),
                                rhs: d.shape().to_vec(),
                            });
                        }
                        acc(v, d);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Numerically stable `log(sum(exp(xs)))`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
