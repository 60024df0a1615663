//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] records every operation of one forward pass in execution
//! order, which is by construction a topological order of the graph.
//! [`Tape::backward`] walks the record in reverse, deposits parameter
//! gradients into the borrowed [`Tensor`]s and clears the tape.

use std::collections::HashMap;

use crate::error::{dim_err, Result, TensorError};
use crate::kernels::{self, ConvGeometry};
use crate::layers::RunningStats;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum Value<'a> {
    Owned(Vec<f64>),
    Borrowed(&'a [f64]),
}

impl Value<'_> {
    fn as_slice(&self) -> &[f64] {
        match self {
            Value::Owned(v) => v,
            Value::Borrowed(v) => v,
        }
    }
}

enum Op {
    Leaf,
    Dense {
        x: usize,
        w: usize,
        b: usize,
        batch: usize,
        fan_in: usize,
        fan_out: usize,
    },
    Conv2d {
        x: usize,
        k: usize,
        bias: Option<usize>,
        n: usize,
        c_out: usize,
        geom: ConvGeometry,
    },
    ConvTranspose2d {
        x: usize,
        k: usize,
        bias: Option<usize>,
        n: usize,
        c_in: usize,
        geom: ConvGeometry,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        n: usize,
        c: usize,
        spatial: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Relu(usize),
    LeakyRelu(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Abs(usize),
    Square(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Clamp(usize, f64, f64),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Minimum(usize, usize),
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    ConcatCols {
        a: usize,
        b: usize,
        rows: usize,
        ca: usize,
        cb: usize,
    },
    LogSoftmax {
        x: usize,
        cols: usize,
    },
    Softmax {
        x: usize,
        cols: usize,
    },
    GatherRows {
        x: usize,
        idx: Vec<usize>,
        cols: usize,
    },
    BceWithLogits {
        x: usize,
        target: f64,
    },
}

struct Node<'a> {
    shape: Vec<usize>,
    value: Value<'a>,
    op: Op,
    requires_grad: bool,
    param: Option<&'a Tensor>,
    watched: bool,
}

/// Gradients of watched (non-parameter) inputs, returned by
/// [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    inputs: HashMap<Var, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.inputs.get(&v).map(Vec::as_slice)
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.inputs.remove(&v)
    }
}

pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    grad_enabled: bool,
    consumed: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return dim_err(op, a, b);
    }
    Ok(())
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            consumed: false,
        }
    }

    /// A tape that computes values only; nothing requires grad.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node<'a>> {
        self.nodes
            .get(v.0)
            .ok_or_else(|| TensorError::Contract(format!("variable {} is not on this tape", v.0)))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.as_slice()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Copies a recorded value out as a fresh tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v), self.value(v).to_vec()).expect("recorded shape")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        self.consumed = false;
        let requires_grad = requires_grad && self.grad_enabled;
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            value: Value::Owned(value),
            op,
            requires_grad,
            param: None,
            watched: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant (no gradient flows into it).
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        Ok(self.constant(Tensor::new(shape, data)?))
    }

    /// Records an input whose gradient is reported by [`Tape::backward`].
    pub fn watch(&mut self, t: Tensor) -> Var {
        let v = self.push(t.shape().to_vec(), t.into_data(), Op::Leaf, true);
        self.nodes[v.0].watched = self.grad_enabled;
        v
    }

    /// Records a borrowed parameter. Gradients land in its grad slot when
    /// the tensor requires grad.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.consumed = false;
        let requires_grad = t.requires_grad() && self.grad_enabled;
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Value::Borrowed(t.data()),
            op: Op::Leaf,
            requires_grad,
            param: requires_grad.then_some(t),
            watched: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies a value into a new constant node, cutting the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.tensor(v);
        self.constant(t)
    }

    /// `y = x·w + b` for `x: [batch, in]`, `w: [in, out]`, `b: [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return dim_err("dense", xs, ws);
        }
        if bs != [ws[1]] {
            return dim_err("dense bias", ws, bs);
        }
        let (batch, fan_in, fan_out) = (xs[0], xs[1], ws[1]);
        let mut y = vec![0.0; batch * fan_out];
        for row in y.chunks_exact_mut(fan_out) {
            row.copy_from_slice(self.value(b));
        }
        kernels::gemm(batch, fan_in, fan_out, self.value(x), false, self.value(w), false, &mut y, true);
        let rg = self.rg(x.0) || self.rg(w.0) || self.rg(b.0);
        Ok(self.push(
            vec![batch, fan_out],
            y,
            Op::Dense {
                x: x.0,
                w: w.0,
                b: b.0,
                batch,
                fan_in,
                fan_out,
            },
            rg,
        ))
    }

    fn check_bias(&self, op: &'static str, bias: Option<Var>, channels: usize) -> Result<()> {
        if let Some(b) = bias {
            if self.shape(b) != [channels] {
                return dim_err(op, self.shape(b), &[channels]);
            }
        }
        Ok(())
    }

    fn add_channel_bias(&self, y: &mut [f64], bias: Option<Var>, channels: usize, spatial: usize) {
        if let Some(b) = bias {
            let bv = self.value(b);
            for (i, plane) in y.chunks_exact_mut(spatial).enumerate() {
                let c = bv[i % channels];
                plane.iter_mut().for_each(|v| *v += c);
            }
        }
    }

    /// Cross-correlation of `x: [n, c_in, h, w]` with `k: [c_out, c_in, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, k: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] {
            return dim_err("conv2d", &xs, &ks);
        }
        let geom = ConvGeometry::conv(xs[1], xs[2], xs[3], ks[2], ks[3], stride, pad)
            .ok_or(TensorError::Dimension {
                op: "conv2d (kernel larger than padded input)",
                lhs: xs.clone(),
                rhs: ks.clone(),
            })?;
        let (n, c_out) = (xs[0], ks[0]);
        self.check_bias("conv2d bias", bias, c_out)?;
        let mut y = kernels::conv2d_forward(self.value(x), n, self.value(k), c_out, &geom);
        self.add_channel_bias(&mut y, bias, c_out, geom.col_cols());
        let rg = self.rg(x.0) || self.rg(k.0) || bias.is_some_and(|b| self.rg(b.0));
        Ok(self.push(
            vec![n, c_out, geom.oh, geom.ow],
            y,
            Op::Conv2d {
                x: x.0,
                k: k.0,
                bias: bias.map(|b| b.0),
                n,
                c_out,
                geom,
            },
            rg,
        ))
    }

    /// Transposed convolution of `x: [n, c_in, h, w]` with
    /// `k: [c_in, c_out, kh, kw]`; output side `(h−1)·stride − 2·pad + kh`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        k: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[0] {
            return dim_err("conv_transpose2d", &xs, &ks);
        }
        let geom = kernels::conv_transpose_geometry(ks[1], xs[2], xs[3], ks[2], ks[3], stride, pad)
            .ok_or(TensorError::Dimension {
                op: "conv_transpose2d (inconsistent geometry)",
                lhs: xs.clone(),
                rhs: ks.clone(),
            })?;
        let (n, c_in, c_out) = (xs[0], xs[1], ks[1]);
        self.check_bias("conv_transpose2d bias", bias, c_out)?;
        let mut y = kernels::conv_transpose_forward(self.value(x), n, c_in, self.value(k), &geom);
        self.add_channel_bias(&mut y, bias, c_out, geom.h * geom.w);
        let rg = self.rg(x.0) || self.rg(k.0) || bias.is_some_and(|b| self.rg(b.0));
        Ok(self.push(
            vec![n, c_out, geom.h, geom.w],
            y,
            Op::ConvTranspose2d {
                x: x.0,
                k: k.0,
                bias: bias.map(|b| b.0),
                n,
                c_in,
                geom,
            },
            rg,
        ))
    }

    /// Per-channel batch normalization of `[n, c]` or `[n, c, h, w]`.
    ///
    /// Train mode normalizes with batch statistics and folds them into
    /// `running` with the given momentum; eval mode uses `running`.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &RunningStats,
        mode: Mode,
        momentum: f64,
        eps: f64,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 && xs.len() != 4 {
            return dim_err("batch_norm", &xs, &[]);
        }
        let (n, c) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return dim_err("batch_norm affine", &xs, self.shape(gamma));
        }
        if running.channels() != c {
            return dim_err("batch_norm running stats", &xs, &[running.channels()]);
        }
        let train = mode == Mode::Train;
        if train && n < 2 {
            return Err(TensorError::DegenerateBatch(n));
        }
        let xv = self.value(x);
        let (mean, var) = if train {
            let count = (n * spatial) as f64;
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * spatial;
                    mean[ch] += xv[off..off + spatial].iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= count);
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * spatial;
                    let m = mean[ch];
                    var[ch] += xv[off..off + spatial].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= count);
            running.update(&mean, &var, count, momentum);
            (mean, var)
        } else {
            running.snapshot()
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, bt) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; xv.len()];
        let mut y = vec![0.0; xv.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * spatial;
                for i in off..off + spatial {
                    let h = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    y[i] = g[ch] * h + bt[ch];
                }
            }
        }
        let rg = self.rg(x.0) || self.rg(gamma.0) || self.rg(beta.0);
        Ok(self.push(
            xs,
            y,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                n,
                c,
                spatial,
                xhat,
                inv_std,
                train,
            },
            rg,
        ))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let y: Vec<f64> = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x.0);
        self.push(shape, y, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x.0))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu(x.0, slope))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x.0))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x.0))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x.0))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x.0))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x.0, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x.0))
    }

    /// Clamp into `[lo, hi]`; gradient is zero where the clamp is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp(x.0, lo, hi))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        same_shape(name, self.shape(a), self.shape(b))?;
        let y: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&p, &q)| f(p, q))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(shape, y, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |p, q| p + q, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |p, q| p - q, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |p, q| p * q, Op::Mul(a.0, b.0))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("minimum", a, b, f64::min, Op::Minimum(a.0, b.0))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x.0);
        self.push(vec![1], vec![s], Op::Sum(x.0), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(x.0);
        self.push(vec![1], vec![s], Op::Mean(x.0), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return dim_err("reshape", self.shape(x), shape);
        }
        let y = self.value(x).to_vec();
        let rg = self.rg(x.0);
        Ok(self.push(shape.to_vec(), y, Op::Reshape(x.0), rg))
    }

    /// Flattens everything after the batch axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let n = s[0];
        let rest: usize = s[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    /// `[rows, ca] ∥ [rows, cb] → [rows, ca + cb]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return dim_err("concat_cols", sa, sb);
        }
        let (rows, ca, cb) = (sa[0], sa[1], sb[1]);
        let mut y = Vec::with_capacity(rows * (ca + cb));
        let (av, bv) = (self.value(a), self.value(b));
        for r in 0..rows {
            y.extend_from_slice(&av[r * ca..(r + 1) * ca]);
            y.extend_from_slice(&bv[r * cb..(r + 1) * cb]);
        }
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(
            vec![rows, ca + cb],
            y,
            Op::ConcatCols {
                a: a.0,
                b: b.0,
                rows,
                ca,
                cb,
            },
            rg,
        ))
    }

    fn rows_of(&self, name: &'static str, x: Var) -> Result<usize> {
        let s = self.shape(x);
        if s.len() != 2 {
            return dim_err(name, s, &[]);
        }
        Ok(s[1])
    }

    /// Row-wise log-softmax of a `[rows, cols]` matrix.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let cols = self.rows_of("log_softmax", x)?;
        let mut y = self.value(x).to_vec();
        for row in y.chunks_exact_mut(cols) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x.0);
        Ok(self.push(shape, y, Op::LogSoftmax { x: x.0, cols }, rg))
    }

    /// Row-wise softmax of a `[rows, cols]` matrix.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let cols = self.rows_of("softmax", x)?;
        let mut y = self.value(x).to_vec();
        for row in y.chunks_exact_mut(cols) {
            softmax_in_place(row);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x.0);
        Ok(self.push(shape, y, Op::Softmax { x: x.0, cols }, rg))
    }

    /// Picks `x[r, idx[r]]` from each row, giving a `[rows]` vector.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let cols = self.rows_of("gather_rows", x)?;
        let rows = self.shape(x)[0];
        if idx.len() != rows || idx.iter().any(|&i| i >= cols) {
            return dim_err("gather_rows", self.shape(x), &[idx.len()]);
        }
        let xv = self.value(x);
        let y: Vec<f64> = idx.iter().enumerate().map(|(r, &i)| xv[r * cols + i]).collect();
        let rg = self.rg(x.0);
        Ok(self.push(
            vec![rows],
            y,
            Op::GatherRows {
                x: x.0,
                idx: idx.to_vec(),
                cols,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy of logits against a constant target.
    pub fn bce_with_logits(&mut self, x: Var, target: f64) -> Var {
        let v = self.value(x);
        let loss = v
            .iter()
            .map(|&z| z.max(0.0) - z * target + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / v.len() as f64;
        let rg = self.rg(x.0);
        self.push(vec![1], vec![loss], Op::BceWithLogits { x: x.0, target }, rg)
    }

    /// Back-propagates from a scalar `loss`, depositing gradients into every
    /// parameter recorded on the tape, then clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let node = self.node(loss)?;
        if node.value.as_slice().len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if node.requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(p) = node.param {
                p.accumulate_grad(&g);
            }
            if node.watched {
                out.inputs.insert(Var(i), g.clone());
            }
            self.backprop_node(i, &g, &mut grads)?;
        }
        for node in &self.nodes {
            if let Some(p) = node.param {
                if p.grad().is_none() {
                    p.accumulate_grad(&vec![0.0; p.len()]);
                }
            }
        }
        self.nodes.clear();
        self.consumed = true;
        Ok(out)
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let nodes = &self.nodes;
        let val = |j: usize| nodes[j].value.as_slice();
        let out = val(i);
        let mut send = |j: usize, d: Vec<f64>| {
            if !nodes[j].requires_grad {
                return;
            }
            match grads[j].as_mut() {
                Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
                None => grads[j] = Some(d),
            }
        };
        let map1 = |x: usize, f: &dyn Fn(usize) -> f64| -> Vec<f64> {
            (0..val(x).len()).map(|k| g[k] * f(k)).collect()
        };

        match &nodes[i].op {
            Op::Leaf => {}
            Op::Dense {
                x,
                w,
                b,
                batch,
                fan_in,
                fan_out,
            } => {
                let (batch, fan_in, fan_out) = (*batch, *fan_in, *fan_out);
                if nodes[*x].requires_grad {
                    let mut dx = vec![0.0; batch * fan_in];
                    kernels::gemm(batch, fan_out, fan_in, g, false, val(*w), true, &mut dx, false);
                    send(*x, dx);
                }
                if nodes[*w].requires_grad {
                    let mut dw = vec![0.0; fan_in * fan_out];
                    kernels::gemm(fan_in, batch, fan_out, val(*x), true, g, false, &mut dw, false);
                    send(*w, dw);
                }
                if nodes[*b].requires_grad {
                    let mut db = vec![0.0; fan_out];
                    for row in g.chunks_exact(fan_out) {
                        db.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                    }
                    send(*b, db);
                }
            }
            Op::Conv2d {
                x,
                k,
                bias,
                n,
                c_out,
                geom,
            } => {
                let (dx, dk) = kernels::conv2d_backward(
                    val(*x),
                    *n,
                    val(*k),
                    *c_out,
                    geom,
                    g,
                    nodes[*x].requires_grad,
                    nodes[*k].requires_grad,
                );
                if let Some(dx) = dx {
                    send(*x, dx);
                }
                if let Some(dk) = dk {
                    send(*k, dk);
                }
                if let Some(b) = bias {
                    send(*b, channel_sums(g, *c_out, geom.col_cols()));
                }
            }
            Op::ConvTranspose2d {
                x,
                k,
                bias,
                n,
                c_in,
                geom,
            } => {
                let (dx, dk) = kernels::conv_transpose_backward(
                    val(*x),
                    *n,
                    *c_in,
                    val(*k),
                    geom,
                    g,
                    nodes[*x].requires_grad,
                    nodes[*k].requires_grad,
                );
                if let Some(dx) = dx {
                    send(*x, dx);
                }
                if let Some(dk) = dk {
                    send(*k, dk);
                }
                if let Some(b) = bias {
                    send(*b, channel_sums(g, geom.c_in, geom.h * geom.w));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                n,
                c,
                spatial,
                xhat,
                inv_std,
                train,
            } => {
                let (n, c, spatial) = (*n, *c, *spatial);
                let gv = val(*gamma);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * spatial;
                        for k in off..off + spatial {
                            dgamma[ch] += g[k] * xhat[k];
                            dbeta[ch] += g[k];
                        }
                    }
                }
                if nodes[*x].requires_grad {
                    let mut dx = vec![0.0; g.len()];
                    if *train {
                        let count = (n * spatial) as f64;
                        for b in 0..n {
                            for ch in 0..c {
                                let off = (b * c + ch) * spatial;
                                let scale = gv[ch] * inv_std[ch] / count;
                                for k in off..off + spatial {
                                    dx[k] = scale * (count * g[k] - dbeta[ch] - xhat[k] * dgamma[ch]);
                                }
                            }
                        }
                    } else {
                        for b in 0..n {
                            for ch in 0..c {
                                let off = (b * c + ch) * spatial;
                                let scale = gv[ch] * inv_std[ch];
                                for k in off..off + spatial {
                                    dx[k] = scale * g[k];
                                }
                            }
                        }
                    }
                    send(*x, dx);
                }
                send(*gamma, dgamma);
                send(*beta, dbeta);
            }
            Op::Relu(x) => {
                let xv = val(*x);
                send(*x, map1(*x, &|k| if xv[k] > 0.0 { 1.0 } else { 0.0 }));
            }
            Op::LeakyRelu(x, slope) => {
                let xv = val(*x);
                send(*x, map1(*x, &|k| if xv[k] > 0.0 { 1.0 } else { *slope }));
            }
            Op::Tanh(x) => send(*x, map1(*x, &|k| 1.0 - out[k] * out[k])),
            Op::Sigmoid(x) => send(*x, map1(*x, &|k| out[k] * (1.0 - out[k]))),
            Op::Exp(x) => send(*x, map1(*x, &|k| out[k])),
            Op::Abs(x) => {
                let xv = val(*x);
                send(*x, map1(*x, &|k| sign(xv[k])));
            }
            Op::Square(x) => {
                let xv = val(*x);
                send(*x, map1(*x, &|k| 2.0 * xv[k]));
            }
            Op::Scale(x, c) => send(*x, map1(*x, &|_| *c)),
            Op::AddScalar(x) | Op::Reshape(x) => send(*x, g.to_vec()),
            Op::Clamp(x, lo, hi) => {
                let xv = val(*x);
                send(*x, map1(*x, &|k| if xv[k] < *lo || xv[k] > *hi { 0.0 } else { 1.0 }));
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                send(*a, g.iter().zip(bv).map(|(d, q)| d * q).collect());
                send(*b, g.iter().zip(av).map(|(d, p)| d * p).collect());
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let pick_a: Vec<bool> = av.iter().zip(bv).map(|(p, q)| p <= q).collect();
                send(*a, g.iter().zip(&pick_a).map(|(d, &s)| if s { *d } else { 0.0 }).collect());
                send(*b, g.iter().zip(&pick_a).map(|(d, &s)| if s { 0.0 } else { *d }).collect());
            }
            Op::Sum(x) => send(*x, vec![g[0]; val(*x).len()]),
            Op::Mean(x) => {
                let n = val(*x).len();
                send(*x, vec![g[0] / n as f64; n]);
            }
            Op::ConcatCols { a, b, rows, ca, cb } => {
                let (ca, cb) = (*ca, *cb);
                let mut da = Vec::with_capacity(rows * ca);
                let mut db = Vec::with_capacity(rows * cb);
                for row in g.chunks_exact(ca + cb) {
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                send(*a, da);
                send(*b, db);
            }
            Op::LogSoftmax { x, cols } => {
                let mut dx = vec![0.0; g.len()];
                for ((d, gr), o) in dx
                    .chunks_exact_mut(*cols)
                    .zip(g.chunks_exact(*cols))
                    .zip(out.chunks_exact(*cols))
                {
                    let s: f64 = gr.iter().sum();
                    for k in 0..*cols {
                        d[k] = gr[k] - o[k].exp() * s;
                    }
                }
                send(*x, dx);
            }
            Op::Softmax { x, cols } => {
                let mut dx = vec![0.0; g.len()];
                for ((d, gr), o) in dx
                    .chunks_exact_mut(*cols)
                    .zip(g.chunks_exact(*cols))
                    .zip(out.chunks_exact(*cols))
                {
                    let dot: f64 = gr.iter().zip(o).map(|(a, b)| a * b).sum();
                    for k in 0..*cols {
                        d[k] = o[k] * (gr[k] - dot);
                    }
                }
                send(*x, dx);
            }
            Op::GatherRows { x, idx, cols } => {
                let mut dx = vec![0.0; val(*x).len()];
                for (r, &c) in idx.iter().enumerate() {
                    dx[r * cols + c] = g[r];
                }
                send(*x, dx);
            }
            Op::BceWithLogits { x, target } => {
                let xv = val(*x);
                let scale = g[0] / xv.len() as f64;
                send(*x, xv.iter().map(|&z| scale * (sigmoid(z) - target)).collect());
            }
        }
        Ok(())
    }
}

fn channel_sums(g: &[f64], channels: usize, spatial: usize) -> Vec<f64> {
    let mut db = vec![0.0; channels];
    for (i, plane) in g.chunks_exact(spatial).enumerate() {
        db[i % channels] += plane.iter().sum::<f64>();
    }
    db
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable in-place softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    row.iter_mut().for_each(|v| *v /= s);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient_is_twice_input() {
        let x = Tensor::new(&[4], vec![1.0, -2.0, 0.5, 3.0]).unwrap().with_grad();
        let mut tape = Tape::new();
        let v = tape.param(&x);
        let sq = tape.square(v);
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, -4.0, 1.0, 6.0]);
    }

    #[test]
    fn unreachable_parameter_gets_zero_gradient() {
        let theta = Tensor::new(&[2], vec![1.0, 2.0]).unwrap().with_grad();
        let x = Tensor::new(&[2], vec![3.0, 4.0]).unwrap().with_grad();
        let mut tape = Tape::new();
        let _t = tape.param(&theta);
        let xv = tape.param(&x);
        let loss = tape.sum(xv);
        tape.backward(loss).unwrap();
        assert_eq!(theta.grad().unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn second_backward_is_rejected() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap().with_grad();
        let mut tape = Tape::new();
        let v = tape.param(&x);
        let loss = tape.sum(v);
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(TensorError::TapeConsumed)));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap().with_grad();
        let mut tape = Tape::new();
        let v = tape.param(&x);
        let y = tape.square(v);
        assert!(matches!(tape.backward(y), Err(TensorError::Contract(_))));
    }

    #[test]
    fn dense_identity_and_bias() {
        let x = Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::zeros(&[2]);
        let mut tape = Tape::no_grad();
        let (xv, wv, bv) = (tape.param(&x), tape.param(&w), tape.param(&b));
        let y = tape.dense(xv, wv, bv).unwrap();
        assert_eq!(tape.value(y), &[1.0, 2.0]);

        let z = Tensor::zeros(&[1, 2]);
        let b = Tensor::new(&[2], vec![3.0, -1.0]).unwrap();
        let w = Tensor::new(&[2, 2], vec![0.3, -0.7, 2.0, 5.0]).unwrap();
        let mut tape = Tape::no_grad();
        let (zv, wv, bv) = (tape.param(&z), tape.param(&w), tape.param(&b));
        let y = tape.dense(zv, wv, bv).unwrap();
        assert_eq!(tape.value(y), &[3.0, -1.0]);
    }

    #[test]
    fn dense_shape_mismatch_names_both_shapes() {
        let x = Tensor::zeros(&[1, 3]);
        let w = Tensor::zeros(&[2, 2]);
        let b = Tensor::zeros(&[2]);
        let mut tape = Tape::no_grad();
        let (xv, wv, bv) = (tape.param(&x), tape.param(&w), tape.param(&b));
        let err = tape.dense(xv, wv, bv).unwrap_err().to_string();
        assert!(err.contains("[1, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn conv_identity_kernel_and_zero_input() {
        let x = Tensor::new(&[1, 1, 3, 3], (0..9).map(f64::from).collect()).unwrap();
        let k = Tensor::full(&[1, 1, 1, 1], 1.0);
        let mut tape = Tape::no_grad();
        let (xv, kv) = (tape.param(&x), tape.param(&k));
        let y = tape.conv2d(xv, kv, None, 1, 0).unwrap();
        assert_eq!(tape.value(y), x.data());

        let z = Tensor::zeros(&[2, 1, 5, 5]);
        let k = Tensor::full(&[3, 1, 3, 3], 0.7);
        let mut tape = Tape::no_grad();
        let (zv, kv) = (tape.param(&z), tape.param(&k));
        let y = tape.conv2d(zv, kv, None, 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[2, 3, 3, 3]);
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_kernel_larger_than_input_is_dimension_error() {
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        let k = Tensor::zeros(&[1, 1, 5, 5]);
        let mut tape = Tape::no_grad();
        let (xv, kv) = (tape.param(&x), tape.param(&k));
        assert!(matches!(
            tape.conv2d(xv, kv, None, 1, 1),
            Err(TensorError::Dimension { .. })
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, -50.0, 0.0, 50.0]).unwrap();
        let mut tape = Tape::no_grad();
        let xv = tape.param(&x);
        let p = tape.softmax(xv).unwrap();
        for row in tape.value(p).chunks(3) {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_train_normalizes_and_rejects_single_sample() {
        let stats = RunningStats::new(2);
        let x = Tensor::new(&[4, 2], vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0]).unwrap();
        let gamma = Tensor::full(&[2], 1.0);
        let beta = Tensor::zeros(&[2]);
        let mut tape = Tape::no_grad();
        let (xv, gv, bv) = (tape.param(&x), tape.param(&gamma), tape.param(&beta));
        let y = tape.batch_norm(xv, gv, bv, &stats, Mode::Train, 0.9, 1e-5).unwrap();
        let yv = tape.value(y);
        for ch in 0..2 {
            let col: Vec<f64> = (0..4).map(|r| yv[r * 2 + ch]).collect();
            let m = col.iter().sum::<f64>() / 4.0;
            let v = col.iter().map(|c| (c - m) * (c - m)).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-6);
            assert!((v - 1.0).abs() < 1e-4);
        }
        let one = Tensor::zeros(&[1, 2]);
        let ov = tape.param(&one);
        assert!(matches!(
            tape.batch_norm(ov, gv, bv, &stats, Mode::Train, 0.9, 1e-5),
            Err(TensorError::DegenerateBatch(1))
        ));
    }

    #[test]
    fn batch_norm_eval_with_unit_stats_is_identity() {
        let stats = RunningStats::new(3);
        let x = Tensor::new(&[2, 3], vec![0.5, -1.0, 2.0, 3.0, 0.0, -0.25]).unwrap();
        let gamma = Tensor::full(&[3], 1.0);
        let beta = Tensor::zeros(&[3]);
        let mut tape = Tape::no_grad();
        let (xv, gv, bv) = (tape.param(&x), tape.param(&gamma), tape.param(&beta));
        let y = tape.batch_norm(xv, gv, bv, &stats, Mode::Eval, 0.9, 0.0).unwrap();
        assert_eq!(tape.value(y), x.data());
    }

    #[test]
    fn watched_input_gradient_is_reported() {
        let mut tape = Tape::new();
        let x = tape.watch(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = tape.scale(x, 3.0);
        let l = tape.sum(y);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap(), &[3.0, 3.0, 3.0]);
    }
}
