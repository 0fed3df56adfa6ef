use std::fmt;

use super::kernels::{self, ConvGeom};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation family of a recorded node, used in diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Transpose,
    Reshape,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    AddScalar,
    ChannelBias,
    Softmax,
    LogSoftmax,
    LayerNorm,
    Conv2d,
    AvgPool2d,
    Upsample,
    Slice,
    Concat,
    Gelu,
    LeakyRelu,
    Relu,
    Sigmoid,
    Abs,
    Sqrt,
    Sum,
    Mean,
    MeanInner,
    Gather,
}

impl OpKind {
    pub const ALL: [OpKind; 29] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Reshape,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::ChannelBias,
        OpKind::Softmax,
        OpKind::LogSoftmax,
        OpKind::LayerNorm,
        OpKind::Conv2d,
        OpKind::AvgPool2d,
        OpKind::Upsample,
        OpKind::Slice,
        OpKind::Concat,
        OpKind::Gelu,
        OpKind::LeakyRelu,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Abs,
        OpKind::Sqrt,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::MeanInner,
        OpKind::Gather,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Reshape => "reshape",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::ChannelBias => "channel_bias",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Conv2d => "conv2d",
            OpKind::AvgPool2d => "avg_pool2d",
            OpKind::Upsample => "upsample",
            OpKind::Slice => "slice",
            OpKind::Concat => "concat",
            OpKind::Gelu => "gelu",
            OpKind::LeakyRelu => "leaky_relu",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Abs => "abs",
            OpKind::Sqrt => "sqrt",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::MeanInner => "mean_inner",
            OpKind::Gather => "gather",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { x: Var, rows: usize, cols: usize },
    Reshape { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    Scale { x: Var, c: T },
    AddScalar { x: Var },
    ChannelBias { x: Var, b: Var, inner: usize },
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LogSoftmax { x: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, cols: usize, xhat: Vec<T>, rstd: Vec<T> },
    Conv2d { x: Var, kernel: Var, geom: ConvGeom, cols: Vec<T> },
    AvgPool2d { x: Var, c: usize, h: usize, w: usize, s: usize },
    Upsample { x: Var, c: usize, h: usize, w: usize, f: usize },
    Slice { x: Var, offset: usize },
    Concat { parts: Vec<Var> },
    Gelu { x: Var },
    LeakyRelu { x: Var, slope: T },
    Relu { x: Var },
    Sigmoid { x: Var },
    Abs { x: Var },
    Sqrt { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    MeanInner { x: Var, inner: usize },
    Gather { x: Var, idx: Vec<usize> },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Transpose { .. } => OpKind::Transpose,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Add { .. } => OpKind::Add,
            Op::Sub { .. } => OpKind::Sub,
            Op::Mul { .. } => OpKind::Mul,
            Op::Div { .. } => OpKind::Div,
            Op::Scale { .. } => OpKind::Scale,
            Op::AddScalar { .. } => OpKind::AddScalar,
            Op::ChannelBias { .. } => OpKind::ChannelBias,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LogSoftmax { .. } => OpKind::LogSoftmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::AvgPool2d { .. } => OpKind::AvgPool2d,
            Op::Upsample { .. } => OpKind::Upsample,
            Op::Slice { .. } => OpKind::Slice,
            Op::Concat { .. } => OpKind::Concat,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::LeakyRelu { .. } => OpKind::LeakyRelu,
            Op::Relu { .. } => OpKind::Relu,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::Abs { .. } => OpKind::Abs,
            Op::Sqrt { .. } => OpKind::Sqrt,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::MeanInner { .. } => OpKind::MeanInner,
            Op::Gather { .. } => OpKind::Gather,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Append-only record of executed operations.
///
/// Nodes are stored in execution order, so walking the record backwards visits
/// every node after all of its consumers.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
    sabotage: Option<OpKind>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), backward_done: false, sabotage: None }
    }

    /// Doubles every input gradient produced by ops of `kind`. Used as a
    /// negative control for gradient verification.
    pub fn sabotage(&mut self, kind: OpKind) {
        self.sabotage = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input value. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: OpKind::Leaf.name().into() });
        }
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// A gradient-free copy of `x`.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).clone();
        self.constant(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| Tensor { shape: node.value.shape.clone(), data: g.clone() })
    }

    /// Clear all gradients so that `backward` may run again.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.kind().name().into() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, format!("shapes {:?} and {:?} differ", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn map(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let src = self.value(x);
        let data = src.data.iter().map(|&v| f(v)).collect();
        let value = Tensor { shape: src.shape.clone(), data };
        self.push(value, op, &[x])
    }

    fn zip(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor { shape: va.shape.clone(), data };
        self.push(value, op, &[a, b])
    }

    // ── Linear algebra ───────────────────────────────────────────────

    /// `[m×k] · [k×n] → [m×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", format!("cannot multiply {sa:?} by {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_nn(&self.value(a).data, &self.value(b).data, &mut out, m, k, n);
        self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul { a, b, m, k, n }, &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::dim("transpose", format!("expected rank 2, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let data = kernels::transpose(&self.value(x).data, rows, cols);
        self.push(Tensor { shape: vec![cols, rows], data }, Op::Transpose { x, rows, cols }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push(value, Op::Reshape { x }, &[x])
    }

    // ── Elementwise ──────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        self.zip(a, b, Op::Add { a, b }, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        self.zip(a, b, Op::Sub { a, b }, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        self.zip(a, b, Op::Mul { a, b }, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        self.zip(a, b, Op::Div { a, b }, |x, y| x / y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        self.map(x, Op::Scale { x, c }, |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        self.map(x, Op::AddScalar { x }, |v| v + c)
    }

    /// Sum of several same-shaped values.
    pub fn add_all(&mut self, parts: &[Var]) -> Result<Var> {
        let (&first, rest) = parts.split_first().ok_or_else(|| Error::dim("add", "no operands"))?;
        rest.iter().try_fold(first, |acc, &p| self.add(acc, p))
    }

    /// Add `b[C]` to every element of channel `c` of `x[C×…]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.is_empty() || sb.len() != 1 || sb[0] != sx[0] {
            return Err(Error::dim("channel_bias", format!("bias {sb:?} does not fit {sx:?}")));
        }
        let inner: usize = sx[1..].iter().product();
        let bias = &self.value(b).data;
        let data = self
            .value(x)
            .data
            .chunks(inner)
            .zip(bias)
            .flat_map(|(row, &bv)| row.iter().map(move |&v| v + bv))
            .collect();
        let value = Tensor { shape: sx.to_vec(), data };
        self.push(value, Op::ChannelBias { x, b, inner }, &[x, b])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Gelu { x }, kernels::gelu)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let slope = T::of(slope);
        self.map(x, Op::LeakyRelu { x, slope }, |v| if v > T::zero() { v } else { v * slope })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Relu { x }, |v| v.max(T::zero()))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Sigmoid { x }, |v| T::one() / (T::one() + (-v).exp()))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Abs { x }, |v| v.abs())
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Sqrt { x }, |v| v.sqrt())
    }

    // ── Reductions ───────────────────────────────────────────────────

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data.iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s: T = v.data.iter().copied().sum();
        let m = s / T::of(v.len() as f64);
        self.push(Tensor::scalar(m), Op::Mean { x }, &[x])
    }

    /// Mean over every axis but the first: `[C×…] → [C]`.
    pub fn mean_inner(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.is_empty() {
            return Err(Error::dim("mean_inner", "rank-0 input"));
        }
        let c = s[0];
        let inner: usize = s[1..].iter().product();
        let norm = T::of(inner as f64);
        let data = self.value(x).data.chunks(inner).map(|row| row.iter().copied().sum::<T>() / norm).collect();
        self.push(Tensor { shape: vec![c], data }, Op::MeanInner { x, inner }, &[x])
    }

    /// Pick flat elements of `x` into a rank-1 result.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let src = &self.value(x).data;
        if idx.is_empty() {
            return Err(Error::dim("gather", "empty index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= src.len()) {
            return Err(Error::dim("gather", format!("index {bad} out of range {}", src.len())));
        }
        let data = idx.iter().map(|&i| src[i]).collect();
        self.push(Tensor { shape: vec![idx.len()], data }, Op::Gather { x, idx: idx.to_vec() }, &[x])
    }

    /// Row `row` of a rank-2 tensor.
    pub fn select_row(&mut self, x: Var, row: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || row >= s[0] {
            return Err(Error::dim("select_row", format!("row {row} of {s:?}")));
        }
        let cols = s[1];
        let idx: Vec<usize> = (row * cols..(row + 1) * cols).collect();
        self.gather(x, &idx)
    }

    // ── Normalizers ──────────────────────────────────────────────────

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(Error::dim(op, format!("axis {axis} out of range for rank {rank}")));
        }
        Ok(())
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let (outer, len, inner) = split_axis(self.shape(x), axis);
        let src = self.value(x);
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mx = (0..len).map(|j| src.data[at(j)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for j in 0..len {
                    let e = (src.data[at(j)] - mx).exp();
                    out[at(j)] = e;
                    z = z + e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / z;
                }
            }
        }
        let value = Tensor { shape: src.shape.clone(), data: out };
        self.push(value, Op::Softmax { x, outer, len, inner }, &[x])
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", x, axis)?;
        let (outer, len, inner) = split_axis(self.shape(x), axis);
        let src = self.value(x);
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mx = (0..len).map(|j| src.data[at(j)]).fold(T::neg_infinity(), T::max);
                let z: T = (0..len).map(|j| (src.data[at(j)] - mx).exp()).sum();
                let lz = mx + z.ln();
                for j in 0..len {
                    out[at(j)] = src.data[at(j)] - lz;
                }
            }
        }
        let value = Tensor { shape: src.shape.clone(), data: out };
        self.push(value, Op::LogSoftmax { x, outer, len, inner }, &[x])
    }

    /// Normalize each slice along the last axis, then apply `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x);
        let cols = *sx.last().ok_or_else(|| Error::dim("layer_norm", "rank-0 input"))?;
        if self.shape(gain) != [cols] || self.shape(bias) != [cols] {
            return Err(Error::dim(
                "layer_norm",
                format!("gain {:?} / bias {:?} vs extent {cols}", self.shape(gain), self.shape(bias)),
            ));
        }
        let src = self.value(x);
        let (g, b) = (&self.value(gain).data, &self.value(bias).data);
        let rows = src.len() / cols;
        let n = T::of(cols as f64);
        let eps = T::of(eps);
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src.data[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let value = Tensor { shape: src.shape.clone(), data: out };
        self.push(value, Op::LayerNorm { x, gain, bias, cols, xhat, rstd }, &[x, gain, bias])
    }

    // ── Spatial ──────────────────────────────────────────────────────

    /// Cross-correlation of `x[C_in×H×W]` with `kernel[C_out×C_in×kh×kw]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x), self.shape(kernel));
        if sx.len() != 3 || sk.len() != 4 || sk[1] != sx[0] {
            return Err(Error::dim("conv2d", format!("input {sx:?} vs kernel {sk:?}")));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be positive"));
        }
        let (h, w, kh, kw) = (sx[1], sx[2], sk[2], sk[3]);
        let span = |len: usize, k: usize| -> Option<usize> { (len + 2 * pad).checked_sub(k).map(|d| d / stride + 1) };
        let (oh, ow) = match (span(h, kh), span(w, kw)) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(Error::dim("conv2d", format!("kernel {kh}×{kw} exceeds padded input {h}×{w} (pad {pad})")))
            }
        };
        let geom = ConvGeom { c_in: sx[0], h, w, c_out: sk[0], kh, kw, stride, pad, oh, ow };
        let cols = kernels::im2col(&self.value(x).data, &geom);
        let mut out = vec![T::zero(); geom.c_out * geom.out_len()];
        kernels::gemm_nn(&self.value(kernel).data, &cols, &mut out, geom.c_out, geom.patch_len(), geom.out_len());
        let value = Tensor { shape: vec![geom.c_out, oh, ow], data: out };
        self.push(value, Op::Conv2d { x, kernel, geom, cols }, &[x, kernel])
    }

    /// Non-overlapping `s×s` window means over `x[C×H×W]`.
    pub fn avg_pool2d(&mut self, x: Var, s: usize) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 3 {
            return Err(Error::dim("avg_pool2d", format!("expected [C×H×W], got {sx:?}")));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        if s == 0 || h % s != 0 || w % s != 0 {
            return Err(Error::dim("avg_pool2d", format!("factor {s} does not divide {h}×{w}")));
        }
        let (oh, ow) = (h / s, w / s);
        let src = &self.value(x).data;
        let norm = T::of((s * s) as f64);
        let mut out = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let o = (ch * oh + y / s) * ow + xx / s;
                    out[o] = out[o] + src[(ch * h + y) * w + xx];
                }
            }
        }
        for v in &mut out {
            *v = *v / norm;
        }
        let value = Tensor { shape: vec![c, oh, ow], data: out };
        self.push(value, Op::AvgPool2d { x, c, h, w, s }, &[x])
    }

    /// Nearest-neighbour upsampling of `x[C×H×W]` by an integer factor.
    pub fn upsample(&mut self, x: Var, f: usize) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 3 || f == 0 {
            return Err(Error::dim("upsample", format!("input {sx:?}, factor {f}")));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let src = &self.value(x).data;
        let (oh, ow) = (h * f, w * f);
        let mut out = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for y in 0..oh {
                let row = &src[(ch * h + y / f) * w..(ch * h + y / f + 1) * w];
                for xx in 0..ow {
                    out.push(row[xx / f]);
                }
            }
        }
        let value = Tensor { shape: vec![c, oh, ow], data: out };
        self.push(value, Op::Upsample { x, c, h, w, f }, &[x])
    }

    /// Channels `[start, start+len)` of `x[C×…]`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x);
        if sx.is_empty() || len == 0 || start + len > sx[0] {
            return Err(Error::dim("slice", format!("channels {start}..{} of {sx:?}", start + len)));
        }
        let inner: usize = sx[1..].iter().product();
        let mut shape = sx.to_vec();
        shape[0] = len;
        let data = self.value(x).data[start * inner..(start + len) * inner].to_vec();
        self.push(Tensor { shape, data }, Op::Slice { x, offset: start * inner }, &[x])
    }

    /// Split `z[C×…]` into its first and second channel halves.
    pub fn chunk_channels(&mut self, z: Var) -> Result<(Var, Var)> {
        let c = *self.shape(z).first().ok_or_else(|| Error::dim("chunk", "rank-0 input"))?;
        if c % 2 != 0 {
            return Err(Error::dim("chunk", format!("odd channel count {c}")));
        }
        let a = self.slice_channels(z, 0, c / 2)?;
        let b = self.slice_channels(z, c / 2, c / 2)?;
        Ok((a, b))
    }

    /// Concatenate along the first axis; trailing extents must agree.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::dim("concat", "no parts"))?;
        let tail = self.shape(first).get(1..).unwrap_or(&[]).to_vec();
        if self.shape(first).is_empty() {
            return Err(Error::dim("concat", "rank-0 part"));
        }
        let mut channels = 0;
        for &p in parts {
            let sp = self.shape(p);
            if sp.is_empty() || sp[1..] != tail[..] {
                return Err(Error::dim("concat", format!("part {sp:?} does not match trailing extents {tail:?}")));
            }
            channels += sp[0];
        }
        let mut data = Vec::with_capacity(channels * tail.iter().product::<usize>());
        for &p in parts {
            data.extend_from_slice(&self.value(p).data);
        }
        let mut shape = vec![channels];
        shape.extend(tail);
        self.push(Tensor { shape, data }, Op::Concat { parts: parts.to_vec() }, parts)
    }

    // ── Reverse pass ─────────────────────────────────────────────────

    /// Populate gradients of every `requires_grad` node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward("gradients already populated; reset before reuse".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Backward(format!("loss must be scalar, got shape {:?}", self.shape(loss))));
        }
        if !self.requires_grad(loss) {
            return Err(Error::Backward("loss is detached from every gradient leaf".into()));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = match &self.nodes[i].op {
                Op::Leaf => continue,
                _ => match self.nodes[i].grad.take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            let kind = self.nodes[i].op.kind();
            let mut contribs = self.vjp(i, &g);
            if self.sabotage == Some(kind) {
                for (_, d) in &mut contribs {
                    for v in d.iter_mut() {
                        *v = *v + *v;
                    }
                }
            }
            for (v, d) in contribs {
                if d.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite { op: format!("{kind} (backward)") });
                }
                let node = &mut self.nodes[v.0];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, &b)| *a = *a + b),
                    None => node.grad = Some(d),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` for each input needing a gradient.
    fn vjp(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let y = &node.value.data;
        let val = |v: Var| &self.nodes[v.0].value.data;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::with_capacity(2);
        let mut emit = |v: Var, f: &dyn Fn() -> Vec<T>| {
            if wants(v) {
                out.push((v, f()));
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                emit(*a, &|| {
                    let mut d = vec![T::zero(); m * k];
                    kernels::gemm_nt(g, val(*b), &mut d, m, n, k);
                    d
                });
                emit(*b, &|| {
                    let mut d = vec![T::zero(); k * n];
                    kernels::gemm_tn(val(*a), g, &mut d, k, m, n);
                    d
                });
            }
            Op::Transpose { x, rows, cols } => {
                emit(*x, &|| kernels::transpose(g, *cols, *rows));
            }
            Op::Reshape { x } | Op::AddScalar { x } => emit(*x, &|| g.to_vec()),
            Op::Add { a, b } => {
                emit(*a, &|| g.to_vec());
                emit(*b, &|| g.to_vec());
            }
            Op::Sub { a, b } => {
                emit(*a, &|| g.to_vec());
                emit(*b, &|| g.iter().map(|&v| -v).collect());
            }
            Op::Mul { a, b } => {
                emit(*a, &|| g.iter().zip(val(*b)).map(|(&d, &bv)| d * bv).collect());
                emit(*b, &|| g.iter().zip(val(*a)).map(|(&d, &av)| d * av).collect());
            }
            Op::Div { a, b } => {
                emit(*a, &|| g.iter().zip(val(*b)).map(|(&d, &bv)| d / bv).collect());
                emit(*b, &|| g.iter().zip(val(*a)).zip(val(*b)).map(|((&d, &av), &bv)| -d * av / (bv * bv)).collect());
            }
            Op::Scale { x, c } => emit(*x, &|| g.iter().map(|&d| d * *c).collect()),
            Op::ChannelBias { x, b, inner } => {
                emit(*x, &|| g.to_vec());
                emit(*b, &|| g.chunks(*inner).map(|row| row.iter().copied().sum()).collect());
            }
            Op::Softmax { x, outer, len, inner } => emit(*x, &|| {
                let mut d = vec![T::zero(); g.len()];
                for o in 0..*outer {
                    for ii in 0..*inner {
                        let at = |j: usize| (o * len + j) * inner + ii;
                        let dot: T = (0..*len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..*len {
                            d[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                d
            }),
            Op::LogSoftmax { x, outer, len, inner } => emit(*x, &|| {
                let mut d = vec![T::zero(); g.len()];
                for o in 0..*outer {
                    for ii in 0..*inner {
                        let at = |j: usize| (o * len + j) * inner + ii;
                        let total: T = (0..*len).map(|j| g[at(j)]).sum();
                        for j in 0..*len {
                            d[at(j)] = g[at(j)] - y[at(j)].exp() * total;
                        }
                    }
                }
                d
            }),
            Op::LayerNorm { x, gain, bias, cols, xhat, rstd } => {
                let cols = *cols;
                let gv = val(*gain);
                emit(*x, &|| {
                    let n = T::of(cols as f64);
                    let mut d = vec![T::zero(); g.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let span = r * cols..(r + 1) * cols;
                        let (gr, hr) = (&g[span.clone()], &xhat[span.clone()]);
                        let mut sum_d = T::zero();
                        let mut sum_dh = T::zero();
                        for c in 0..cols {
                            let dh = gr[c] * gv[c];
                            sum_d = sum_d + dh;
                            sum_dh = sum_dh + dh * hr[c];
                        }
                        for c in 0..cols {
                            let dh = gr[c] * gv[c];
                            d[r * cols + c] = rs * (dh - sum_d / n - hr[c] * sum_dh / n);
                        }
                    }
                    d
                });
                emit(*gain, &|| {
                    let mut d = vec![T::zero(); cols];
                    for (gi, hi) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for c in 0..cols {
                            d[c] = d[c] + gi[c] * hi[c];
                        }
                    }
                    d
                });
                emit(*bias, &|| {
                    let mut d = vec![T::zero(); cols];
                    for gi in g.chunks(cols) {
                        for c in 0..cols {
                            d[c] = d[c] + gi[c];
                        }
                    }
                    d
                });
            }
            Op::Conv2d { x, kernel, geom, cols } => {
                emit(*kernel, &|| {
                    let mut d = vec![T::zero(); geom.c_out * geom.patch_len()];
                    kernels::gemm_nt(g, cols, &mut d, geom.c_out, geom.out_len(), geom.patch_len());
                    d
                });
                emit(*x, &|| {
                    let mut dcols = vec![T::zero(); geom.patch_len() * geom.out_len()];
                    kernels::gemm_tn(val(*kernel), g, &mut dcols, geom.patch_len(), geom.c_out, geom.out_len());
                    let mut d = vec![T::zero(); geom.c_in * geom.h * geom.w];
                    kernels::col2im(&dcols, geom, &mut d);
                    d
                });
            }
            Op::AvgPool2d { x, c, h, w, s } => emit(*x, &|| {
                let (ow, oh) = (w / s, h / s);
                let norm = T::of((s * s) as f64);
                let mut d = vec![T::zero(); c * h * w];
                for ch in 0..*c {
                    for yy in 0..*h {
                        for xx in 0..*w {
                            d[(ch * h + yy) * w + xx] = g[(ch * oh + yy / s) * ow + xx / s] / norm;
                        }
                    }
                }
                d
            }),
            Op::Upsample { x, c, h, w, f } => emit(*x, &|| {
                let (oh, ow) = (h * f, w * f);
                let mut d = vec![T::zero(); c * h * w];
                for ch in 0..*c {
                    for yy in 0..oh {
                        for xx in 0..ow {
                            let t = &mut d[(ch * h + yy / f) * w + xx / f];
                            *t = *t + g[(ch * oh + yy) * ow + xx];
                        }
                    }
                }
                d
            }),
            Op::Slice { x, offset } => emit(*x, &|| {
                let mut d = vec![T::zero(); self.nodes[x.0].value.len()];
                d[*offset..*offset + g.len()].copy_from_slice(g);
                d
            }),
            Op::Concat { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.len();
                    let start = offset;
                    emit(p, &|| g[start..start + n].to_vec());
                    offset += n;
                }
            }
            Op::Gelu { x } => emit(*x, &|| g.iter().zip(val(*x)).map(|(&d, &v)| d * kernels::gelu_grad(v)).collect()),
            Op::LeakyRelu { x, slope } => {
                emit(*x, &|| g.iter().zip(val(*x)).map(|(&d, &v)| if v > T::zero() { d } else { d * *slope }).collect())
            }
            Op::Relu { x } => {
                emit(*x, &|| g.iter().zip(val(*x)).map(|(&d, &v)| if v > T::zero() { d } else { T::zero() }).collect())
            }
            Op::Sigmoid { x } => emit(*x, &|| g.iter().zip(y).map(|(&d, &s)| d * s * (T::one() - s)).collect()),
            Op::Abs { x } => emit(*x, &|| {
                g.iter()
                    .zip(val(*x))
                    .map(|(&d, &v)| {
                        if v > T::zero() {
                            d
                        } else if v < T::zero() {
                            -d
                        } else {
                            T::zero()
                        }
                    })
                    .collect()
            }),
            Op::Sqrt { x } => emit(*x, &|| g.iter().zip(y).map(|(&d, &s)| d * T::of(0.5) / s).collect()),
            Op::Sum { x } => emit(*x, &|| vec![g[0]; self.nodes[x.0].value.len()]),
            Op::Mean { x } => emit(*x, &|| {
                let n = self.nodes[x.0].value.len();
                vec![g[0] / T::of(n as f64); n]
            }),
            Op::MeanInner { x, inner } => emit(*x, &|| {
                let norm = T::of(*inner as f64);
                g.iter().flat_map(|&d| std::iter::repeat_n(d / norm, *inner)).collect()
            }),
            Op::Gather { x, idx } => emit(*x, &|| {
                let mut d = vec![T::zero(); self.nodes[x.0].value.len()];
                for (&j, &gv) in idx.iter().zip(g) {
                    d[j] = d[j] + gv;
                }
                d
            }),
        }
        out
    }
}
