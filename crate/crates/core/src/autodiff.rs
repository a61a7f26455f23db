//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Nodes are appended to a [`Tape`] in creation order, which is already a
//! topological order of the graph: the reverse sweep simply walks the node
//! list backwards and visits each node once. A tape is single-threaded;
//! parallel work uses independent tapes.

use std::sync::Arc;

use crate::cassi::SensingOperator;
use crate::error::{Error, Result};
use crate::scan::ScanOrder;
use crate::ssm;
use crate::tensor::Tensor;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise operation kinds accepted by [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    Sigmoid,
    Gelu,
    Scale(f64),
}

/// Convolution padding mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `(k - 1) / 2` on each side.
    Same,
    Valid,
}

impl Padding {
    fn amount(self, k: usize) -> usize {
        match self {
            Padding::Same => (k - 1) / 2,
            Padding::Valid => 0,
        }
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Sigmoid(Var),
    Gelu(Var),
    Softplus(Var),
    Exp(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    Broadcast(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Narrow {
        input: Var,
        start: usize,
    },
    Gather {
        input: Var,
        order: Arc<ScanOrder>,
    },
    Matmul(Var, Var),
    ChannelBias(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
    },
    DepthwiseConv2d {
        input: Var,
        kernel: Var,
        pad: usize,
    },
    Upsample2(Var),
    LayerNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SelectiveScan {
        inputs: [Var; 6],
        states: Vec<f64>,
    },
    Project {
        input: Var,
        op: Arc<SensingOperator>,
    },
    Adjoint {
        input: Var,
        op: Arc<SensingOperator>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::Sigmoid(..) => "sigmoid",
            Op::Gelu(..) => "gelu",
            Op::Softplus(..) => "softplus",
            Op::Exp(..) => "exp",
            Op::Relu(..) => "relu",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Broadcast(..) => "broadcast",
            Op::Reshape(..) => "reshape",
            Op::Concat(..) => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Gather { .. } => "gather_by_order",
            Op::Matmul(..) => "matmul",
            Op::ChannelBias(..) => "channel_bias",
            Op::Conv2d { .. } => "conv2d",
            Op::DepthwiseConv2d { .. } => "depthwise_conv2d",
            Op::Upsample2(..) => "upsample2",
            Op::LayerNorm { .. } => "layer_norm",
            Op::SelectiveScan { .. } => "selective_scan",
            Op::Project { .. } => "project",
            Op::Adjoint { .. } => "adjoint",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a node, if it was reached by the reverse sweep.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a node, or zeros of `shape` when it was not reached.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn gelu(x: f64) -> f64 {
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = K * (x + 0.044_715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const K: f64 = 0.797_884_560_802_865_4;
    let u = K * (x + 0.044_715 * x * x * x);
    let t = u.tanh();
    let du = K * (1.0 + 3.0 * 0.044_715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + e^x)`, floored at the smallest positive
/// normal so the result is never zero.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp().max(f64::MIN_POSITIVE)
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant input; no gradient is accumulated for it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A trainable leaf whose gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let value = self.value(a).zip_map(self.value(b), f)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    /// Dispatches a pointwise operation by kind; binary kinds need `b`.
    ///
    /// A one-element `b` is broadcast against `a` for `Add` and `Mul`.
    pub fn elementwise(&mut self, kind: ElementwiseKind, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = || b.ok_or_else(|| Error::arg(format!("{kind:?} needs a second operand")));
        match kind {
            ElementwiseKind::Add => {
                let b = need_b()?;
                if self.value(b).is_scalar() && self.shape(a) != self.shape(b) {
                    self.add_scalar(a, b)
                } else {
                    self.add(a, b)
                }
            }
            ElementwiseKind::Sub => self.sub(a, need_b()?),
            ElementwiseKind::Mul => {
                let b = need_b()?;
                if self.value(b).is_scalar() && self.shape(a) != self.shape(b) {
                    self.mul_scalar(a, b)
                } else {
                    self.mul(a, b)
                }
            }
            ElementwiseKind::Sigmoid => Ok(self.sigmoid(a)),
            ElementwiseKind::Gelu => Ok(self.gelu(a)),
            ElementwiseKind::Scale(s) => Ok(self.scale(a, s)),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn check_scalar(&self, op: &'static str, s: Var) -> Result<()> {
        if !self.value(s).is_scalar() {
            return Err(Error::arg(format!(
                "{op}: expected a one-element operand, got shape {:?}",
                self.shape(s)
            )));
        }
        Ok(())
    }

    /// `a + s` with a one-element node `s`.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        self.check_scalar("add_scalar", s)?;
        let sv = self.value(s).item();
        let value = self.value(a).map(|x| x + sv);
        let rg = self.rg(&[a, s]);
        Ok(self.push(value, Op::AddScalar(a, s), rg))
    }

    /// `a * s` with a one-element node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        self.check_scalar("mul_scalar", s)?;
        let sv = self.value(s).item();
        let value = self.value(a).map(|x| x * sv);
        let rg = self.rg(&[a, s]);
        Ok(self.push(value, Op::MulScalar(a, s), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    /// `a + c` for a constant `c`.
    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::Shift(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// `max(a, 0)`; the gradient is zero wherever the input is negative.
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        let rg = self.rg(&[a]);
        self.push(value, Op::Mean(a), rg)
    }

    /// Mean squared difference between two equally shaped nodes.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Repeats a one-element node over `shape`.
    pub fn broadcast(&mut self, s: Var, shape: &[usize]) -> Result<Var> {
        self.check_scalar("broadcast", s)?;
        let value = Tensor::full(shape, self.value(s).item());
        let rg = self.rg(&[s]);
        Ok(self.push(value, Op::Broadcast(s), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Concatenates along the leading axis; trailing dims must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::arg("concat of zero tensors"))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != tail.len() + 1 || s[1..] != tail[..] {
                return Err(Error::shape("concat", self.shape(first), s));
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let rg = self.rg(parts);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat(parts.to_vec()), rg))
    }

    /// Rows `start..start + len` along the leading axis.
    pub fn narrow(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.is_empty() || len == 0 || start + len > s[0] {
            return Err(Error::dim(format!(
                "narrow {start}..{} out of range for shape {s:?}",
                start + len
            )));
        }
        let inner: usize = s[1..].iter().product();
        let data = self.value(a).data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = s.clone();
        shape[0] = len;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Narrow { input: a, start }, rg))
    }

    /// Reorders the last axis: `out[.., i] = a[.., order[i]]`.
    pub fn gather_by_order(&mut self, a: Var, order: Arc<ScanOrder>) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let l = *s.last().ok_or_else(|| Error::arg("gather on a rank-0 tensor"))?;
        if order.len() != l {
            return Err(Error::dim(format!(
                "scan order of length {} applied to an axis of length {l}",
                order.len()
            )));
        }
        let src = self.value(a).data();
        let fwd = order.forward();
        let mut data = Vec::with_capacity(src.len());
        for row in src.chunks(l) {
            data.extend(fwd.iter().map(|&j| row[j]));
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(s, data), Op::Gather { input: a, order }, rg))
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let value = Tensor::from_parts(
            vec![m, n],
            matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n),
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Matmul(a, b), rg))
    }

    /// Adds `bias[c]` to every element of channel `c` (leading axis).
    pub fn channel_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let bs = self.shape(bias);
        if bs.len() != 1 || s.is_empty() || bs[0] != s[0] {
            return Err(Error::shape("channel_bias", &s, bs));
        }
        let inner = self.value(a).len() / s[0];
        let b = self.value(bias).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + b[i / inner])
            .collect();
        let rg = self.rg(&[a, bias]);
        Ok(self.push(Tensor::from_parts(s, data), Op::ChannelBias(a, bias), rg))
    }

    /// Cross-correlation of `[C_in, H, W]` with `[C_out, C_in, k, k]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: Padding) -> Result<Var> {
        let (si, sk) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if si.len() != 3 || sk.len() != 4 || sk[2] != sk[3] {
            return Err(Error::shape("conv2d", &si, &sk));
        }
        if sk[1] != si[0] {
            return Err(Error::dim(format!(
                "conv2d: kernel expects {} input channels, input has {} (input {:?}, kernel {:?})",
                sk[1], si[0], si, sk
            )));
        }
        let k = sk[2];
        if !matches!(k, 1 | 3) || !matches!(stride, 1 | 2) {
            return Err(Error::arg(format!(
                "conv2d supports k in {{1,3}} and stride in {{1,2}}, got k={k} stride={stride}"
            )));
        }
        let pad = padding.amount(k);
        let geom = ConvGeom::new(si[0], si[1], si[2], sk[0], k, stride, pad)?;
        let data = conv2d_forward(self.value(input).data(), self.value(kernel).data(), &geom);
        let rg = self.rg(&[input, kernel]);
        Ok(self.push(
            Tensor::from_parts(vec![geom.c_out, geom.h_out, geom.w_out], data),
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            },
            rg,
        ))
    }

    /// Per-channel `k×k` convolution, stride 1; kernel shape `[C, 1, k, k]`.
    pub fn depthwise_conv2d(&mut self, input: Var, kernel: Var, padding: Padding) -> Result<Var> {
        let (si, sk) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if si.len() != 3 || sk.len() != 4 || sk[0] != si[0] || sk[1] != 1 || sk[2] != sk[3] {
            return Err(Error::shape("depthwise_conv2d", &si, &sk));
        }
        let k = sk[2];
        let pad = padding.amount(k);
        let geom = ConvGeom::new(1, si[1], si[2], 1, k, 1, pad)?;
        let x = self.value(input).data();
        let w = self.value(kernel).data();
        let plane_in = si[1] * si[2];
        let plane_out = geom.h_out * geom.w_out;
        let mut data = Vec::with_capacity(si[0] * plane_out);
        for c in 0..si[0] {
            data.extend(conv2d_forward(
                &x[c * plane_in..(c + 1) * plane_in],
                &w[c * k * k..(c + 1) * k * k],
                &geom,
            ));
        }
        let rg = self.rg(&[input, kernel]);
        Ok(self.push(
            Tensor::from_parts(vec![si[0], geom.h_out, geom.w_out], data),
            Op::DepthwiseConv2d { input, kernel, pad },
            rg,
        ))
    }

    /// Nearest-neighbour ×2 upsampling of `[C, H, W]`.
    pub fn upsample2(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(Error::dim(format!("upsample2 expects [C, H, W], got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let x = self.value(a).data();
        let mut data = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for r in 0..2 * h {
                for col in 0..2 * w {
                    data[(ch * 2 * h + r) * 2 * w + col] = x[(ch * h + r / 2) * w + col / 2];
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(vec![c, 2 * h, 2 * w], data), Op::Upsample2(a), rg))
    }

    /// Normalizes across the leading (channel) axis at every position, then
    /// applies per-channel `gamma` and `beta`.
    pub fn layer_norm(&mut self, input: Var, gamma: Var, beta: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        let c = *s.first().ok_or_else(|| Error::arg("layer_norm on rank-0 tensor"))?;
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::shape("layer_norm", &s, self.shape(p)));
            }
        }
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let inner = x.len() / c;
        let mut normalized = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; inner];
        let mut out = vec![0.0; x.len()];
        for p in 0..inner {
            let mean = (0..c).map(|ch| x[ch * inner + p]).sum::<f64>() / c as f64;
            let var = (0..c).map(|ch| (x[ch * inner + p] - mean).powi(2)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[p] = inv;
            for ch in 0..c {
                let i = ch * inner + p;
                normalized[i] = (x[i] - mean) * inv;
                out[i] = normalized[i] * g[ch] + b[ch];
            }
        }
        let rg = self.rg(&[input, gamma, beta]);
        Ok(self.push(
            Tensor::from_parts(s, out),
            Op::LayerNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    /// Selective state-space scan over `L` tokens for `Ch` independent channels.
    ///
    /// Shapes: `x`, `delta`: `[Ch, L]`; `a`: `[Ch, N]`; `b`, `c`: `[N, L]`;
    /// `d`: `[Ch]`. `delta` must be positive and `a` negative. Per channel
    /// the recurrence is `h_t = exp(Δ_t A) h_{t-1} + B̄_t x_t`,
    /// `y_t = <C_t, h_t> + D x_t` with the zero-order-hold `B̄_t`.
    pub fn selective_scan(&mut self, x: Var, delta: Var, a: Var, b: Var, c: Var, d: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sa = self.shape(a).to_vec();
        if sx.len() != 2 || sa.len() != 2 || sa[0] != sx[0] {
            return Err(Error::shape("selective_scan", &sx, &sa));
        }
        let (ch, l, n) = (sx[0], sx[1], sa[1]);
        self.same_shape("selective_scan", x, delta)?;
        for v in [b, c] {
            if self.shape(v) != [n, l] {
                return Err(Error::shape("selective_scan", &[n, l], self.shape(v)));
            }
        }
        if self.shape(d) != [ch] {
            return Err(Error::shape("selective_scan", &[ch], self.shape(d)));
        }
        let dims = ssm::ScanDims {
            channels: ch,
            len: l,
            state: n,
        };
        let inputs = ssm::ScanInputs {
            x: self.value(x).data(),
            delta: self.value(delta).data(),
            a: self.value(a).data(),
            b: self.value(b).data(),
            c: self.value(c).data(),
            d: self.value(d).data(),
        };
        let (y, states) = ssm::scan_with_states(&inputs, dims);
        let rg = self.rg(&[x, delta, a, b, c, d]);
        Ok(self.push(
            Tensor::from_parts(vec![ch, l], y),
            Op::SelectiveScan {
                inputs: [x, delta, a, b, c, d],
                states,
            },
            rg,
        ))
    }

    /// Applies the sensing matrix to a `[bands, H, W]` node.
    pub fn project(&mut self, cube: Var, op: Arc<SensingOperator>) -> Result<Var> {
        let s = self.shape(cube).to_vec();
        if s != [op.bands(), op.height(), op.width()] {
            return Err(Error::shape("project", &s, &[op.bands(), op.height(), op.width()]));
        }
        let data = op.forward_raw(self.value(cube).data());
        let rg = self.rg(&[cube]);
        let shape = vec![op.height(), op.detector_width()];
        Ok(self.push(Tensor::from_parts(shape, data), Op::Project { input: cube, op }, rg))
    }

    /// Applies the transposed sensing matrix to a `[H, W']` node.
    pub fn adjoint(&mut self, meas: Var, op: Arc<SensingOperator>) -> Result<Var> {
        let s = self.shape(meas).to_vec();
        if s != [op.height(), op.detector_width()] {
            return Err(Error::shape("adjoint", &s, &[op.height(), op.detector_width()]));
        }
        let data = op.adjoint_raw(self.value(meas).data());
        let rg = self.rg(&[meas]);
        let shape = vec![op.bands(), op.height(), op.width()];
        Ok(self.push(Tensor::from_parts(shape, data), Op::Adjoint { input: meas, op }, rg))
    }

    /// Reverse sweep from a one-element `loss` node.
    /// First node (in creation order) holding a NaN or infinity, with the
    /// name of the operation that produced it.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .position(|n| !n.value.all_finite())
            .map(|i| (i, self.nodes[i].op.name()))
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::arg(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.backprop_node(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Vec<f64>) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                let sum = existing.data().iter().zip(&g).map(|(a, b)| a + b).collect();
                *existing = Tensor::from_parts(existing.shape().to_vec(), sum);
            }
            slot @ None => {
                *slot = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
            }
        }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                self.accumulate(grads, *a, gd.iter().zip(bv).map(|(g, y)| g * y).collect());
                self.accumulate(grads, *b, gd.iter().zip(av).map(|(g, x)| g * x).collect());
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                self.accumulate(grads, *a, gd.iter().zip(bv).map(|(g, y)| g / y).collect());
                let gb = gd
                    .iter()
                    .zip(av.iter().zip(bv))
                    .map(|(g, (x, y))| -g * x / (y * y))
                    .collect();
                self.accumulate(grads, *b, gb);
            }
            Op::AddScalar(a, s) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *s, vec![gd.iter().sum()]);
            }
            Op::MulScalar(a, s) => {
                let sv = val(*s)[0];
                self.accumulate(grads, *a, gd.iter().map(|g| g * sv).collect());
                let gs = gd.iter().zip(val(*a)).map(|(g, x)| g * x).sum();
                self.accumulate(grads, *s, vec![gs]);
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, gd.iter().map(|g| g * s).collect()),
            Op::Shift(a) | Op::Reshape(a) => self.accumulate(grads, *a, gd.to_vec()),
            Op::Sigmoid(a) => {
                let y = node.value.data();
                self.accumulate(grads, *a, gd.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect());
            }
            Op::Gelu(a) => {
                let x = val(*a);
                self.accumulate(grads, *a, gd.iter().zip(x).map(|(g, &x)| g * gelu_grad(x)).collect());
            }
            Op::Softplus(a) => {
                let x = val(*a);
                self.accumulate(grads, *a, gd.iter().zip(x).map(|(g, &x)| g * sigmoid(x)).collect());
            }
            Op::Exp(a) => {
                let y = node.value.data();
                self.accumulate(grads, *a, gd.iter().zip(y).map(|(g, y)| g * y).collect());
            }
            Op::Relu(a) => {
                let x = val(*a);
                let gx = gd.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
                self.accumulate(grads, *a, gx);
            }
            Op::Sum(a) => {
                let n = self.nodes[a.0].value.len();
                self.accumulate(grads, *a, vec![gd[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len();
                self.accumulate(grads, *a, vec![gd[0] / n as f64; n]);
            }
            Op::Broadcast(s) => self.accumulate(grads, *s, vec![gd.iter().sum()]),
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.len();
                    self.accumulate(grads, p, gd[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::Narrow { input, start } => {
                let src = &self.nodes[input.0].value;
                let inner: usize = src.shape()[1..].iter().product();
                let mut gx = vec![0.0; src.len()];
                gx[start * inner..start * inner + gd.len()].copy_from_slice(gd);
                self.accumulate(grads, *input, gx);
            }
            Op::Gather { input, order } => {
                let l = order.len();
                let fwd = order.forward();
                let mut gx = vec![0.0; gd.len()];
                for (row_g, row_x) in gd.chunks(l).zip(gx.chunks_mut(l)) {
                    for (i, &j) in fwd.iter().enumerate() {
                        row_x[j] += row_g[i];
                    }
                }
                self.accumulate(grads, *input, gx);
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.nodes[a.0].requires_grad {
                    let bt = transpose_raw(val(*b), k, n);
                    self.accumulate(grads, *a, matmul_raw(gd, &bt, m, n, k));
                }
                if self.nodes[b.0].requires_grad {
                    let at = transpose_raw(val(*a), m, k);
                    self.accumulate(grads, *b, matmul_raw(&at, gd, k, m, n));
                }
            }
            Op::ChannelBias(a, bias) => {
                self.accumulate(grads, *a, gd.to_vec());
                let c = self.nodes[bias.0].value.len();
                let inner = gd.len() / c;
                let gb = gd.chunks(inner).map(|ch| ch.iter().sum()).collect();
                self.accumulate(grads, *bias, gb);
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                pad,
            } => {
                let si = self.nodes[input.0].value.shape();
                let sk = self.nodes[kernel.0].value.shape();
                let geom = ConvGeom::new(si[0], si[1], si[2], sk[0], sk[2], *stride, *pad)
                    .expect("geometry validated in forward");
                let (gx, gk) = conv2d_backward(val(*input), val(*kernel), gd, &geom);
                self.accumulate(grads, *input, gx);
                self.accumulate(grads, *kernel, gk);
            }
            Op::DepthwiseConv2d { input, kernel, pad } => {
                let si = self.nodes[input.0].value.shape();
                let k = self.nodes[kernel.0].value.shape()[2];
                let geom = ConvGeom::new(1, si[1], si[2], 1, k, 1, *pad).expect("validated");
                let (x, w) = (val(*input), val(*kernel));
                let plane_in = si[1] * si[2];
                let plane_out = geom.h_out * geom.w_out;
                let mut gx = vec![0.0; x.len()];
                let mut gk = vec![0.0; w.len()];
                for c in 0..si[0] {
                    let (gxc, gkc) = conv2d_backward(
                        &x[c * plane_in..(c + 1) * plane_in],
                        &w[c * k * k..(c + 1) * k * k],
                        &gd[c * plane_out..(c + 1) * plane_out],
                        &geom,
                    );
                    gx[c * plane_in..(c + 1) * plane_in].copy_from_slice(&gxc);
                    gk[c * k * k..(c + 1) * k * k].copy_from_slice(&gkc);
                }
                self.accumulate(grads, *input, gx);
                self.accumulate(grads, *kernel, gk);
            }
            Op::Upsample2(a) => {
                let s = self.nodes[a.0].value.shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let mut gx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for r in 0..2 * h {
                        for col in 0..2 * w {
                            gx[(ch * h + r / 2) * w + col / 2] += gd[(ch * 2 * h + r) * 2 * w + col];
                        }
                    }
                }
                self.accumulate(grads, *a, gx);
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let c = self.nodes[gamma.0].value.len();
                let gam = val(*gamma);
                let inner = gd.len() / c;
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                let mut gx = vec![0.0; gd.len()];
                for p in 0..inner {
                    let mut sum_dn = 0.0;
                    let mut sum_dn_n = 0.0;
                    for ch in 0..c {
                        let i = ch * inner + p;
                        gg[ch] += gd[i] * normalized[i];
                        gb[ch] += gd[i];
                        let dn = gd[i] * gam[ch];
                        sum_dn += dn;
                        sum_dn_n += dn * normalized[i];
                    }
                    let cf = c as f64;
                    for ch in 0..c {
                        let i = ch * inner + p;
                        let dn = gd[i] * gam[ch];
                        gx[i] = inv_std[p] / cf * (cf * dn - sum_dn - normalized[i] * sum_dn_n);
                    }
                }
                self.accumulate(grads, *input, gx);
                self.accumulate(grads, *gamma, gg);
                self.accumulate(grads, *beta, gb);
            }
            Op::SelectiveScan { inputs, states } => {
                let [x, delta, a, b, c, d] = *inputs;
                let sx = self.nodes[x.0].value.shape();
                let n = self.nodes[a.0].value.shape()[1];
                let dims = ssm::ScanDims {
                    channels: sx[0],
                    len: sx[1],
                    state: n,
                };
                let si = ssm::ScanInputs {
                    x: val(x),
                    delta: val(delta),
                    a: val(a),
                    b: val(b),
                    c: val(c),
                    d: val(d),
                };
                let gr = ssm::scan_backward(&si, dims, states, gd);
                self.accumulate(grads, x, gr.x);
                self.accumulate(grads, delta, gr.delta);
                self.accumulate(grads, a, gr.a);
                self.accumulate(grads, b, gr.b);
                self.accumulate(grads, c, gr.c);
                self.accumulate(grads, d, gr.d);
            }
            Op::Project { input, op } => self.accumulate(grads, *input, op.adjoint_raw(gd)),
            Op::Adjoint { input, op } => self.accumulate(grads, *input, op.forward_raw(gd)),
        }
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeom {
    fn new(c_in: usize, h: usize, w: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::dim(format!(
                "conv2d: {h}x{w} input is smaller than the {k}x{k} kernel"
            )));
        }
        Ok(ConvGeom {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (w + 2 * pad - k) / stride + 1,
        })
    }

    /// Input coordinate for output `o` and kernel tap `t`, if in range.
    #[inline]
    fn src(&self, o: usize, t: usize, size: usize) -> Option<usize> {
        let p = (o * self.stride + t) as isize - self.pad as isize;
        (p >= 0 && (p as usize) < size).then_some(p as usize)
    }
}

fn conv2d_forward(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let k = g.k;
    let mut out = vec![0.0; g.c_out * g.h_out * g.w_out];
    for co in 0..g.c_out {
        for ci in 0..g.c_in {
            let xin = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w[((co * g.c_in + ci) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..g.h_out {
                        let Some(iy) = g.src(oy, ky, g.h) else { continue };
                        let orow = &mut out[(co * g.h_out + oy) * g.w_out..(co * g.h_out + oy + 1) * g.w_out];
                        for (ox, o) in orow.iter_mut().enumerate() {
                            if let Some(ix) = g.src(ox, kx, g.w) {
                                *o += wv * xin[iy * g.w + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv2d_backward(x: &[f64], w: &[f64], gout: &[f64], g: &ConvGeom) -> (Vec<f64>, Vec<f64>) {
    let k = g.k;
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    for co in 0..g.c_out {
        for ci in 0..g.c_in {
            let base = ci * g.h * g.w;
            for ky in 0..k {
                for kx in 0..k {
                    let wi = ((co * g.c_in + ci) * k + ky) * k + kx;
                    let wv = w[wi];
                    let mut acc = 0.0;
                    for oy in 0..g.h_out {
                        let Some(iy) = g.src(oy, ky, g.h) else { continue };
                        for ox in 0..g.w_out {
                            if let Some(ix) = g.src(ox, kx, g.w) {
                                let go = gout[(co * g.h_out + oy) * g.w_out + ox];
                                acc += go * x[base + iy * g.w + ix];
                                gx[base + iy * g.w + ix] += go * wv;
                            }
                        }
                    }
                    gw[wi] += acc;
                }
            }
        }
    }
    (gx, gw)
}
