//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its output
//! value and the ids of its inputs. [`Graph::backward`] replays the tape once,
//! in reverse, and leaves a gradient on every node that depends on a
//! [`Graph::param`] leaf.

use crate::conv::{Conv2dOptions, ConvGeometry};
use crate::error::{Error, Result};
use crate::linalg::{gemm, gemm_new, MatRef};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise single-input operations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary {
    Relu,
    /// `x` for `x > 0`, `e^x - 1` otherwise (alpha = 1).
    Elu,
    Sigmoid,
    Exp,
    Ln,
    /// `x * sigmoid(1.702 x)`, the sigmoid approximation of GELU.
    Gelu,
    Scale(f64),
    AddScalar(f64),
    /// `max(x, c)`; gradient flows only where `x > c`.
    ClampMin(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

const GELU_K: f64 = 1.702;

/// `sigmoid(1.702 x)`; an overflowing `exp` yields exactly 0.
#[inline]
fn gelu_gate(x: f64) -> f64 {
    1.0 / (1.0 + (-GELU_K * x).exp())
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Unary {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Unary::Sigmoid => sigmoid(x),
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Gelu => x * gelu_gate(x),
            Unary::Scale(c) => c * x,
            Unary::AddScalar(c) => x + c,
            Unary::ClampMin(c) => x.max(c),
        }
    }

    fn map(self, xs: &[f64]) -> Vec<f64> {
        fn each(xs: &[f64], f: impl Fn(f64) -> f64) -> Vec<f64> {
            xs.iter().map(|&x| f(x)).collect()
        }
        match self {
            Unary::Relu => each(xs, |x| x.max(0.0)),
            Unary::Scale(c) => each(xs, |x| c * x),
            Unary::AddScalar(c) => each(xs, |x| x + c),
            Unary::Gelu => each(xs, |x| x * gelu_gate(x)),
            op => each(xs, |x| op.apply(x)),
        }
    }

    /// Derivative given the input `x` and the forward output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Exp => y,
            Unary::Ln => 1.0 / x,
            Unary::Gelu => {
                let s = gelu_gate(x);
                s + GELU_K * x * s * (1.0 - s)
            }
            Unary::Scale(c) => c,
            Unary::AddScalar(_) => 1.0,
            Unary::ClampMin(c) => {
                if x > c {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    fn name(self) -> &'static str {
        match self {
            Unary::Relu => "relu",
            Unary::Elu => "elu",
            Unary::Sigmoid => "sigmoid",
            Unary::Exp => "exp",
            Unary::Ln => "ln",
            Unary::Gelu => "gelu",
            Unary::Scale(_) => "scale",
            Unary::AddScalar(_) => "add_scalar",
            Unary::ClampMin(_) => "clamp_min",
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Unary(NodeId, Unary),
    Binary(NodeId, NodeId, Binary),
    /// `op(a)·op(b)` where `op` optionally transposes.
    MatMul {
        a: NodeId,
        b: NodeId,
        ta: bool,
        tb: bool,
    },
    Transpose(NodeId),
    Reshape(NodeId),
    Sum(NodeId),
    SumRows(NodeId),
    MeanRows(NodeId),
    DivRows(NodeId, NodeId),
    Select(NodeId, usize),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        geom: ConvGeometry,
    },
    AddChannelBias(NodeId, NodeId),
    ScaleChannels(NodeId, NodeId),
    SpatialMean(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradient tape. One graph records one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

fn finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// Adds `f(k)` to entry `k` of the gradient of `id`, creating it if absent.
fn acc_map(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize, f: impl Fn(usize) -> f64) {
    match &mut grads[id.0] {
        Some(v) => v.iter_mut().enumerate().for_each(|(k, d)| *d += f(k)),
        slot @ None => *slot = Some((0..len).map(f).collect()),
    }
}

fn acc_vec(grads: &mut [Option<Vec<f64>>], id: NodeId, contrib: Vec<f64>) {
    match &mut grads[id.0] {
        Some(v) => v.iter_mut().zip(&contrib).for_each(|(d, c)| *d += c),
        slot @ None => *slot = Some(contrib),
    }
}

fn acc_gemm(grads: &mut [Option<Vec<f64>>], id: NodeId, a: MatRef<'_>, b: MatRef<'_>) {
    match &mut grads[id.0] {
        Some(v) => gemm(a, b, v, true),
        slot @ None => *slot = Some(gemm_new(a, b)),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        finite(op_name, &data)?;
        let requires_grad = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, data),
            op,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient of the loss with respect to `id`, once `backward` has run.
    pub fn grad(&self, id: NodeId) -> Option<Tensor> {
        let data = self.grads.get(id.0)?.as_ref()?;
        Some(Tensor::from_parts(self.nodes[id.0].value.shape().to_vec(), data.clone()))
    }

    pub fn grad_data(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0)?.as_deref()
    }

    // ---- pointwise ----

    pub fn unary(&mut self, op: Unary, x: NodeId) -> Result<NodeId> {
        let v = &self.nodes[x.0].value;
        let data = op.map(v.data());
        self.push(op.name(), v.shape().to_vec(), data, Op::Unary(x, op), &[x])
    }

    pub fn binary(&mut self, op: Binary, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let name = match op {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        if va.shape() != vb.shape() {
            return Err(mismatch(name, va, vb));
        }
        let f = match op {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
        };
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        self.push(name, va.shape().to_vec(), data, Op::Binary(a, b, op), &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Unary::Relu, x)
    }

    pub fn elu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Unary::Elu, x)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Unary::Exp, x)
    }

    pub fn ln(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Unary::Ln, x)
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(Unary::Gelu, x)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.unary(Unary::Scale(c), x)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.unary(Unary::AddScalar(c), x)
    }

    pub fn clamp_min(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.unary(Unary::ClampMin(c), x)
    }

    // ---- linear algebra and reshaping ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_ext(a, b, false, false)
    }

    /// `aᵀ · b` without materializing the transpose.
    pub fn matmul_tn(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_ext(a, b, true, false)
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_ext(a, b, false, true)
    }

    fn matmul_ext(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (ar, ac) = va.dims2("matmul")?;
        let (br, bc) = vb.dims2("matmul")?;
        let ma = MatRef::new(va.data(), ar, ac);
        let mb = MatRef::new(vb.data(), br, bc);
        let ma = if ta { ma.t() } else { ma };
        let mb = if tb { mb.t() } else { mb };
        if ma.cols != mb.rows {
            return Err(mismatch("matmul", va, vb));
        }
        let shape = vec![ma.rows, mb.cols];
        let out = gemm_new(ma, mb);
        self.push("matmul", shape, out, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.nodes[x.0].value.transpose()?;
        let shape = t.shape().to_vec();
        self.push("transpose", shape, t.into_data(), Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = &self.nodes[x.0].value;
        let t = v.clone().reshape(shape)?;
        self.push("reshape", shape.to_vec(), t.into_data(), Op::Reshape(x), &[x])
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.nodes[x.0].value.data().iter().sum();
        self.push("sum", vec![1], vec![s], Op::Sum(x), &[x])
    }

    /// Column sums of an `n×d` matrix, shape `1×d`.
    pub fn sum_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let data = self.column_sums(x)?;
        let d = data.len();
        self.push("sum_rows", vec![1, d], data, Op::SumRows(x), &[x])
    }

    /// Column means of an `n×d` matrix, shape `1×d`.
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.nodes[x.0].value.dims2("mean_rows")?.0 as f64;
        let data: Vec<f64> = self.column_sums(x)?.into_iter().map(|s| s / n).collect();
        let d = data.len();
        self.push("mean_rows", vec![1, d], data, Op::MeanRows(x), &[x])
    }

    fn column_sums(&self, x: NodeId) -> Result<Vec<f64>> {
        let v = &self.nodes[x.0].value;
        let (n, d) = v.dims2("sum_rows")?;
        let mut out = vec![0.0; d];
        for i in 0..n {
            for (o, &a) in out.iter_mut().zip(&v.data()[i * d..(i + 1) * d]) {
                *o += a;
            }
        }
        Ok(out)
    }

    /// Divides row `i` of an `n×d` matrix by `denom[i]` (`denom` is `n×1`).
    pub fn div_rows(&mut self, x: NodeId, denom: NodeId) -> Result<NodeId> {
        let (vx, vd) = (&self.nodes[x.0].value, &self.nodes[denom.0].value);
        let (n, d) = vx.dims2("div_rows")?;
        if vd.shape() != [n, 1] {
            return Err(mismatch("div_rows", vx, vd));
        }
        let mut out = vx.data().to_vec();
        for (row, &q) in out.chunks_mut(d).zip(vd.data()) {
            row.iter_mut().for_each(|a| *a /= q);
        }
        self.push("div_rows", vec![n, d], out, Op::DivRows(x, denom), &[x, denom])
    }

    /// Picks one entry (flat row-major index) as a `[1]` tensor.
    pub fn select(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let v = &self.nodes[x.0].value;
        let a = *v
            .data()
            .get(index)
            .ok_or_else(|| Error::invalid(format!("select: index {index} out of range for {:?}", v.shape())))?;
        self.push("select", vec![1], vec![a], Op::Select(x, index), &[x])
    }

    // ---- normalization ----

    /// Row-wise layer normalization over the last axis with population variance.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        if !(eps > 0.0) {
            return Err(Error::invalid("layer_norm: eps must be positive"));
        }
        let (vx, vg, vb) = (&self.nodes[x.0].value, &self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        let d = *vx.shape().last().expect("rank >= 1");
        if vg.numel() != d {
            return Err(mismatch("layer_norm", vx, vg));
        }
        if vb.numel() != d {
            return Err(mismatch("layer_norm", vx, vb));
        }
        let rows = vx.numel() / d;
        let mut xhat = vec![0.0; vx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; vx.numel()];
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = vg.data()[j] * h + vb.data()[j];
            }
        }
        let shape = vx.shape().to_vec();
        self.push(
            "layer_norm",
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Max-subtracted softmax over the last axis.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let v = &self.nodes[x.0].value;
        let data = softmax_last_axis(v);
        self.push("softmax", v.shape().to_vec(), data, Op::Softmax(x), &[x])
    }

    // ---- convolution ----

    /// Cross-correlation of a `C×H×W` input with `C_out×(C/g)×kh×kw` weights.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, opts: Conv2dOptions) -> Result<NodeId> {
        let (vx, vw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let geom = ConvGeometry::new(vx.shape(), vw.shape(), opts)?;
        let out = geom.forward(vx.data(), vw.data());
        self.push("conv2d", geom.out_shape(), out, Op::Conv2d { x, w, geom }, &[x, w])
    }

    /// Adds `bias[c]` to every position of channel `c`.
    pub fn add_channel_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let mut out = self.nodes[x.0].value.data().to_vec();
        let hw = self.channel_plane(x, bias, "add_channel_bias")?;
        let b = self.nodes[bias.0].value.data();
        for (plane, &bc) in out.chunks_mut(hw).zip(b) {
            plane.iter_mut().for_each(|a| *a += bc);
        }
        let shape = self.nodes[x.0].value.shape().to_vec();
        self.push("add_channel_bias", shape, out, Op::AddChannelBias(x, bias), &[x, bias])
    }

    /// Multiplies channel `c` by `s[c]`.
    pub fn scale_channels(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let mut out = self.nodes[x.0].value.data().to_vec();
        let hw = self.channel_plane(x, s, "scale_channels")?;
        let sv = self.nodes[s.0].value.data();
        for (plane, &sc) in out.chunks_mut(hw).zip(sv) {
            plane.iter_mut().for_each(|a| *a *= sc);
        }
        let shape = self.nodes[x.0].value.shape().to_vec();
        self.push("scale_channels", shape, out, Op::ScaleChannels(x, s), &[x, s])
    }

    fn channel_plane(&self, x: NodeId, per_channel: NodeId, op: &'static str) -> Result<usize> {
        let (vx, vc) = (&self.nodes[x.0].value, &self.nodes[per_channel.0].value);
        let (c, h, w) = vx.dims3(op)?;
        if vc.numel() != c {
            return Err(mismatch(op, vx, vc));
        }
        Ok(h * w)
    }

    /// Global average pool of a `C×H×W` map, shape `C×1`.
    pub fn spatial_mean(&mut self, x: NodeId) -> Result<NodeId> {
        let v = &self.nodes[x.0].value;
        let (c, h, w) = v.dims3("spatial_mean")?;
        let hw = h * w;
        let data = v.data().chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
        self.push("spatial_mean", vec![c, 1], data, Op::SpatialMean(x), &[x])
    }

    // ---- reverse pass ----

    /// Backpropagates from a single-element `loss`. A tape supports one pass.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let root = &self.nodes[loss.0].value;
        if root.numel() != 1 {
            return Err(Error::NonScalarLoss(root.shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let wants = |id: NodeId| self.nodes[id.0].requires_grad;
        let val = |id: NodeId| &self.nodes[id.0].value;
        let y = node.value.data();
        let n = g.len();
        match &node.op {
            Op::Leaf => {}
            &Op::Unary(x, op) => {
                let xv = val(x).data();
                match op {
                    Unary::Scale(c) => acc_map(grads, x, n, |k| g[k] * c),
                    Unary::AddScalar(_) => acc_map(grads, x, n, |k| g[k]),
                    Unary::Gelu => acc_map(grads, x, n, |k| {
                        // Recover the gate from y = x·s when that is well conditioned.
                        let s = if xv[k].abs() > 1e-3 { y[k] / xv[k] } else { gelu_gate(xv[k]) };
                        g[k] * (s + GELU_K * xv[k] * s * (1.0 - s))
                    }),
                    _ => acc_map(grads, x, n, |k| g[k] * op.derivative(xv[k], y[k])),
                }
            }
            &Op::Binary(a, b, op) => {
                let (av, bv) = (val(a).data(), val(b).data());
                if wants(a) {
                    match op {
                        Binary::Add | Binary::Sub => acc_map(grads, a, n, |k| g[k]),
                        Binary::Mul => acc_map(grads, a, n, |k| g[k] * bv[k]),
                    }
                }
                if wants(b) {
                    match op {
                        Binary::Add => acc_map(grads, b, n, |k| g[k]),
                        Binary::Sub => acc_map(grads, b, n, |k| -g[k]),
                        Binary::Mul => acc_map(grads, b, n, |k| g[k] * av[k]),
                    }
                }
            }
            &Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (val(a), val(b));
                let ma = MatRef::new(va.data(), va.shape()[0], va.shape()[1]);
                let mb = MatRef::new(vb.data(), vb.shape()[0], vb.shape()[1]);
                let opa = if ta { ma.t() } else { ma };
                let opb = if tb { mb.t() } else { mb };
                let gm = MatRef::new(g, opa.rows, opb.cols);
                if wants(a) {
                    if ta {
                        acc_gemm(grads, a, opb, gm.t());
                    } else {
                        acc_gemm(grads, a, gm, opb.t());
                    }
                }
                if wants(b) {
                    if tb {
                        acc_gemm(grads, b, gm.t(), opa);
                    } else {
                        acc_gemm(grads, b, opa.t(), gm);
                    }
                }
            }
            &Op::Transpose(x) => {
                let (r, c) = (val(x).shape()[0], val(x).shape()[1]);
                acc_map(grads, x, n, |k| g[(k % c) * r + k / c]);
            }
            &Op::Reshape(x) => acc_map(grads, x, n, |k| g[k]),
            &Op::Sum(x) => acc_map(grads, x, val(x).numel(), |_| g[0]),
            &Op::SumRows(x) | &Op::MeanRows(x) => {
                let (rows, d) = (val(x).shape()[0], val(x).shape()[1]);
                let s = if matches!(node.op, Op::MeanRows(_)) { 1.0 / rows as f64 } else { 1.0 };
                acc_map(grads, x, rows * d, |k| g[k % d] * s);
            }
            &Op::DivRows(x, den) => {
                let (xv, dv) = (val(x).data(), val(den).data());
                let d = val(x).shape()[1];
                if wants(x) {
                    acc_map(grads, x, xv.len(), |k| g[k] / dv[k / d]);
                }
                if wants(den) {
                    acc_map(grads, den, dv.len(), |r| {
                        let dot: f64 = (r * d..(r + 1) * d).map(|k| g[k] * xv[k]).sum();
                        -dot / (dv[r] * dv[r])
                    });
                }
            }
            &Op::Select(x, index) => {
                acc_map(grads, x, val(x).numel(), |k| if k == index { g[0] } else { 0.0 });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = val(*gamma).numel();
                let gam = val(*gamma).data();
                let rows = inv_std.len();
                if wants(*gamma) {
                    acc_map(grads, *gamma, d, |j| (0..rows).map(|r| g[r * d + j] * xhat[r * d + j]).sum());
                }
                if wants(*beta) {
                    acc_map(grads, *beta, d, |j| (0..rows).map(|r| g[r * d + j]).sum());
                }
                if wants(*x) {
                    let mut dx = vec![0.0; xhat.len()];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let off = r * d;
                        let dh: Vec<f64> = (0..d).map(|j| g[off + j] * gam[j]).collect();
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = (0..d).map(|j| dh[j] * xhat[off + j]).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dx[off + j] = is * (dh[j] - mean_dh - xhat[off + j] * mean_dh_h);
                        }
                    }
                    acc_vec(grads, *x, dx);
                }
            }
            &Op::Softmax(x) => {
                let c = *node.value.shape().last().expect("rank >= 1");
                let dots: Vec<f64> = y
                    .chunks(c)
                    .zip(g.chunks(c))
                    .map(|(ys, gs)| ys.iter().zip(gs).map(|(a, b)| a * b).sum())
                    .collect();
                acc_map(grads, x, n, |k| y[k] * (g[k] - dots[k / c]));
            }
            Op::Conv2d { x, w, geom } => {
                let (dx, dw) = geom.backward(val(*x).data(), val(*w).data(), g, wants(*x), wants(*w));
                if let Some(dx) = dx {
                    acc_vec(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    acc_vec(grads, *w, dw);
                }
            }
            &Op::AddChannelBias(x, b) => {
                let hw = n / val(b).numel();
                if wants(x) {
                    acc_map(grads, x, n, |k| g[k]);
                }
                if wants(b) {
                    acc_map(grads, b, val(b).numel(), |c| g[c * hw..(c + 1) * hw].iter().sum());
                }
            }
            &Op::ScaleChannels(x, s) => {
                let (xv, sv) = (val(x).data(), val(s).data());
                let hw = n / sv.len();
                if wants(x) {
                    acc_map(grads, x, n, |k| g[k] * sv[k / hw]);
                }
                if wants(s) {
                    acc_map(grads, s, sv.len(), |c| (c * hw..(c + 1) * hw).map(|k| g[k] * xv[k]).sum());
                }
            }
            &Op::SpatialMean(x) => {
                let total = val(x).numel();
                let hw = total / n;
                acc_map(grads, x, total, |k| g[k / hw] / hw as f64);
            }
        }
    }
}

pub(crate) fn softmax_last_axis(v: &Tensor) -> Vec<f64> {
    let c = *v.shape().last().expect("rank >= 1");
    let mut out = v.data().to_vec();
    for row in out.chunks_mut(c) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for a in row.iter_mut() {
            *a = (*a - m).exp();
            s += *a;
        }
        row.iter_mut().for_each(|a| *a /= s);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::eye(2).unwrap());
        let m = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let p = g.matmul(i, m).unwrap();
        assert_eq!(g.value(p).data(), &[1., 2., 3., 4.]);
        let a = g.constant(t(&[1, 2], &[1., 2.]));
        let b = g.constant(t(&[2, 1], &[3., 4.]));
        let d = g.matmul(a, b).unwrap();
        assert_eq!(g.value(d).data(), &[11.]);
        assert!(g.matmul(a, a).is_err());
    }

    #[test]
    fn pointwise_values() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[-2., 0., 3.]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0., 0., 3.]);
        let m1 = g.constant(t(&[1], &[-1.]));
        let e = g.elu(m1).unwrap();
        assert!((g.value(e).data()[0] - (-0.632_120_558_828_557_7)).abs() < 1e-12);
        let z = g.constant(t(&[1], &[0.]));
        let s = g.sigmoid(z).unwrap();
        assert_eq!(g.value(s).data(), &[0.5]);
    }

    #[test]
    fn binary_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1., 2.]));
        let b = g.constant(t(&[1, 2], &[1., 2.]));
        assert!(matches!(g.add(a, b), Err(Error::ShapeMismatch { op: "add", .. })));
        assert!(g.mul(a, b).is_err());
    }

    #[test]
    fn overflow_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1], &[1000.]));
        assert!(matches!(g.exp(x), Err(Error::NonFinite { op: "exp" })));
    }

    #[test]
    fn layer_norm_cases() {
        let mut g = Graph::new();
        let gamma = g.constant(t(&[3], &[1., 1., 1.]));
        let beta = g.constant(t(&[3], &[0., 0., 0.]));
        let x = g.constant(t(&[1, 3], &[5., 5., 5.]));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0., 0., 0.]);

        let g2 = g.constant(t(&[2], &[1., 1.]));
        let b2 = g.constant(t(&[2], &[0., 0.]));
        let x2 = g.constant(t(&[1, 2], &[1., 3.]));
        let y2 = g.layer_norm(x2, g2, b2, 1e-12).unwrap();
        let out = g.value(y2).data();
        assert!((out[0] + 1.0).abs() < 1e-6 && (out[1] - 1.0).abs() < 1e-6);
        assert!(g.layer_norm(x2, g2, b2, 0.0).is_err());
    }

    #[test]
    fn softmax_cases() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[0., 0.]));
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
        let l = g.constant(t(&[3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]));
        let p = g.softmax(l).unwrap();
        for (a, b) in g.value(p).data().iter().zip([1. / 6., 2. / 6., 3. / 6.]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn product_rule_and_relu_grad() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.));
        let y = g.param(Tensor::scalar(3.));
        let l = g.mul(x, y).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[3.]);
        assert_eq!(g.grad(y).unwrap().data(), &[2.]);

        let mut g = Graph::new();
        let x = g.param(t(&[2], &[-1., 2.]));
        let r = g.relu(x).unwrap();
        let s = g.sum(r).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0., 1.]);
    }

    #[test]
    fn backward_twice_fails() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.));
        let l = g.mul(x, x).unwrap();
        g.backward(l).unwrap();
        assert!(matches!(g.backward(l), Err(Error::TapeConsumed)));
    }

    #[test]
    fn backward_needs_scalar() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1., 2.]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
        // The failed attempt does not consume the tape.
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.));
        let c = g.constant(Tensor::scalar(5.));
        let l = g.mul(x, c).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap().data(), &[5.]);
    }
}
