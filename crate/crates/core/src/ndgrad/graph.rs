use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub type NodeId = usize;

/// Append-only tape of primitive applications.
///
/// Nodes are numbered in creation order, so the tape is acyclic by
/// construction and a reverse sweep over ids is a valid topological order.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

struct Node {
    op: Op,
    value: Rc<Tensor>,
    requires_grad: bool,
}

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Maximum(NodeId, NodeId),
    Minimum(NodeId, NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, f64),
    MatMul(NodeId, NodeId),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Sigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    PowConst(NodeId, f64),
    Softplus(NodeId),
    Relu(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Reshape(NodeId),
    Concat(Vec<NodeId>),
    GlobalAvgPool(NodeId),
    Gather(NodeId, Vec<usize>),
    PairwiseSqDist(NodeId, NodeId),
}

/// A tensor recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients from one backward sweep, keyed by node id.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros of its shape when the loss does not reach it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that receives gradients.
    pub fn param(&self, t: Tensor) -> Var<'_> {
        self.push(Op::Leaf, t, true)
    }

    /// A leaf that is never differentiated.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(Op::Leaf, t, false)
    }

    pub fn concat<'g>(&'g self, parts: &[Var<'g>]) -> Result<Var<'g>> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let mut values = Vec::with_capacity(parts.len());
        for p in parts {
            self.check(*p)?;
            values.push(p.value());
        }
        let tail = first_tail(&values[0])?;
        let mut rows = 0;
        let mut data = Vec::new();
        for v in &values {
            if first_tail(v)? != tail {
                return Err(Error::shape("concat", values[0].shape(), v.shape()));
            }
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(tail);
        let rg = parts.iter().any(|p| p.requires_grad());
        let out = Tensor::new(shape, data)?;
        Ok(self.push(Op::Concat(parts.iter().map(|p| p.id).collect()), out, rg))
    }

    fn push(&self, op: Op, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value: Rc::new(value),
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn check(&self, v: Var<'_>) -> Result<()> {
        if std::ptr::eq(self, v.graph) {
            Ok(())
        } else {
            Err(Error::ForeignVar)
        }
    }

    fn value(&self, id: NodeId) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        self.check(loss)?;
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut acc: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        acc[loss.id] = Some(vec![1.0]);
        let mut out: Vec<Option<Tensor>> = vec![None; nodes.len()];

        for id in (0..=loss.id).rev() {
            let Some(g) = acc[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                propagate(&nodes, id, &g, &mut acc);
            }
            out[id] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
        }
        Ok(Gradients { grads: out })
    }
}

fn first_tail(t: &Tensor) -> Result<&[usize]> {
    if t.rank() == 0 {
        Err(Error::InvalidArgument("concat needs rank >= 1".into()))
    } else {
        Ok(&t.shape()[1..])
    }
}

/// Adds `g` contributions of node `id` into its inputs' accumulators.
fn propagate(nodes: &[Node], id: NodeId, g: &[f64], acc: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let val = |i: NodeId| -> &Tensor { &nodes[i].value };
    let wants = |i: NodeId| nodes[i].requires_grad;
    macro_rules! with_grad {
        ($i:expr, |$buf:ident| $body:expr) => {{
            let i = $i;
            if wants(i) {
                let n = nodes[i].value.numel();
                let $buf: &mut Vec<f64> = acc[i].get_or_insert_with(|| vec![0.0; n]);
                $body;
            }
        }};
    }

    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            with_grad!(*a, |buf| reduce_into(buf, g, 1.0));
            with_grad!(*b, |buf| reduce_into(buf, g, sign));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            with_grad!(*a, |buf| binary_grad(buf, g, bv.data(), |gi, y| gi * y));
            with_grad!(*b, |buf| binary_grad(buf, g, av.data(), |gi, x| gi * x));
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            with_grad!(*a, |buf| binary_grad(buf, g, bv.data(), |gi, y| gi / y));
            if wants(*b) {
                let n = g.len();
                let contrib: Vec<f64> = (0..n)
                    .map(|i| {
                        let x = av.data()[if av.numel() == 1 { 0 } else { i }];
                        let y = bv.data()[if bv.numel() == 1 { 0 } else { i }];
                        -g[i] * x / (y * y)
                    })
                    .collect();
                with_grad!(*b, |buf| reduce_into(buf, &contrib, 1.0));
            }
        }
        Op::Maximum(a, b) | Op::Minimum(a, b) => {
            let is_max = matches!(node.op, Op::Maximum(..));
            let (av, bv) = (val(*a), val(*b));
            let n = g.len();
            let pick_a: Vec<bool> = (0..n)
                .map(|i| {
                    let x = av.data()[if av.numel() == 1 { 0 } else { i }];
                    let y = bv.data()[if bv.numel() == 1 { 0 } else { i }];
                    if is_max {
                        x >= y
                    } else {
                        x <= y
                    }
                })
                .collect();
            let ga: Vec<f64> = (0..n).map(|i| if pick_a[i] { g[i] } else { 0.0 }).collect();
            let gb: Vec<f64> = (0..n).map(|i| if pick_a[i] { 0.0 } else { g[i] }).collect();
            with_grad!(*a, |buf| reduce_into(buf, &ga, 1.0));
            with_grad!(*b, |buf| reduce_into(buf, &gb, 1.0));
        }
        Op::AddScalar(a) => with_grad!(*a, |buf| axpy(buf, g, 1.0)),
        Op::MulScalar(a, c) => with_grad!(*a, |buf| axpy(buf, g, *c)),
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            // dA = G B^T ; dB = A^T G
            with_grad!(*a, |buf| kernels::gemm(
                m, n, k, g, n as isize, 1, bv.data(), 1, n as isize, 1.0, buf
            ));
            with_grad!(*b, |buf| kernels::gemm(
                k, m, n, av.data(), 1, k as isize, g, n as isize, 1, 1.0, buf
            ));
        }
        Op::Conv2d {
            input,
            weight,
            bias,
            geom,
            cols,
        } => conv_backward(nodes, *input, *weight, *bias, geom, cols, g, acc),
        Op::Sigmoid(a) => {
            let y = &node.value;
            with_grad!(*a, |buf| for (i, b) in buf.iter_mut().enumerate() {
                let s = y.data()[i];
                *b += g[i] * s * (1.0 - s);
            });
        }
        Op::Exp(a) => {
            let y = &node.value;
            with_grad!(*a, |buf| for (i, b) in buf.iter_mut().enumerate() {
                *b += g[i] * y.data()[i];
            });
        }
        Op::Log(a) => {
            let x = val(*a);
            with_grad!(*a, |buf| for (i, b) in buf.iter_mut().enumerate() {
                *b += g[i] / x.data()[i];
            });
        }
        Op::PowConst(a, c) => {
            let x = val(*a);
            let c = *c;
            with_grad!(*a, |buf| for (i, b) in buf.iter_mut().enumerate() {
                let xi = x.data()[i];
                // d/dx x^c at x = 0 is taken as 0 for c < 1 (one-sided limit
                // is unbounded; the base only reaches 0 at saturation).
                let d = if c == 0.0 || (xi == 0.0 && c < 1.0) {
                    0.0
                } else {
                    c * xi.powf(c - 1.0)
                };
                *b += g[i] * d;
            });
        }
        Op::Softplus(a) => {
            let x = val(*a);
            with_grad!(*a, |buf| for (i, b) in buf.iter_mut().enumerate() {
                *b += g[i] * kernels::sigmoid(x.data()[i]);
            });
        }
        Op::Relu(a) => {
            let x = val(*a);
            with_grad!(*a, |buf| for (i, b) in buf.iter_mut().enumerate() {
                if x.data()[i] > 0.0 {
                    *b += g[i];
                }
            });
        }
        Op::Sum(a) => with_grad!(*a, |buf| buf.iter_mut().for_each(|b| *b += g[0])),
        Op::Mean(a) => {
            let n = val(*a).numel() as f64;
            with_grad!(*a, |buf| buf.iter_mut().for_each(|b| *b += g[0] / n));
        }
        Op::Reshape(a) => with_grad!(*a, |buf| axpy(buf, g, 1.0)),
        Op::Concat(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = val(p).numel();
                with_grad!(p, |buf| axpy(buf, &g[offset..offset + n], 1.0));
                offset += n;
            }
        }
        Op::GlobalAvgPool(a) => {
            let x = val(*a);
            let hw = x.shape()[2] * x.shape()[3];
            with_grad!(*a, |buf| for (i, gi) in g.iter().enumerate() {
                let share = gi / hw as f64;
                buf[i * hw..(i + 1) * hw].iter_mut().for_each(|b| *b += share);
            });
        }
        Op::Gather(a, idx) => with_grad!(*a, |buf| for (gi, &j) in g.iter().zip(idx) {
            buf[j] += gi;
        }),
        Op::PairwiseSqDist(a, b) => {
            let (xv, yv) = (val(*a), val(*b));
            let (n, d) = (xv.shape()[0], xv.shape()[1]);
            let r = yv.shape()[0];
            let (x, y) = (xv.data(), yv.data());
            with_grad!(*a, |buf| for i in 0..n {
                for j in 0..r {
                    let gij = 2.0 * g[i * r + j];
                    for k in 0..d {
                        buf[i * d + k] += gij * (x[i * d + k] - y[j * d + k]);
                    }
                }
            });
            with_grad!(*b, |buf| for i in 0..n {
                for j in 0..r {
                    let gij = 2.0 * g[i * r + j];
                    for k in 0..d {
                        buf[j * d + k] -= gij * (x[i * d + k] - y[j * d + k]);
                    }
                }
            });
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    nodes: &[Node],
    input: NodeId,
    weight: NodeId,
    bias: NodeId,
    geom: &ConvGeom,
    cols: &[f64],
    g: &[f64],
    acc: &mut [Option<Vec<f64>>],
) {
    let k = geom.patch_len();
    let p = geom.out_pixels();
    let co = geom.out_ch;
    let sample_in = geom.in_ch * geom.height * geom.width;
    let ensure = |i: NodeId, acc: &mut [Option<Vec<f64>>]| {
        let n = nodes[i].value.numel();
        acc[i].get_or_insert_with(|| vec![0.0; n]);
    };
    if nodes[weight].requires_grad {
        ensure(weight, acc);
        let dw = acc[weight].as_mut().expect("allocated above");
        for n in 0..geom.batch {
            let gn = &g[n * co * p..(n + 1) * co * p];
            let cn = &cols[n * k * p..(n + 1) * k * p];
            kernels::gemm(co, p, k, gn, p as isize, 1, cn, 1, p as isize, 1.0, dw);
        }
    }
    if nodes[bias].requires_grad {
        ensure(bias, acc);
        let db = acc[bias].as_mut().expect("allocated above");
        for n in 0..geom.batch {
            for (c, d) in db.iter_mut().enumerate() {
                let base = (n * co + c) * p;
                *d += g[base..base + p].iter().sum::<f64>();
            }
        }
    }
    if nodes[input].requires_grad {
        ensure(input, acc);
        let w = nodes[weight].value.data();
        let mut dcols = vec![0.0; k * p];
        let dx = acc[input].as_mut().expect("allocated above");
        for n in 0..geom.batch {
            let gn = &g[n * co * p..(n + 1) * co * p];
            kernels::gemm(k, co, p, w, 1, k as isize, gn, p as isize, 1, 0.0, &mut dcols);
            kernels::col2im(geom, &dcols, &mut dx[n * sample_in..(n + 1) * sample_in]);
        }
    }
}

/// Accumulates `sign * g` into `buf`, summing when `buf` is a broadcast scalar.
fn reduce_into(buf: &mut [f64], g: &[f64], sign: f64) {
    if buf.len() == g.len() {
        axpy(buf, g, sign);
    } else {
        buf[0] += sign * g.iter().sum::<f64>();
    }
}

fn binary_grad(buf: &mut [f64], g: &[f64], other: &[f64], f: impl Fn(f64, f64) -> f64) {
    let pick = |i: usize| other[if other.len() == 1 { 0 } else { i }];
    if buf.len() == g.len() {
        for (i, b) in buf.iter_mut().enumerate() {
            *b += f(g[i], pick(i));
        }
    } else {
        buf[0] += (0..g.len()).map(|i| f(g[i], pick(i))).sum::<f64>();
    }
}

fn axpy(buf: &mut [f64], g: &[f64], a: f64) {
    for (b, gi) in buf.iter_mut().zip(g) {
        *b += a * gi;
    }
}

/// Elementwise combination of equal shapes, or of a tensor with a
/// one-element tensor.
fn broadcast(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let (ad, bd) = (a.data(), b.data());
    let (shape, data): (&[usize], Vec<f64>) = if a.shape() == b.shape() {
        (a.shape(), ad.iter().zip(bd).map(|(x, y)| f(*x, *y)).collect())
    } else if b.numel() == 1 {
        (a.shape(), ad.iter().map(|x| f(*x, bd[0])).collect())
    } else if a.numel() == 1 {
        (b.shape(), bd.iter().map(|y| f(ad[0], *y)).collect())
    } else {
        return Err(Error::shape(op, a.shape(), b.shape()));
    };
    Tensor::new(shape.to_vec(), data)
}

impl<'g> Var<'g> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.graph.nodes.borrow()[self.id].value.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Scalar value of a one-element variable.
    pub fn item(&self) -> f64 {
        self.value().data()[0]
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'g> {
        let x = self.value();
        let data = x.data().iter().map(|v| f(*v)).collect();
        let out = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.graph.push(op, out, self.requires_grad())
    }

    fn binary(
        &self,
        other: Var<'g>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'g>> {
        self.graph.check(other)?;
        let out = broadcast(name, &self.value(), &other.value(), f)?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.graph.push(op, out, rg))
    }

    pub fn add(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(&self, other: Var<'g>) -> Result<Var<'g>> {
        if other.value().data().iter().any(|v| *v == 0.0) {
            return Err(Error::domain("div", "division by zero"));
        }
        self.binary(other, "div", Op::Div(self.id, other.id), |a, b| a / b)
    }

    /// Elementwise maximum; ties route the gradient to `self`.
    pub fn maximum(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "max", Op::Maximum(self.id, other.id), f64::max)
    }

    /// Elementwise minimum; ties route the gradient to `self`.
    pub fn minimum(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "min", Op::Minimum(self.id, other.id), f64::min)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'g> {
        self.unary(Op::AddScalar(self.id), |x| x + c)
    }

    pub fn mul_scalar(&self, c: f64) -> Var<'g> {
        self.unary(Op::MulScalar(self.id, c), |x| x * c)
    }

    pub fn neg(&self) -> Var<'g> {
        self.mul_scalar(-1.0)
    }

    pub fn sigmoid(&self) -> Var<'g> {
        self.unary(Op::Sigmoid(self.id), kernels::sigmoid)
    }

    pub fn exp(&self) -> Var<'g> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn log(&self) -> Result<Var<'g>> {
        if let Some(v) = self.value().data().iter().find(|v| **v <= 0.0) {
            return Err(Error::domain("log", format!("argument {v} <= 0")));
        }
        Ok(self.unary(Op::Log(self.id), f64::ln))
    }

    /// `x^c` for a constant exponent. Negative bases require an integer exponent.
    pub fn powf(&self, c: f64) -> Result<Var<'g>> {
        if c.fract() != 0.0 {
            if let Some(v) = self.value().data().iter().find(|v| **v < 0.0) {
                return Err(Error::domain(
                    "pow",
                    format!("negative base {v} with non-integer exponent {c}"),
                ));
            }
        }
        Ok(self.unary(Op::PowConst(self.id, c), |x| x.powf(c)))
    }

    /// `ln(1 + e^x)`, stable for all finite inputs.
    pub fn softplus(&self) -> Var<'g> {
        self.unary(Op::Softplus(self.id), kernels::softplus)
    }

    pub fn relu(&self) -> Var<'g> {
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn sum(&self) -> Var<'g> {
        let s = self.value().data().iter().sum::<f64>();
        self.graph
            .push(Op::Sum(self.id), Tensor::scalar(s), self.requires_grad())
    }

    pub fn mean(&self) -> Var<'g> {
        let x = self.value();
        let m = x.data().iter().sum::<f64>() / x.numel() as f64;
        self.graph
            .push(Op::Mean(self.id), Tensor::scalar(m), self.requires_grad())
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'g>> {
        let out = (*self.value()).clone().reshape(shape)?;
        Ok(self
            .graph
            .push(Op::Reshape(self.id), out, self.requires_grad()))
    }

    pub fn matmul(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.graph.check(other)?;
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::shape("matmul", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut c = vec![0.0; m * n];
        kernels::gemm(m, k, n, a.data(), k as isize, 1, b.data(), n as isize, 1, 0.0, &mut c);
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self
            .graph
            .push(Op::MatMul(self.id, other.id), Tensor::new([m, n], c)?, rg))
    }

    /// 2-D convolution of an `(N, C, H, W)` input with `(O, C, kh, kw)`
    /// weights and an `(O)` bias. Zero padding of `k/2` keeps the spatial
    /// size before striding.
    pub fn conv2d(&self, weight: Var<'g>, bias: Var<'g>, stride: usize) -> Result<Var<'g>> {
        self.graph.check(weight)?;
        self.graph.check(bias)?;
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        if x.rank() != 4 || w.rank() != 4 || x.shape()[1] != w.shape()[1] {
            return Err(Error::shape("conv2d", x.shape(), w.shape()));
        }
        if b.shape() != [w.shape()[0]] {
            return Err(Error::shape("conv2d bias", b.shape(), &w.shape()[..1]));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        let geom = ConvGeom {
            batch: x.shape()[0],
            in_ch: x.shape()[1],
            out_ch: w.shape()[0],
            height: x.shape()[2],
            width: x.shape()[3],
            kh: w.shape()[2],
            kw: w.shape()[3],
            stride,
            pad_h: w.shape()[2] / 2,
            pad_w: w.shape()[3] / 2,
        };
        if geom.height + 2 * geom.pad_h < geom.kh || geom.width + 2 * geom.pad_w < geom.kw {
            return Err(Error::shape("conv2d", x.shape(), w.shape()));
        }
        let (k, p, co) = (geom.patch_len(), geom.out_pixels(), geom.out_ch);
        let sample_in = geom.in_ch * geom.height * geom.width;
        let rg_w = weight.requires_grad();
        let mut cols = vec![0.0; geom.batch * k * p];
        let mut out = vec![0.0; geom.batch * co * p];
        for n in 0..geom.batch {
            let cn = &mut cols[n * k * p..(n + 1) * k * p];
            kernels::im2col(&geom, &x.data()[n * sample_in..(n + 1) * sample_in], cn);
            let on = &mut out[n * co * p..(n + 1) * co * p];
            kernels::gemm(co, k, p, w.data(), k as isize, 1, cn, p as isize, 1, 0.0, on);
            for (c, bias_c) in b.data().iter().enumerate() {
                on[c * p..(c + 1) * p].iter_mut().for_each(|v| *v += bias_c);
            }
        }
        if !rg_w {
            cols = Vec::new();
        }
        let shape = [geom.batch, co, geom.out_h(), geom.out_w()];
        let rg = self.requires_grad() || rg_w || bias.requires_grad();
        let op = Op::Conv2d {
            input: self.id,
            weight: weight.id,
            bias: bias.id,
            geom,
            cols,
        };
        Ok(self.graph.push(op, Tensor::new(shape, out)?, rg))
    }

    /// `(N, C, H, W) -> (N, C)` spatial mean.
    pub fn global_avg_pool(&self) -> Result<Var<'g>> {
        let x = self.value();
        if x.rank() != 4 {
            return Err(Error::shape("global_avg_pool", x.shape(), &[0, 0, 0, 0]));
        }
        let (n, c, hw) = (x.shape()[0], x.shape()[1], x.shape()[2] * x.shape()[3]);
        let data = x
            .data()
            .chunks(hw.max(1))
            .take(n * c)
            .map(|ch| ch.iter().sum::<f64>() / hw as f64)
            .collect();
        Ok(self.graph.push(
            Op::GlobalAvgPool(self.id),
            Tensor::new([n, c], data)?,
            self.requires_grad(),
        ))
    }

    /// Picks flat elements by index into a tensor of the given shape.
    pub fn gather(&self, indices: Vec<usize>, shape: impl Into<Vec<usize>>) -> Result<Var<'g>> {
        let x = self.value();
        if let Some(bad) = indices.iter().find(|i| **i >= x.numel()) {
            return Err(Error::InvalidArgument(format!(
                "gather index {bad} out of range for {:?}",
                x.shape()
            )));
        }
        let data = indices.iter().map(|i| x.data()[*i]).collect();
        let out = Tensor::new(shape, data)?;
        Ok(self
            .graph
            .push(Op::Gather(self.id, indices), out, self.requires_grad()))
    }

    /// Squared Euclidean distances between the rows of `(N, D)` and `(R, D)`.
    pub fn pairwise_sq_dist(&self, other: Var<'g>) -> Result<Var<'g>> {
        self.graph.check(other)?;
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1] {
            return Err(Error::shape("pairwise_sq_dist", a.shape(), b.shape()));
        }
        let (n, r, d) = (a.shape()[0], b.shape()[0], a.shape()[1]);
        let mut out = Vec::with_capacity(n * r);
        for i in 0..n {
            let xi = &a.data()[i * d..(i + 1) * d];
            for j in 0..r {
                let yj = &b.data()[j * d..(j + 1) * d];
                out.push(xi.iter().zip(yj).map(|(p, q)| (p - q) * (p - q)).sum::<f64>());
            }
        }
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.graph.push(
            Op::PairwiseSqDist(self.id, other.id),
            Tensor::new([n, r], out)?,
            rg,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec1<'g>(g: &'g Graph, v: &[f64]) -> Var<'g> {
        g.param(Tensor::from_slice(v))
    }

    #[test]
    fn add_and_sigmoid_forward() {
        let g = Graph::new();
        let s = vec1(&g, &[1.0, 2.0]).add(vec1(&g, &[3.0, 4.0])).unwrap();
        assert_eq!(s.value().data(), &[4.0, 6.0]);
        assert_eq!(vec1(&g, &[0.0]).sigmoid().value().data(), &[0.5]);
    }

    #[test]
    fn identity_kernel_conv_reproduces_image() {
        let g = Graph::new();
        let img: Vec<f64> = (0..30).map(|i| (i as f64).sqrt()).collect();
        let x = g.constant(Tensor::new([1, 1, 5, 6], img.clone()).unwrap());
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = g.constant(Tensor::new([1, 1, 3, 3], k).unwrap());
        let b = g.constant(Tensor::zeros([1]));
        let y = x.conv2d(w, b, 1).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 5, 6]);
        assert_eq!(y.value().data(), img.as_slice());
    }

    #[test]
    fn square_sum_gradient() {
        let g = Graph::new();
        let x = vec1(&g, &[1.0, 2.0, 3.0]);
        let loss = x.mul(x).unwrap().sum();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).data(), &[2.0, 4.0, 6.0]);
        assert_eq!(grads.wrt(loss).data(), &[1.0]);
    }

    #[test]
    fn sigmoid_times_constant_gradient() {
        let g = Graph::new();
        let w = vec1(&g, &[0.0]);
        let c = g.constant(Tensor::scalar(4.0));
        let loss = w.sigmoid().mul(c).unwrap().sum();
        assert_eq!(g.backward(loss).unwrap().wrt(w).data(), &[1.0]);
    }

    #[test]
    fn errors_name_shapes_and_domains() {
        let g = Graph::new();
        let a = vec1(&g, &[1.0, 2.0]);
        let b = vec1(&g, &[1.0, 2.0, 3.0]);
        let msg = a.add(b).unwrap_err().to_string();
        assert!(msg.contains("[2]") && msg.contains("[3]"), "{msg}");
        assert!(matches!(vec1(&g, &[0.0]).log(), Err(Error::Domain { .. })));
        assert!(matches!(a.div(vec1(&g, &[1.0, 0.0])), Err(Error::Domain { .. })));
        assert!(matches!(g.backward(a), Err(Error::NonScalarLoss(_))));
        let other = Graph::new();
        let foreign = other.param(Tensor::scalar(1.0));
        assert!(matches!(g.backward(foreign), Err(Error::ForeignVar)));
    }

    #[test]
    fn scalar_broadcast_reduces_gradient() {
        let g = Graph::new();
        let x = vec1(&g, &[1.0, 2.0, 3.0]);
        let s = g.param(Tensor::scalar(2.0));
        let loss = x.mul(s).unwrap().sum();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(s).data(), &[6.0]);
        assert_eq!(grads.wrt(x).data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let g = Graph::new();
        let c = g.constant(Tensor::from_slice(&[1.0, 2.0]));
        let x = vec1(&g, &[3.0, 4.0]);
        let loss = c.mul(x).unwrap().sum();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.wrt(x).data(), &[1.0, 2.0]);
    }
}
