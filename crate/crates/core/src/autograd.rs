//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles. Node
//! ids are assigned in creation order, so the creation order is already a
//! topological order and [`Graph::backward`] is a single reverse sweep.
//!
//! ```
//! use gafl_core::autograd::Graph;
//! use gafl_core::tensor::Tensor;
//!
//! let g = Graph::new();
//! let w = g.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
//! let loss = w.square().unwrap().sum().unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(w).unwrap().data(), &[2.0, 4.0]);
//! ```
//!
//! A graph is confined to one thread; tensors move freely between threads.

use std::cell::{Ref, RefCell};
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::kernels;
use crate::tensor::Tensor;

pub type NodeId = usize;

const DIV_GUARD: f64 = 1e-12;
const MAGNITUDE_GUARD: f64 = 1e-12;

/// Elementwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnaryKind {
    Relu,
    Relu6,
    Sigmoid,
    Tanh,
    Softplus,
    Swish,
    Mish,
    Log1p,
    Expm1,
    Neg,
    Square,
    Abs,
    Sin,
    Cos,
    /// `x^p` for `x > 0`, zero elsewhere.
    Powf(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl UnaryKind {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            UnaryKind::Relu => x.max(0.0),
            UnaryKind::Relu6 => x.clamp(0.0, 6.0),
            UnaryKind::Sigmoid => sigmoid(x),
            UnaryKind::Tanh => x.tanh(),
            UnaryKind::Softplus => softplus(x),
            UnaryKind::Swish => x * sigmoid(x),
            UnaryKind::Mish => x * softplus(x).tanh(),
            UnaryKind::Log1p => x.ln_1p(),
            UnaryKind::Expm1 => x.exp_m1(),
            UnaryKind::Neg => -x,
            UnaryKind::Square => x * x,
            UnaryKind::Abs => x.abs(),
            UnaryKind::Sin => x.sin(),
            UnaryKind::Cos => x.cos(),
            UnaryKind::Powf(p) => {
                if x > 0.0 {
                    x.powf(p)
                } else {
                    0.0
                }
            }
        }
    }

    /// Derivative at `x`; `y` is the already computed `apply(x)`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryKind::Relu6 => {
                if x > 0.0 && x < 6.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryKind::Sigmoid => y * (1.0 - y),
            UnaryKind::Tanh => 1.0 - y * y,
            UnaryKind::Softplus => sigmoid(x),
            UnaryKind::Swish => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            UnaryKind::Mish => {
                let t = softplus(x).tanh();
                t + x * (1.0 - t * t) * sigmoid(x)
            }
            UnaryKind::Log1p => 1.0 / (1.0 + x),
            UnaryKind::Expm1 => y + 1.0,
            UnaryKind::Neg => -1.0,
            UnaryKind::Square => 2.0 * x,
            UnaryKind::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            UnaryKind::Sin => x.cos(),
            UnaryKind::Cos => -x.sin(),
            UnaryKind::Powf(p) => {
                if x > 0.0 {
                    p * x.powf(p - 1.0)
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Unary {
        x: NodeId,
        kind: UnaryKind,
    },
    Binary {
        a: NodeId,
        b: NodeId,
        kind: BinaryKind,
    },
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
    },
    Dense {
        x: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    AvgPool2 {
        x: NodeId,
    },
    MaxPool2 {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Upsample2 {
        x: NodeId,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
    Reduce {
        x: NodeId,
        kind: ReduceKind,
    },
    Reshape {
        x: NodeId,
    },
    ConcatChannels {
        a: NodeId,
        b: NodeId,
    },
    Tile {
        x: NodeId,
    },
    RfftRe {
        x: NodeId,
    },
    RfftIm {
        x: NodeId,
    },
    Irfft {
        re: NodeId,
        im: NodeId,
        width: usize,
    },
    Magnitude {
        re: NodeId,
        im: NodeId,
    },
    LogSoftmax {
        x: NodeId,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    trainable: bool,
    requires_grad: bool,
}

/// The computation record.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

/// Gradients of the loss with respect to every trainable leaf.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientMap {
    grads: BTreeMap<NodeId, Tensor>,
}

impl GradientMap {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(&var.id)
    }

    pub fn get_id(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }
}

fn check_finite(data: &[f64], what: &str) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Validation(format!(
            "{what} produced a non-finite value at index {i}"
        ))),
        None => Ok(()),
    }
}

fn expect_rank(shape: &[usize], rank: usize, what: &str) -> Result<()> {
    if shape.len() != rank {
        return Err(Error::Shape(format!(
            "{what} expects rank {rank}, got shape {shape:?}"
        )));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op, trainable: bool, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            trainable,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn requires(&self, ids: &[NodeId]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn push_op(&self, value: Tensor, op: Op, inputs: &[NodeId]) -> Var<'_> {
        let rg = self.requires(inputs);
        self.push(value, op, false, rg)
    }

    /// Registers a trainable leaf.
    pub fn leaf(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, true, true)
    }

    /// Registers a value that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Constant, false, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::scalar(v))
    }

    /// Validating constructor: checks length and finiteness, then registers
    /// the tensor as a trainable leaf or a constant.
    pub fn create(&self, shape: &[usize], values: Vec<f64>, trainable: bool) -> Result<Var<'_>> {
        let t = Tensor::new(shape, values)?;
        Ok(if trainable {
            self.leaf(t)
        } else {
            self.constant(t)
        })
    }

    pub fn var(&self, id: NodeId) -> Var<'_> {
        assert!(id < self.len(), "node {id} does not exist");
        Var { graph: self, id }
    }

    fn value(&self, id: NodeId) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<GradientMap> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            propagate(&nodes, id, &g, &mut grads);
        }

        let mut out = BTreeMap::new();
        for (id, node) in nodes.iter().enumerate() {
            if node.trainable {
                let t = match grads[id].take() {
                    Some(g) => Tensor::from_parts(node.value.shape().to_vec(), g),
                    None => Tensor::zeros(node.value.shape()),
                };
                out.insert(id, t);
            }
        }
        Ok(GradientMap { grads: out })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: NodeId, contrib: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contrib) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

fn propagate(nodes: &[Node], id: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let out = node.value.data();
    match &node.op {
        Op::Leaf | Op::Constant => {}
        Op::Unary { x, kind } => {
            let xv = nodes[*x].value.data();
            let c = xv
                .iter()
                .zip(out)
                .zip(g)
                .map(|((&xi, &yi), &gi)| gi * kind.derivative(xi, yi))
                .collect();
            accumulate(grads, nodes, *x, c);
        }
        Op::Binary { a, b, kind } => {
            let at = &nodes[*a].value;
            let bt = &nodes[*b].value;
            let n = g.len();
            let a_bc = at.len() != n;
            let b_bc = bt.len() != n;
            let av = |i: usize| if a_bc { at.data()[0] } else { at.data()[i] };
            let bv = |i: usize| if b_bc { bt.data()[0] } else { bt.data()[i] };
            let (da, db): (Vec<f64>, Vec<f64>) = (0..n)
                .map(|i| match kind {
                    BinaryKind::Add => (g[i], g[i]),
                    BinaryKind::Sub => (g[i], -g[i]),
                    BinaryKind::Mul => (g[i] * bv(i), g[i] * av(i)),
                    BinaryKind::Div => {
                        let bi = bv(i);
                        (g[i] / bi, -g[i] * av(i) / (bi * bi))
                    }
                })
                .unzip();
            let reduce = |v: Vec<f64>, bc: bool| if bc { vec![v.iter().sum()] } else { v };
            accumulate(grads, nodes, *a, reduce(da, a_bc));
            accumulate(grads, nodes, *b, reduce(db, b_bc));
        }
        Op::Conv2d {
            input,
            kernel,
            bias,
            stride,
            pad,
        } => {
            let (gi, gk, gb) = conv2d_backward(
                &nodes[*input].value,
                &nodes[*kernel].value,
                node.value.shape(),
                g,
                *stride,
                *pad,
                nodes[*input].requires_grad,
                nodes[*kernel].requires_grad,
            );
            if let Some(gi) = gi {
                accumulate(grads, nodes, *input, gi);
            }
            if let Some(gk) = gk {
                accumulate(grads, nodes, *kernel, gk);
            }
            accumulate(grads, nodes, *bias, gb);
        }
        Op::Dense { x, weight, bias } => {
            let xs = nodes[*x].value.shape();
            let (bn, d) = (xs[0], xs[1]);
            let k = nodes[*weight].value.shape()[0];
            let xv = nodes[*x].value.data();
            let wv = nodes[*weight].value.data();
            let mut gx = vec![0.0; bn * d];
            let mut gw = vec![0.0; k * d];
            let mut gb = vec![0.0; k];
            for r in 0..bn {
                for j in 0..k {
                    let gy = g[r * k + j];
                    gb[j] += gy;
                    for i in 0..d {
                        gx[r * d + i] += gy * wv[j * d + i];
                        gw[j * d + i] += gy * xv[r * d + i];
                    }
                }
            }
            accumulate(grads, nodes, *x, gx);
            accumulate(grads, nodes, *weight, gw);
            accumulate(grads, nodes, *bias, gb);
        }
        Op::AvgPool2 { x } => {
            let s = nodes[*x].value.shape();
            let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
            let (ho, wo) = (h / 2, w / 2);
            let mut gx = vec![0.0; planes * h * w];
            for p in 0..planes {
                for i in 0..ho {
                    for j in 0..wo {
                        let gv = 0.25 * g[p * ho * wo + i * wo + j];
                        for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            gx[p * h * w + (2 * i + di) * w + 2 * j + dj] += gv;
                        }
                    }
                }
            }
            accumulate(grads, nodes, *x, gx);
        }
        Op::MaxPool2 { x, argmax } => {
            let mut gx = vec![0.0; nodes[*x].value.len()];
            for (o, &src) in argmax.iter().enumerate() {
                gx[src] += g[o];
            }
            accumulate(grads, nodes, *x, gx);
        }
        Op::Upsample2 { x } => {
            let s = nodes[*x].value.shape();
            let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
            let (ho, wo) = (2 * h, 2 * w);
            let mut gx = vec![0.0; planes * h * w];
            for p in 0..planes {
                for i in 0..ho {
                    for j in 0..wo {
                        gx[p * h * w + (i / 2) * w + j / 2] += g[p * ho * wo + i * wo + j];
                    }
                }
            }
            accumulate(grads, nodes, *x, gx);
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            training,
        } => {
            let s = nodes[*x].value.shape();
            let (bn, c, hw) = (s[0], s[1], s[2] * s[3]);
            let gam = nodes[*gamma].value.data();
            let count = (bn * hw) as f64;
            let mut gx = vec![0.0; g.len()];
            let mut gg = vec![0.0; c];
            let mut gbeta = vec![0.0; c];
            for ch in 0..c {
                let (mut sum_g, mut sum_gx) = (0.0, 0.0);
                for b in 0..bn {
                    let base = (b * c + ch) * hw;
                    for i in base..base + hw {
                        sum_g += g[i];
                        sum_gx += g[i] * xhat[i];
                    }
                }
                gg[ch] = sum_gx;
                gbeta[ch] = sum_g;
                let scale = gam[ch] * inv_std[ch];
                for b in 0..bn {
                    let base = (b * c + ch) * hw;
                    for i in base..base + hw {
                        gx[i] = if *training {
                            scale * (g[i] - sum_g / count - xhat[i] * sum_gx / count)
                        } else {
                            scale * g[i]
                        };
                    }
                }
            }
            accumulate(grads, nodes, *x, gx);
            accumulate(grads, nodes, *gamma, gg);
            accumulate(grads, nodes, *beta, gbeta);
        }
        Op::Reduce { x, kind } => {
            let n = nodes[*x].value.len();
            let v = match kind {
                ReduceKind::Sum => g[0],
                ReduceKind::Mean => g[0] / n as f64,
            };
            accumulate(grads, nodes, *x, vec![v; n]);
        }
        Op::Reshape { x } => {
            accumulate(grads, nodes, *x, g.to_vec());
        }
        Op::Tile { x } => {
            let n = nodes[*x].value.len();
            let mut gx = vec![0.0; n];
            for chunk in g.chunks(n) {
                for (a, b) in gx.iter_mut().zip(chunk) {
                    *a += b;
                }
            }
            accumulate(grads, nodes, *x, gx);
        }
        Op::ConcatChannels { a, b } => {
            let sa = nodes[*a].value.shape();
            let sb = nodes[*b].value.shape();
            let (bn, ca, cb, hw) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
            let mut ga = Vec::with_capacity(bn * ca * hw);
            let mut gb = Vec::with_capacity(bn * cb * hw);
            for n in 0..bn {
                let base = n * (ca + cb) * hw;
                ga.extend_from_slice(&g[base..base + ca * hw]);
                gb.extend_from_slice(&g[base + ca * hw..base + (ca + cb) * hw]);
            }
            accumulate(grads, nodes, *a, ga);
            accumulate(grads, nodes, *b, gb);
        }
        Op::RfftRe { x } | Op::RfftIm { x } => {
            let s = nodes[*x].value.shape();
            let (n, m) = (s[s.len() - 2], s[s.len() - 1]);
            let h = kernels::half_width(m);
            let planes = nodes[*x].value.len() / (n * m);
            let mut w = vec![0.0; g.len()];
            for (i, wi) in w.iter_mut().enumerate() {
                *wi = g[i] / kernels::column_multiplicity(i % h, m);
            }
            let zeros = vec![0.0; g.len()];
            let is_re = matches!(node.op, Op::RfftRe { .. });
            let (re, im) = if is_re { (&w, &zeros) } else { (&zeros, &w) };
            let scale = 1.0 / (n * m) as f64;
            let gx = kernels::irfft2(re, im, planes, n, m)
                .into_iter()
                .map(|v| v * scale)
                .collect();
            accumulate(grads, nodes, *x, gx);
        }
        Op::Irfft { re, im, width } => {
            let s = node.value.shape();
            let (n, m) = (s[s.len() - 2], *width);
            let h = kernels::half_width(m);
            let planes = g.len() / (n * m);
            let (mut gre, mut gim) = kernels::rfft2(g, planes, n, m);
            let scale = (n * m) as f64;
            for i in 0..gre.len() {
                let c = kernels::column_multiplicity(i % h, m) * scale;
                gre[i] *= c;
                gim[i] *= c;
            }
            accumulate(grads, nodes, *re, gre);
            accumulate(grads, nodes, *im, gim);
        }
        Op::Magnitude { re, im } => {
            let rv = nodes[*re].value.data();
            let iv = nodes[*im].value.data();
            let (gre, gim): (Vec<f64>, Vec<f64>) = (0..g.len())
                .map(|i| {
                    if out[i] < MAGNITUDE_GUARD {
                        (0.0, 0.0)
                    } else {
                        (g[i] * rv[i] / out[i], g[i] * iv[i] / out[i])
                    }
                })
                .unzip();
            accumulate(grads, nodes, *re, gre);
            accumulate(grads, nodes, *im, gim);
        }
        Op::LogSoftmax { x } => {
            let k = node.value.shape()[1];
            let mut gx = vec![0.0; g.len()];
            for (r, (grow, yrow)) in g.chunks(k).zip(out.chunks(k)).enumerate() {
                let total: f64 = grow.iter().sum();
                for j in 0..k {
                    gx[r * k + j] = grow[j] - yrow[j].exp() * total;
                }
            }
            accumulate(grads, nodes, *x, gx);
        }
    }
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    /// Output indices `lo..hi` whose input index `out*stride + k - pad` lies in `0..len`.
    fn valid(&self, k: usize, len: usize, out_len: usize) -> (usize, usize) {
        let (s, p, k) = (self.stride as isize, self.pad as isize, k as isize);
        let lo = (p - k).max(0);
        let lo = (lo + s - 1) / s;
        let hi = (len as isize - 1 + p - k).div_euclid(s) + 1;
        let hi = hi.clamp(0, out_len as isize);
        (lo as usize, (hi.max(lo)) as usize)
    }
}

fn conv_geom(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<ConvGeom> {
    expect_rank(input, 4, "conv2d input")?;
    expect_rank(kernel, 4, "conv2d kernel")?;
    let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
    let (o, kc, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
    if kc != c {
        return Err(Error::Shape(format!(
            "conv2d kernel expects {kc} input channels, input has {c}"
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::Extent(format!(
            "conv2d kernel extents must be odd, got {kh}x{kw}"
        )));
    }
    if stride == 0 {
        return Err(Error::Extent("conv2d stride must be positive".into()));
    }
    let out = |len: usize, k: usize| -> Result<usize> {
        let span = len + 2 * pad;
        if span < k || !(span - k).is_multiple_of(stride) {
            return Err(Error::Extent(format!(
                "conv2d output extent ({len}+2*{pad}-{k})/{stride}+1 is not integral"
            )));
        }
        Ok((span - k) / stride + 1)
    };
    let ho = out(h, kh)?;
    let wo = out(w, kw)?;
    Ok(ConvGeom {
        n,
        c,
        h,
        w,
        o,
        kh,
        kw,
        ho,
        wo,
        stride,
        pad,
    })
}

fn conv2d_forward(x: &[f64], k: &[f64], b: &[f64], geo: &ConvGeom) -> Vec<f64> {
    let ConvGeom {
        n,
        c,
        h,
        w,
        o,
        kh,
        kw,
        ho,
        wo,
        stride,
        pad,
    } = *geo;
    let mut out = vec![0.0; n * o * ho * wo];
    for bi in 0..n {
        for oc in 0..o {
            let dst = &mut out[(bi * o + oc) * ho * wo..(bi * o + oc + 1) * ho * wo];
            dst.fill(b[oc]);
            for ic in 0..c {
                let src = &x[(bi * c + ic) * h * w..(bi * c + ic + 1) * h * w];
                let kern = &k[(oc * c + ic) * kh * kw..(oc * c + ic + 1) * kh * kw];
                for ki in 0..kh {
                    let (ylo, yhi) = geo.valid(ki, h, ho);
                    for kj in 0..kw {
                        let wv = kern[ki * kw + kj];
                        let (xlo, xhi) = geo.valid(kj, w, wo);
                        for oy in ylo..yhi {
                            let iy = oy * stride + ki - pad;
                            let srow = &src[iy * w..(iy + 1) * w];
                            let drow = &mut dst[oy * wo..(oy + 1) * wo];
                            for ox in xlo..xhi {
                                drow[ox] += wv * srow[ox * stride + kj - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    out_shape: &[usize],
    g: &[f64],
    stride: usize,
    pad: usize,
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>) {
    let geo = conv_geom(input.shape(), kernel.shape(), stride, pad)
        .expect("geometry was validated on the forward pass");
    debug_assert_eq!(out_shape, &[geo.n, geo.o, geo.ho, geo.wo]);
    let ConvGeom {
        n,
        c,
        h,
        w,
        o,
        kh,
        kw,
        ho,
        wo,
        ..
    } = geo;
    let x = input.data();
    let k = kernel.data();
    let mut gi = want_input.then(|| vec![0.0; x.len()]);
    let mut gk = want_kernel.then(|| vec![0.0; k.len()]);
    let mut gb = vec![0.0; o];
    for bi in 0..n {
        for oc in 0..o {
            let gplane = &g[(bi * o + oc) * ho * wo..(bi * o + oc + 1) * ho * wo];
            gb[oc] += gplane.iter().sum::<f64>();
            for ic in 0..c {
                let xoff = (bi * c + ic) * h * w;
                let koff = (oc * c + ic) * kh * kw;
                for ki in 0..kh {
                    let (ylo, yhi) = geo.valid(ki, h, ho);
                    for kj in 0..kw {
                        let (xlo, xhi) = geo.valid(kj, w, wo);
                        let wv = k[koff + ki * kw + kj];
                        let mut acc = 0.0;
                        for oy in ylo..yhi {
                            let iy = oy * stride + ki - pad;
                            for ox in xlo..xhi {
                                let ix = ox * stride + kj - pad;
                                let gv = gplane[oy * wo + ox];
                                acc += gv * x[xoff + iy * w + ix];
                                if let Some(gi) = gi.as_mut() {
                                    gi[xoff + iy * w + ix] += gv * wv;
                                }
                            }
                        }
                        if let Some(gk) = gk.as_mut() {
                            gk[koff + ki * kw + kj] += acc;
                        }
                    }
                }
            }
        }
    }
    (gi, gk, gb)
}

// arithmetic is by value on tape handles, not the std operator traits
#[allow(clippy::should_implement_trait)]
impl<'g> Var<'g> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Ref<'g, Tensor> {
        self.graph.value(self.id)
    }

    /// Owned copy of the node's value.
    pub fn tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn emit(
        &self,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        inputs: &[NodeId],
        what: &str,
    ) -> Result<Var<'g>> {
        check_finite(&data, what)?;
        Ok(self
            .graph
            .push_op(Tensor::from_parts(shape, data), op, inputs))
    }

    pub fn unary(self, kind: UnaryKind) -> Result<Var<'g>> {
        let (shape, data) = {
            let v = self.value();
            (
                v.shape().to_vec(),
                v.data().iter().map(|&x| kind.apply(x)).collect(),
            )
        };
        self.emit(
            shape,
            data,
            Op::Unary { x: self.id, kind },
            &[self.id],
            "unary op",
        )
    }

    pub fn relu(self) -> Result<Var<'g>> {
        self.unary(UnaryKind::Relu)
    }

    pub fn sigmoid(self) -> Result<Var<'g>> {
        self.unary(UnaryKind::Sigmoid)
    }

    pub fn softplus(self) -> Result<Var<'g>> {
        self.unary(UnaryKind::Softplus)
    }

    pub fn square(self) -> Result<Var<'g>> {
        self.unary(UnaryKind::Square)
    }

    pub fn abs(self) -> Result<Var<'g>> {
        self.unary(UnaryKind::Abs)
    }

    pub fn log1p(self) -> Result<Var<'g>> {
        self.unary(UnaryKind::Log1p)
    }

    pub fn expm1(self) -> Result<Var<'g>> {
        self.unary(UnaryKind::Expm1)
    }

    pub fn neg(self) -> Result<Var<'g>> {
        self.unary(UnaryKind::Neg)
    }

    pub fn binary(self, other: Var<'g>, kind: BinaryKind) -> Result<Var<'g>> {
        let a = self.value();
        let b = other.value();
        let shape = if a.shape() == b.shape() || b.is_scalar() {
            a.shape().to_vec()
        } else if a.is_scalar() {
            b.shape().to_vec()
        } else {
            return Err(Error::Shape(format!(
                "{kind:?} of {:?} with {:?}",
                a.shape(),
                b.shape()
            )));
        };
        let n: usize = shape.iter().product();
        let av = |i: usize| {
            if a.len() == n {
                a.data()[i]
            } else {
                a.data()[0]
            }
        };
        let bv = |i: usize| {
            if b.len() == n {
                b.data()[i]
            } else {
                b.data()[0]
            }
        };
        if kind == BinaryKind::Div {
            if let Some(index) = (0..b.len()).find(|&i| b.data()[i].abs() <= DIV_GUARD) {
                return Err(Error::DivisionGuard { index });
            }
        }
        let data: Vec<f64> = (0..n)
            .map(|i| match kind {
                BinaryKind::Add => av(i) + bv(i),
                BinaryKind::Sub => av(i) - bv(i),
                BinaryKind::Mul => av(i) * bv(i),
                BinaryKind::Div => av(i) / bv(i),
            })
            .collect();
        drop((a, b));
        self.emit(
            shape,
            data,
            Op::Binary {
                a: self.id,
                b: other.id,
                kind,
            },
            &[self.id, other.id],
            "binary op",
        )
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, BinaryKind::Sub)
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, BinaryKind::Mul)
    }

    pub fn div(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, BinaryKind::Div)
    }

    pub fn add_scalar(self, v: f64) -> Result<Var<'g>> {
        self.add(self.graph.scalar(v))
    }

    pub fn mul_scalar(self, v: f64) -> Result<Var<'g>> {
        self.mul(self.graph.scalar(v))
    }

    /// `v - self`.
    pub fn rsub_scalar(self, v: f64) -> Result<Var<'g>> {
        self.graph.scalar(v).sub(self)
    }

    pub fn reduce(self, kind: ReduceKind) -> Result<Var<'g>> {
        let v = {
            let t = self.value();
            if t.is_empty() {
                return Err(Error::Shape("reduction of an empty tensor".into()));
            }
            match kind {
                ReduceKind::Sum => t.sum(),
                ReduceKind::Mean => t.mean(),
            }
        };
        self.emit(
            Vec::new(),
            vec![v],
            Op::Reduce { x: self.id, kind },
            &[self.id],
            "reduce",
        )
    }

    pub fn sum(self) -> Result<Var<'g>> {
        self.reduce(ReduceKind::Sum)
    }

    pub fn mean(self) -> Result<Var<'g>> {
        self.reduce(ReduceKind::Mean)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let t = self.value().reshape(shape)?;
        Ok(self
            .graph
            .push_op(t, Op::Reshape { x: self.id }, &[self.id]))
    }

    /// Repeats the tensor `times` times along a new leading axis.
    pub fn tile(self, times: usize) -> Result<Var<'g>> {
        if times == 0 {
            return Err(Error::Shape("tile count must be positive".into()));
        }
        let (shape, data) = {
            let t = self.value();
            let mut shape = vec![times];
            shape.extend_from_slice(t.shape());
            (shape, t.data().repeat(times))
        };
        Ok(self.graph.push_op(
            Tensor::from_parts(shape, data),
            Op::Tile { x: self.id },
            &[self.id],
        ))
    }

    /// Cross-correlation with zero padding.
    pub fn conv2d(
        self,
        kernel: Var<'g>,
        bias: Var<'g>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'g>> {
        let (shape, data) = {
            let x = self.value();
            let k = kernel.value();
            let b = bias.value();
            let geo = conv_geom(x.shape(), k.shape(), stride, pad)?;
            if b.shape() != [geo.o] {
                return Err(Error::Shape(format!(
                    "conv2d bias shape {:?}, expected [{}]",
                    b.shape(),
                    geo.o
                )));
            }
            (
                vec![geo.n, geo.o, geo.ho, geo.wo],
                conv2d_forward(x.data(), k.data(), b.data(), &geo),
            )
        };
        self.emit(
            shape,
            data,
            Op::Conv2d {
                input: self.id,
                kernel: kernel.id,
                bias: bias.id,
                stride,
                pad,
            },
            &[self.id, kernel.id, bias.id],
            "conv2d",
        )
    }

    /// Affine map `x W^T + b` on `[N, D]` rows.
    pub fn dense(self, weight: Var<'g>, bias: Var<'g>) -> Result<Var<'g>> {
        let (shape, data) = {
            let x = self.value();
            let w = weight.value();
            let b = bias.value();
            expect_rank(x.shape(), 2, "dense input")?;
            expect_rank(w.shape(), 2, "dense weight")?;
            let (n, d) = (x.shape()[0], x.shape()[1]);
            let (k, wd) = (w.shape()[0], w.shape()[1]);
            if wd != d || b.shape() != [k] {
                return Err(Error::Extent(format!(
                    "dense: input {:?}, weight {:?}, bias {:?}",
                    x.shape(),
                    w.shape(),
                    b.shape()
                )));
            }
            let (xv, wv, bv) = (x.data(), w.data(), b.data());
            let mut out = vec![0.0; n * k];
            for r in 0..n {
                for j in 0..k {
                    out[r * k + j] =
                        bv[j] + (0..d).map(|i| xv[r * d + i] * wv[j * d + i]).sum::<f64>();
                }
            }
            (vec![n, k], out)
        };
        self.emit(
            shape,
            data,
            Op::Dense {
                x: self.id,
                weight: weight.id,
                bias: bias.id,
            },
            &[self.id, weight.id, bias.id],
            "dense",
        )
    }

    fn pool_dims(&self, what: &str) -> Result<(usize, usize, usize, Vec<usize>)> {
        let s = self.shape();
        expect_rank(&s, 4, what)?;
        if !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return Err(Error::Extent(format!(
                "{what} needs even extents, got {s:?}"
            )));
        }
        Ok((
            s[0] * s[1],
            s[2],
            s[3],
            vec![s[0], s[1], s[2] / 2, s[3] / 2],
        ))
    }

    pub fn avgpool2(self) -> Result<Var<'g>> {
        let (planes, h, w, oshape) = self.pool_dims("avgpool2")?;
        let data = {
            let x = self.value();
            let xv = x.data();
            let (ho, wo) = (h / 2, w / 2);
            let mut out = Vec::with_capacity(planes * ho * wo);
            for p in 0..planes {
                for i in 0..ho {
                    for j in 0..wo {
                        let at =
                            |di: usize, dj: usize| xv[p * h * w + (2 * i + di) * w + 2 * j + dj];
                        out.push(0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)));
                    }
                }
            }
            out
        };
        self.emit(
            oshape,
            data,
            Op::AvgPool2 { x: self.id },
            &[self.id],
            "avgpool2",
        )
    }

    /// 2x2 max pooling; ties route to the first position in row-major order.
    pub fn maxpool2(self) -> Result<Var<'g>> {
        let (planes, h, w, oshape) = self.pool_dims("maxpool2")?;
        let (data, argmax) = {
            let x = self.value();
            let xv = x.data();
            let (ho, wo) = (h / 2, w / 2);
            let mut out = Vec::with_capacity(planes * ho * wo);
            let mut arg = Vec::with_capacity(planes * ho * wo);
            for p in 0..planes {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut best = p * h * w + 2 * i * w + 2 * j;
                        for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = p * h * w + (2 * i + di) * w + 2 * j + dj;
                            if xv[idx] > xv[best] {
                                best = idx;
                            }
                        }
                        out.push(xv[best]);
                        arg.push(best);
                    }
                }
            }
            (out, arg)
        };
        self.emit(
            oshape,
            data,
            Op::MaxPool2 { x: self.id, argmax },
            &[self.id],
            "maxpool2",
        )
    }

    pub fn upsample_nearest2(self) -> Result<Var<'g>> {
        let s = self.shape();
        expect_rank(&s, 4, "upsample_nearest2")?;
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let data = {
            let x = self.value();
            let xv = x.data();
            let mut out = Vec::with_capacity(planes * 4 * h * w);
            for p in 0..planes {
                for i in 0..2 * h {
                    for j in 0..2 * w {
                        out.push(xv[p * h * w + (i / 2) * w + j / 2]);
                    }
                }
            }
            out
        };
        self.emit(
            vec![s[0], s[1], 2 * h, 2 * w],
            data,
            Op::Upsample2 { x: self.id },
            &[self.id],
            "upsample_nearest2",
        )
    }

    /// Per-channel normalization of `[N, C, H, W]`.
    ///
    /// In training mode the statistics come from the batch and are returned
    /// as `(mean, biased variance)` so the caller can update running
    /// averages. In evaluation mode `stats` supplies `(running_mean,
    /// running_var)`.
    pub fn batchnorm2d(
        self,
        gamma: Var<'g>,
        beta: Var<'g>,
        eps: f64,
        stats: Option<(&[f64], &[f64])>,
    ) -> Result<(Var<'g>, Vec<f64>, Vec<f64>)> {
        let s = self.shape();
        expect_rank(&s, 4, "batchnorm2d")?;
        let (bn, c, hw) = (s[0], s[1], s[2] * s[3]);
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::Shape(format!(
                "batchnorm2d parameters must have shape [{c}]"
            )));
        }
        let training = stats.is_none();
        let (data, xhat, inv_std, mean, var) = {
            let x = self.value();
            let xv = x.data();
            let gv = gamma.value();
            let bv = beta.value();
            let (mean, var) = match stats {
                Some((m, v)) => {
                    if m.len() != c || v.len() != c {
                        return Err(Error::Shape("batchnorm2d running stats length".into()));
                    }
                    (m.to_vec(), v.to_vec())
                }
                None => {
                    let count = (bn * hw) as f64;
                    let mut mean = vec![0.0; c];
                    let mut var = vec![0.0; c];
                    for ch in 0..c {
                        let vals = (0..bn).flat_map(|b| {
                            let base = (b * c + ch) * hw;
                            xv[base..base + hw].iter().copied()
                        });
                        let mu = vals.clone().sum::<f64>() / count;
                        mean[ch] = mu;
                        var[ch] = vals.map(|v| (v - mu) * (v - mu)).sum::<f64>() / count;
                    }
                    (mean, var)
                }
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let mut xhat = vec![0.0; xv.len()];
            let mut out = vec![0.0; xv.len()];
            for b in 0..bn {
                for ch in 0..c {
                    let base = (b * c + ch) * hw;
                    for i in base..base + hw {
                        xhat[i] = (xv[i] - mean[ch]) * inv_std[ch];
                        out[i] = gv.data()[ch] * xhat[i] + bv.data()[ch];
                    }
                }
            }
            (out, xhat, inv_std, mean, var)
        };
        let y = self.emit(
            s,
            data,
            Op::BatchNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
                training,
            },
            &[self.id, gamma.id, beta.id],
            "batchnorm2d",
        )?;
        Ok((y, mean, var))
    }

    /// Concatenates two `[N, C, H, W]` tensors along the channel axis.
    pub fn concat_channels(self, other: Var<'g>) -> Result<Var<'g>> {
        let sa = self.shape();
        let sb = other.shape();
        expect_rank(&sa, 4, "concat_channels")?;
        expect_rank(&sb, 4, "concat_channels")?;
        if sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::Shape(format!(
                "concat_channels of {sa:?} with {sb:?}"
            )));
        }
        let hw = sa[2] * sa[3];
        let data = {
            let a = self.value();
            let b = other.value();
            let mut out = Vec::with_capacity(a.len() + b.len());
            for n in 0..sa[0] {
                out.extend_from_slice(&a.data()[n * sa[1] * hw..(n + 1) * sa[1] * hw]);
                out.extend_from_slice(&b.data()[n * sb[1] * hw..(n + 1) * sb[1] * hw]);
            }
            out
        };
        Ok(self.graph.push_op(
            Tensor::from_parts(vec![sa[0], sa[1] + sb[1], sa[2], sa[3]], data),
            Op::ConcatChannels {
                a: self.id,
                b: other.id,
            },
            &[self.id, other.id],
        ))
    }

    /// Row-wise log-softmax of `[N, K]`.
    pub fn log_softmax(self) -> Result<Var<'g>> {
        let s = self.shape();
        expect_rank(&s, 2, "log_softmax")?;
        let data = {
            let x = self.value();
            let mut out = Vec::with_capacity(x.len());
            for row in x.data().chunks(s[1]) {
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                out.extend(row.iter().map(|v| v - lse));
            }
            out
        };
        self.emit(
            s,
            data,
            Op::LogSoftmax { x: self.id },
            &[self.id],
            "log_softmax",
        )
    }

    /// Forward 2-D transform over the trailing two axes (`[..., n, m]`),
    /// scaled by `1/(nm)`. Returns real and imaginary half-planes
    /// `[..., n, m/2+1]`.
    pub fn rfft2(self) -> Result<(Var<'g>, Var<'g>)> {
        let s = self.shape();
        if s.len() < 2 || s[s.len() - 2] < 2 || s[s.len() - 1] < 2 {
            return Err(Error::Extent(format!(
                "rfft2 needs trailing extents >= 2, got {s:?}"
            )));
        }
        let (n, m) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = s[..s.len() - 2].iter().product();
        let (re, im) = kernels::rfft2(self.value().data(), planes, n, m);
        let mut hs = s.clone();
        *hs.last_mut().unwrap() = kernels::half_width(m);
        let r = self.emit(
            hs.clone(),
            re,
            Op::RfftRe { x: self.id },
            &[self.id],
            "rfft2",
        )?;
        let i = self.emit(hs, im, Op::RfftIm { x: self.id }, &[self.id], "rfft2")?;
        Ok((r, i))
    }

    /// Inverse of [`Var::rfft2`] back to width `width`. Self-conjugate
    /// columns contribute their real projection, so the output is always real.
    pub fn irfft2(self, im: Var<'g>, width: usize) -> Result<Var<'g>> {
        let s = self.shape();
        if s != im.shape() || s.len() < 2 {
            return Err(Error::Shape(format!(
                "irfft2 re/im shapes {s:?} and {:?}",
                im.shape()
            )));
        }
        if width < 2 || kernels::half_width(width) != s[s.len() - 1] {
            return Err(Error::Shape(format!(
                "half width {} does not match full width {width}",
                s[s.len() - 1]
            )));
        }
        let n = s[s.len() - 2];
        let planes = s[..s.len() - 2].iter().product();
        let data = kernels::irfft2(self.value().data(), im.value().data(), planes, n, width);
        let mut os = s;
        *os.last_mut().unwrap() = width;
        self.emit(
            os,
            data,
            Op::Irfft {
                re: self.id,
                im: im.id,
                width,
            },
            &[self.id, im.id],
            "irfft2",
        )
    }

    /// `sqrt(re^2 + im^2)` with a zero adjoint where the modulus is below 1e-12.
    pub fn magnitude(self, im: Var<'g>) -> Result<Var<'g>> {
        let s = self.shape();
        if s != im.shape() {
            return Err(Error::Shape("magnitude re/im shape mismatch".into()));
        }
        let data = {
            let r = self.value();
            let i = im.value();
            r.data()
                .iter()
                .zip(i.data())
                .map(|(a, b)| a.hypot(*b))
                .collect()
        };
        self.emit(
            s,
            data,
            Op::Magnitude {
                re: self.id,
                im: im.id,
            },
            &[self.id, im.id],
            "magnitude",
        )
    }
}

/// Maximum relative error between the recorded gradient of `f` at `x` and
/// central differences with step `eps`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    grad_check_many(|g, vs| f(g, vs[0]), std::slice::from_ref(x), eps)
}

/// [`grad_check`] over several leaves at once.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], eps: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        Ok(f(&g, &vars)?.item())
    };
    let analytic: Vec<Tensor> = {
        let g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = f(&g, &vars)?;
        let grads = g.backward(loss)?;
        vars.iter()
            .map(|v| grads.get(*v).unwrap().clone())
            .collect()
    };
    let mut worst: f64 = 0.0;
    let mut probe = xs.to_vec();
    for (t, grad) in analytic.iter().enumerate() {
        for i in 0..xs[t].len() {
            let orig = xs[t].data()[i];
            let (hi, lo) = (orig + eps, orig - eps);
            probe[t].data_mut()[i] = hi;
            let up = eval(&probe)?;
            probe[t].data_mut()[i] = lo;
            let down = eval(&probe)?;
            probe[t].data_mut()[i] = orig;
            // realized step, not 2*eps, so the quotient carries no step rounding
            let numeric = (up - down) / (hi - lo);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
