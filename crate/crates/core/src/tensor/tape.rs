use std::cell::{Cell, RefCell};

use crate::error::{Error, Result};
use crate::rng::Rng;

use super::conv::{self, ConvDims};
use super::{numel_of, Tensor};

/// Index of a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

/// Recorded primitive. Parents are stored as node indices; a node always
/// appears after all of its parents (topological order by construction).
#[derive(Debug)]
pub enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    ScalarMul(NodeId, f64),
    /// Elementwise division of `num` by a scalar tape node `den`.
    DivScalar {
        num: NodeId,
        den: NodeId,
    },
    Matmul(NodeId, NodeId),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        stride: usize,
        padding: Padding,
    },
    Elu(NodeId),
    Relu(NodeId),
    ChannelAffine {
        input: NodeId,
        scale: NodeId,
        bias: NodeId,
    },
    GlobalAvgPool(NodeId),
    ConcatChannels(NodeId, NodeId),
    Reshape(NodeId),
    Exp(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    Sum(NodeId),
    L2Norm(NodeId),
    Dropout {
        input: NodeId,
        mask: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of one backward pass, indexed by the node ids of the tape that
/// produced them. Interior-node gradients are dropped as the pass consumes
/// them; leaves keep theirs.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Number of nodes that received a gradient.
    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Records a forward pass and computes reverse-mode gradients.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    backward_done: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            backward_done: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Register an input tensor. Its `requires_grad` flag decides whether it
    /// receives a gradient in [`Tape::backward`].
    pub fn leaf(&self, t: Tensor) -> Result<NodeId> {
        check_finite("leaf", t.data())?;
        let rg = t.requires_grad();
        Ok(self.push_node(t, Op::Leaf, rg))
    }

    /// Register a constant input (never differentiated).
    pub fn constant(&self, t: Tensor) -> Result<NodeId> {
        check_finite("leaf", t.data())?;
        Ok(self.push_node(t, Op::Leaf, false))
    }

    pub fn scalar_const(&self, v: f64) -> Result<NodeId> {
        self.constant(Tensor::scalar(v))
    }

    fn push_node(&self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(nodes.len() - 1)
    }

    fn push_op(
        &self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        requires_grad: bool,
    ) -> Result<NodeId> {
        check_finite(name, &data)?;
        let t = Tensor::new(shape, data)?;
        Ok(self.push_node(t, op, requires_grad))
    }

    fn get_checked(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.borrow().len() {
            Ok(())
        } else {
            Err(Error::Autodiff(format!(
                "node id {} out of range ({} nodes recorded)",
                id.0,
                self.nodes.borrow().len()
            )))
        }
    }

    pub fn value(&self, id: NodeId) -> Tensor {
        self.nodes.borrow()[id.0].value.clone()
    }

    pub fn shape_of(&self, id: NodeId) -> Vec<usize> {
        self.nodes.borrow()[id.0].value.shape().to_vec()
    }

    pub fn item(&self, id: NodeId) -> Result<f64> {
        self.nodes.borrow()[id.0].value.item()
    }

    // ── elementwise binary ──────────────────────────────────────────

    fn zip_op(
        &self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        self.get_checked(a)?;
        self.get_checked(b)?;
        let (shape, data, rg) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            if na.value.shape() != nb.value.shape() {
                return Err(Error::Shape {
                    op: name,
                    detail: format!("{:?} vs {:?}", na.value.shape(), nb.value.shape()),
                });
            }
            let data: Vec<f64> = na
                .value
                .data()
                .iter()
                .zip(nb.value.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            (
                na.value.shape().to_vec(),
                data,
                na.requires_grad || nb.requires_grad,
            )
        };
        self.push_op(name, shape, data, op, rg)
    }

    pub fn add(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scalar_mul(&self, a: NodeId, c: f64) -> Result<NodeId> {
        self.get_checked(a)?;
        let (shape, data, rg) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            let data = na.value.data().iter().map(|&x| c * x).collect();
            (na.value.shape().to_vec(), data, na.requires_grad)
        };
        self.push_op("scalar_mul", shape, data, Op::ScalarMul(a, c), rg)
    }

    /// Divide every element of `num` by the scalar node `den`.
    pub fn div_scalar(&self, num: NodeId, den: NodeId) -> Result<NodeId> {
        self.get_checked(num)?;
        self.get_checked(den)?;
        let (shape, data, rg) = {
            let nodes = self.nodes.borrow();
            let (nn, nd) = (&nodes[num.0], &nodes[den.0]);
            if !nd.value.is_scalar() {
                return Err(Error::Shape {
                    op: "div_scalar",
                    detail: format!("denominator must be scalar, got {:?}", nd.value.shape()),
                });
            }
            let den_v = nd.value.data()[0];
            let data = nn.value.data().iter().map(|&x| x / den_v).collect();
            (
                nn.value.shape().to_vec(),
                data,
                nn.requires_grad || nd.requires_grad,
            )
        };
        self.push_op("div_scalar", shape, data, Op::DivScalar { num, den }, rg)
    }

    // ── linear algebra ──────────────────────────────────────────────

    /// `[m,k] x [k,n] -> [m,n]`, or `[m,k] x [k] -> [m]`.
    pub fn matmul(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.get_checked(a)?;
        self.get_checked(b)?;
        let (shape, data, rg) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            let ash = na.value.shape();
            let bsh = nb.value.shape();
            let err = || Error::Shape {
                op: "matmul",
                detail: format!("{ash:?} vs {bsh:?}"),
            };
            if ash.len() != 2 {
                return Err(err());
            }
            let (m, k) = (ash[0], ash[1]);
            let (out_shape, n) = match bsh.len() {
                1 if bsh[0] == k => (vec![m], 1),
                2 if bsh[0] == k => (vec![m, bsh[1]], bsh[1]),
                _ => return Err(err()),
            };
            let (av, bv) = (na.value.data(), nb.value.data());
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let arow = &av[i * k..][..k];
                let orow = &mut out[i * n..][..n];
                for (p, &aval) in arow.iter().enumerate() {
                    let brow = &bv[p * n..][..n];
                    for (o, &bval) in orow.iter_mut().zip(brow) {
                        *o += aval * bval;
                    }
                }
            }
            (out_shape, out, na.requires_grad || nb.requires_grad)
        };
        self.push_op("matmul", shape, data, Op::Matmul(a, b), rg)
    }

    pub fn conv2d(
        &self,
        input: NodeId,
        weight: NodeId,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        self.get_checked(input)?;
        self.get_checked(weight)?;
        let (shape, data, rg) = {
            let nodes = self.nodes.borrow();
            let (ni, nw) = (&nodes[input.0], &nodes[weight.0]);
            let d = conv_dims(ni.value.shape(), nw.value.shape(), stride, padding)?;
            let out = conv::forward(ni.value.data(), nw.value.data(), &d);
            (
                vec![d.oc, d.oh, d.ow],
                out,
                ni.requires_grad || nw.requires_grad,
            )
        };
        self.push_op(
            "conv2d",
            shape,
            data,
            Op::Conv2d {
                input,
                weight,
                stride,
                padding,
            },
            rg,
        )
    }

    // ── activations and normalization ───────────────────────────────

    fn map_op(
        &self,
        name: &'static str,
        a: NodeId,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        self.get_checked(a)?;
        let (shape, data, rg) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            let data = na.value.data().iter().map(|&x| f(x)).collect();
            (na.value.shape().to_vec(), data, na.requires_grad)
        };
        self.push_op(name, shape, data, op, rg)
    }

    /// Exponential linear unit with alpha = 1.
    pub fn elu(&self, a: NodeId) -> Result<NodeId> {
        self.map_op(
            "elu",
            a,
            |x| if x > 0.0 { x } else { x.exp() - 1.0 },
            Op::Elu(a),
        )
    }

    pub fn relu(&self, a: NodeId) -> Result<NodeId> {
        self.map_op("relu", a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn exp(&self, a: NodeId) -> Result<NodeId> {
        self.map_op("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn square(&self, a: NodeId) -> Result<NodeId> {
        self.map_op("square", a, |x| x * x, Op::Square(a))
    }

    pub fn sqrt(&self, a: NodeId) -> Result<NodeId> {
        self.map_op("sqrt", a, f64::sqrt, Op::Sqrt(a))
    }

    /// Per-channel scale and bias over the leading axis.
    pub fn channel_affine(&self, input: NodeId, scale: NodeId, bias: NodeId) -> Result<NodeId> {
        self.get_checked(input)?;
        self.get_checked(scale)?;
        self.get_checked(bias)?;
        let (shape, data, rg) = {
            let nodes = self.nodes.borrow();
            let (ni, ns, nb) = (&nodes[input.0], &nodes[scale.0], &nodes[bias.0]);
            let ish = ni.value.shape();
            if ish.is_empty() {
                return Err(Error::Shape {
                    op: "channel_affine",
                    detail: "input must have a channel axis".into(),
                });
            }
            let c = ish[0];
            if ns.value.shape() != [c] || nb.value.shape() != [c] {
                return Err(Error::Shape {
                    op: "channel_affine",
                    detail: format!(
                        "input {ish:?} needs scale/bias [{c}], got {:?}/{:?}",
                        ns.value.shape(),
                        nb.value.shape()
                    ),
                });
            }
            let chunk = ni.value.numel() / c;
            let mut data = vec![0.0; ni.value.numel()];
            let (iv, sv, bv) = (ni.value.data(), ns.value.data(), nb.value.data());
            for ch in 0..c {
                let (s, b) = (sv[ch], bv[ch]);
                for (o, &x) in data[ch * chunk..][..chunk]
                    .iter_mut()
                    .zip(&iv[ch * chunk..][..chunk])
                {
                    *o = s * x + b;
                }
            }
            (
                ish.to_vec(),
                data,
                ni.requires_grad || ns.requires_grad || nb.requires_grad,
            )
        };
        self.push_op(
            "channel_affine",
            shape,
            data,
            Op::ChannelAffine { input, scale, bias },
            rg,
        )
    }

    /// `[c,h,w] -> [c]` spatial mean.
    pub fn global_avg_pool(&self, a: NodeId) -> Result<NodeId> {
        self.get_checked(a)?;
        let (shape, data, rg) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            let ish = na.value.shape();
            if ish.len() != 3 {
                return Err(Error::Shape {
                    op: "global_avg_pool",
                    detail: format!("expected [c,h,w], got {ish:?}"),
                });
            }
            let (c, hw) = (ish[0], ish[1] * ish[2]);
            let iv = na.value.data();
            let data: Vec<f64> = (0..c)
                .map(|ch| iv[ch * hw..][..hw].iter().sum::<f64>() / hw as f64)
                .collect();
            (vec![c], data, na.requires_grad)
        };
        self.push_op("global_avg_pool", shape, data, Op::GlobalAvgPool(a), rg)
    }

    /// Concatenate along the leading (channel) axis. Trailing extents must match.
    pub fn concat_channels(&self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.get_checked(a)?;
        self.get_checked(b)?;
        let (shape, data, rg) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            let (ash, bsh) = (na.value.shape(), nb.value.shape());
            if ash.is_empty() || bsh.is_empty() || ash[1..] != bsh[1..] {
                return Err(Error::Shape {
                    op: "concat_channels",
                    detail: format!("{ash:?} vs {bsh:?}"),
                });
            }
            let mut shape = ash.to_vec();
            shape[0] += bsh[0];
            let mut data = Vec::with_capacity(na.value.numel() + nb.value.numel());
            data.extend_from_slice(na.value.data());
            data.extend_from_slice(nb.value.data());
            (shape, data, na.requires_grad || nb.requires_grad)
        };
        self.push_op("concat_channels", shape, data, Op::ConcatChannels(a, b), rg)
    }

    pub fn reshape(&self, a: NodeId, new_shape: Vec<usize>) -> Result<NodeId> {
        self.get_checked(a)?;
        let (data, rg) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            if numel_of(&new_shape) != na.value.numel() || new_shape.iter().any(|&d| d == 0) {
                return Err(Error::Shape {
                    op: "reshape",
                    detail: format!("{:?} -> {new_shape:?}", na.value.shape()),
                });
            }
            (na.value.data().to_vec(), na.requires_grad)
        };
        self.push_op("reshape", new_shape, data, Op::Reshape(a), rg)
    }

    // ── reductions ──────────────────────────────────────────────────

    /// Sum of all elements, yielding a scalar.
    pub fn sum(&self, a: NodeId) -> Result<NodeId> {
        self.get_checked(a)?;
        let (total, rg) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            (na.value.data().iter().sum::<f64>(), na.requires_grad)
        };
        self.push_op("sum", vec![], vec![total], Op::Sum(a), rg)
    }

    /// Euclidean norm of all elements, yielding a scalar. The subgradient at
    /// the origin is defined as zero.
    pub fn l2norm(&self, a: NodeId) -> Result<NodeId> {
        self.get_checked(a)?;
        let (norm, rg) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            let sq: f64 = na.value.data().iter().map(|&x| x * x).sum();
            (sq.sqrt(), na.requires_grad)
        };
        self.push_op("l2norm", vec![], vec![norm], Op::L2Norm(a), rg)
    }

    // ── dropout ─────────────────────────────────────────────────────

    /// Train-mode dropout with inverted scaling: kept elements are multiplied
    /// by `1/keep` so that evaluation is a pure identity (no op recorded).
    pub fn dropout(&self, a: NodeId, keep: f64, rng: &mut Rng) -> Result<NodeId> {
        if !(keep > 0.0 && keep <= 1.0) {
            return Err(Error::Config(format!(
                "dropout keep probability {keep} not in (0, 1]"
            )));
        }
        self.get_checked(a)?;
        let n = self.nodes.borrow()[a.0].value.numel();
        let inv = 1.0 / keep;
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.uniform() < keep { inv } else { 0.0 })
            .collect();
        self.dropout_with_mask(a, mask)
    }

    /// Dropout with a caller-provided mask (entries are 0 or 1/keep).
    pub fn dropout_with_mask(&self, a: NodeId, mask: Vec<f64>) -> Result<NodeId> {
        self.get_checked(a)?;
        let (shape, data, rg) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            if mask.len() != na.value.numel() {
                return Err(Error::Shape {
                    op: "dropout",
                    detail: format!("mask len {} vs input {:?}", mask.len(), na.value.shape()),
                });
            }
            let data = na
                .value
                .data()
                .iter()
                .zip(&mask)
                .map(|(&x, &m)| x * m)
                .collect();
            (na.value.shape().to_vec(), data, na.requires_grad)
        };
        self.push_op("dropout", shape, data, Op::Dropout { input: a, mask }, rg)
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar root. Returns the gradient of the
    /// root with respect to every `requires_grad` leaf reachable from it.
    /// A constant root yields an empty gradient set. One backward pass is
    /// allowed per tape.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        self.get_checked(root)?;
        if self.backward_done.get() {
            return Err(Error::Autodiff("backward already run for this tape".into()));
        }
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.0];
        if !root_node.value.is_scalar() {
            return Err(Error::Autodiff(format!(
                "backward root must be scalar, got shape {:?}",
                root_node.value.shape()
            )));
        }
        self.backward_done.set(true);
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if !root_node.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            if grads[i].is_none() || !nodes[i].requires_grad {
                continue;
            }
            if matches!(nodes[i].op, Op::Leaf) {
                continue; // keep leaf gradients for the caller
            }
            let g = grads[i].take().expect("checked above");
            propagate(&nodes, i, &g, &mut grads);
        }
        // Drop gradients that landed on non-leaf or non-grad nodes.
        for (i, slot) in grads.iter_mut().enumerate() {
            if !(matches!(nodes[i].op, Op::Leaf) && nodes[i].requires_grad) {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn conv_dims(
    ishape: &[usize],
    wshape: &[usize],
    stride: usize,
    padding: Padding,
) -> Result<ConvDims> {
    let err = |detail: String| Error::Shape {
        op: "conv2d",
        detail,
    };
    if ishape.len() != 3 || wshape.len() != 4 {
        return Err(err(format!("input {ishape:?}, weight {wshape:?}")));
    }
    if stride == 0 {
        return Err(Error::Config("conv2d stride must be positive".into()));
    }
    let (ic, h, w) = (ishape[0], ishape[1], ishape[2]);
    let (oc, wic, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
    if wic != ic {
        return Err(err(format!(
            "input has {ic} channels, weight expects {wic}"
        )));
    }
    let (oh, ow, pad_top, pad_left) = match padding {
        Padding::Valid => {
            if kh > h || kw > w {
                return Err(err(format!(
                    "kernel {kh}x{kw} larger than input {h}x{w} with valid padding"
                )));
            }
            ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0)
        }
        Padding::Same => {
            let oh = h.div_ceil(stride);
            let ow = w.div_ceil(stride);
            let pad_h = ((oh - 1) * stride + kh).saturating_sub(h);
            let pad_w = ((ow - 1) * stride + kw).saturating_sub(w);
            (oh, ow, pad_h / 2, pad_w / 2)
        }
    };
    Ok(ConvDims {
        ic,
        h,
        w,
        oc,
        kh,
        kw,
        stride,
        pad_top,
        pad_left,
        oh,
        ow,
    })
}

fn accumulate(
    grads: &mut [Option<Vec<f64>>],
    id: NodeId,
    numel: usize,
    f: impl FnOnce(&mut [f64]),
) {
    let slot = grads[id.0].get_or_insert_with(|| vec![0.0; numel]);
    f(slot);
}

fn propagate(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let wants = |id: NodeId| nodes[id.0].requires_grad;
    let numel = |id: NodeId| nodes[id.0].value.numel();
    let data = |id: NodeId| nodes[id.0].value.data();
    match &nodes[i].op {
        Op::Leaf => unreachable!("leaves are not propagated"),
        Op::Add(a, b) => {
            for &p in &[*a, *b] {
                if wants(p) {
                    accumulate(grads, p, numel(p), |d| {
                        for (dv, gv) in d.iter_mut().zip(g) {
                            *dv += gv;
                        }
                    });
                }
            }
        }
        Op::Sub(a, b) => {
            if wants(*a) {
                accumulate(grads, *a, numel(*a), |d| {
                    for (dv, gv) in d.iter_mut().zip(g) {
                        *dv += gv;
                    }
                });
            }
            if wants(*b) {
                accumulate(grads, *b, numel(*b), |d| {
                    for (dv, gv) in d.iter_mut().zip(g) {
                        *dv -= gv;
                    }
                });
            }
        }
        Op::Mul(a, b) => {
            if wants(*a) {
                let bv = data(*b);
                accumulate(grads, *a, numel(*a), |d| {
                    for ((dv, gv), xv) in d.iter_mut().zip(g).zip(bv) {
                        *dv += gv * xv;
                    }
                });
            }
            if wants(*b) {
                let av = data(*a);
                accumulate(grads, *b, numel(*b), |d| {
                    for ((dv, gv), xv) in d.iter_mut().zip(g).zip(av) {
                        *dv += gv * xv;
                    }
                });
            }
        }
        Op::ScalarMul(a, c) => {
            if wants(*a) {
                let c = *c;
                accumulate(grads, *a, numel(*a), |d| {
                    for (dv, gv) in d.iter_mut().zip(g) {
                        *dv += gv * c;
                    }
                });
            }
        }
        Op::DivScalar { num, den } => {
            let den_v = data(*den)[0];
            if wants(*num) {
                accumulate(grads, *num, numel(*num), |d| {
                    for (dv, gv) in d.iter_mut().zip(g) {
                        *dv += gv / den_v;
                    }
                });
            }
            if wants(*den) {
                let nv = data(*num);
                let mut acc = 0.0;
                for (gv, xv) in g.iter().zip(nv) {
                    acc -= gv * xv;
                }
                acc /= den_v * den_v;
                accumulate(grads, *den, 1, |d| d[0] += acc);
            }
        }
        Op::Matmul(a, b) => {
            let ash = nodes[a.0].value.shape().to_vec();
            let bsh = nodes[b.0].value.shape().to_vec();
            let (m, k) = (ash[0], ash[1]);
            let n = if bsh.len() == 2 { bsh[1] } else { 1 };
            let (av, bv) = (data(*a), data(*b));
            if wants(*a) {
                accumulate(grads, *a, m * k, |d| {
                    for i in 0..m {
                        let grow = &g[i * n..][..n];
                        let drow = &mut d[i * k..][..k];
                        for (p, dv) in drow.iter_mut().enumerate() {
                            let brow = &bv[p * n..][..n];
                            let mut acc = 0.0;
                            for (gv, bvv) in grow.iter().zip(brow) {
                                acc += gv * bvv;
                            }
                            *dv += acc;
                        }
                    }
                });
            }
            if wants(*b) {
                accumulate(grads, *b, k * n, |d| {
                    for i in 0..m {
                        let grow = &g[i * n..][..n];
                        let arow = &av[i * k..][..k];
                        for (p, &avv) in arow.iter().enumerate() {
                            let drow = &mut d[p * n..][..n];
                            for (dv, gv) in drow.iter_mut().zip(grow) {
                                *dv += avv * gv;
                            }
                        }
                    }
                });
            }
        }
        Op::Conv2d {
            input,
            weight,
            stride,
            padding,
        } => {
            let d = conv_dims(
                nodes[input.0].value.shape(),
                nodes[weight.0].value.shape(),
                *stride,
                *padding,
            )
            .expect("shapes validated in forward");
            let (din, dw) = conv::backward(data(*input), data(*weight), g, &d);
            if wants(*input) {
                accumulate(grads, *input, numel(*input), |dst| {
                    for (dv, s) in dst.iter_mut().zip(&din) {
                        *dv += s;
                    }
                });
            }
            if wants(*weight) {
                accumulate(grads, *weight, numel(*weight), |dst| {
                    for (dv, s) in dst.iter_mut().zip(&dw) {
                        *dv += s;
                    }
                });
            }
        }
        Op::Elu(a) => {
            if wants(*a) {
                let xv = data(*a);
                let yv = nodes[i].value.data();
                accumulate(grads, *a, numel(*a), |d| {
                    for (((dv, gv), &x), &y) in d.iter_mut().zip(g).zip(xv).zip(yv) {
                        *dv += if x > 0.0 { *gv } else { gv * (y + 1.0) };
                    }
                });
            }
        }
        Op::Relu(a) => {
            if wants(*a) {
                let xv = data(*a);
                accumulate(grads, *a, numel(*a), |d| {
                    for ((dv, gv), &x) in d.iter_mut().zip(g).zip(xv) {
                        if x > 0.0 {
                            *dv += gv;
                        }
                    }
                });
            }
        }
        Op::ChannelAffine { input, scale, bias } => {
            let c = nodes[scale.0].value.numel();
            let chunk = nodes[input.0].value.numel() / c;
            if wants(*input) {
                let sv = data(*scale);
                accumulate(grads, *input, numel(*input), |d| {
                    for ch in 0..c {
                        let s = sv[ch];
                        for (dv, gv) in d[ch * chunk..][..chunk]
                            .iter_mut()
                            .zip(&g[ch * chunk..][..chunk])
                        {
                            *dv += gv * s;
                        }
                    }
                });
            }
            if wants(*scale) {
                let iv = data(*input);
                accumulate(grads, *scale, c, |d| {
                    for (ch, dv) in d.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for (gv, xv) in g[ch * chunk..][..chunk]
                            .iter()
                            .zip(&iv[ch * chunk..][..chunk])
                        {
                            acc += gv * xv;
                        }
                        *dv += acc;
                    }
                });
            }
            if wants(*bias) {
                accumulate(grads, *bias, c, |d| {
                    for (ch, dv) in d.iter_mut().enumerate() {
                        *dv += g[ch * chunk..][..chunk].iter().sum::<f64>();
                    }
                });
            }
        }
        Op::GlobalAvgPool(a) => {
            if wants(*a) {
                let ish = nodes[a.0].value.shape().to_vec();
                let hw = ish[1] * ish[2];
                let inv = 1.0 / hw as f64;
                accumulate(grads, *a, numel(*a), |d| {
                    for (ch, &gv) in g.iter().enumerate() {
                        for dv in &mut d[ch * hw..][..hw] {
                            *dv += gv * inv;
                        }
                    }
                });
            }
        }
        Op::ConcatChannels(a, b) => {
            let na = numel(*a);
            if wants(*a) {
                accumulate(grads, *a, na, |d| {
                    for (dv, gv) in d.iter_mut().zip(&g[..na]) {
                        *dv += gv;
                    }
                });
            }
            if wants(*b) {
                accumulate(grads, *b, numel(*b), |d| {
                    for (dv, gv) in d.iter_mut().zip(&g[na..]) {
                        *dv += gv;
                    }
                });
            }
        }
        Op::Reshape(a) => {
            if wants(*a) {
                accumulate(grads, *a, numel(*a), |d| {
                    for (dv, gv) in d.iter_mut().zip(g) {
                        *dv += gv;
                    }
                });
            }
        }
        Op::Exp(a) => {
            if wants(*a) {
                let yv = nodes[i].value.data();
                accumulate(grads, *a, numel(*a), |d| {
                    for ((dv, gv), &y) in d.iter_mut().zip(g).zip(yv) {
                        *dv += gv * y;
                    }
                });
            }
        }
        Op::Square(a) => {
            if wants(*a) {
                let xv = data(*a);
                accumulate(grads, *a, numel(*a), |d| {
                    for ((dv, gv), &x) in d.iter_mut().zip(g).zip(xv) {
                        *dv += gv * 2.0 * x;
                    }
                });
            }
        }
        Op::Sqrt(a) => {
            if wants(*a) {
                let yv = nodes[i].value.data();
                accumulate(grads, *a, numel(*a), |d| {
                    for ((dv, gv), &y) in d.iter_mut().zip(g).zip(yv) {
                        *dv += gv / (2.0 * y);
                    }
                });
            }
        }
        Op::Sum(a) => {
            if wants(*a) {
                let gv = g[0];
                accumulate(grads, *a, numel(*a), |d| {
                    for dv in d.iter_mut() {
                        *dv += gv;
                    }
                });
            }
        }
        Op::L2Norm(a) => {
            if wants(*a) {
                let y = nodes[i].value.data()[0];
                let gv = g[0];
                let xv = data(*a);
                accumulate(grads, *a, numel(*a), |d| {
                    if y > 0.0 {
                        for (dv, &x) in d.iter_mut().zip(xv) {
                            *dv += gv * x / y;
                        }
                    }
                });
            }
        }
        Op::Dropout { input, mask } => {
            if wants(*input) {
                accumulate(grads, *input, numel(*input), |d| {
                    for ((dv, gv), m) in d.iter_mut().zip(g).zip(mask) {
                        *dv += gv * m;
                    }
                });
            }
        }
    }
}
