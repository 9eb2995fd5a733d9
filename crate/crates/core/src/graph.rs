//! Tape-style reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! evaluation order, so insertion order is a topological order and the
//! backward pass walks the tape in reverse. A graph created with
//! [`Graph::shape_only`] records the same nodes and output shapes without
//! computing any values; the cost model walks such traces.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{shape_err, Error, Result};
use crate::exec::Execution;
use crate::kernels::{conv, resize};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operator kind and its static attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Input,
    Param,
    Conv2d { kernel_h: usize, kernel_w: usize, stride: usize, padding: usize, bias: bool },
    BilinearResize { align_corners: bool },
    SoftmaxChannels,
    Relu,
    Add,
    Sub,
    MulBroadcastChannel,
    ConcatChannels,
    SelectChannel { channel: usize },
    BatchNorm,
    Sum,
    Mse,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Input => "input",
            OpKind::Param => "param",
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::BilinearResize { .. } => "bilinear_resize",
            OpKind::SoftmaxChannels => "softmax_channels",
            OpKind::Relu => "relu",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::MulBroadcastChannel => "mul_broadcast_channel",
            OpKind::ConcatChannels => "concat_channels",
            OpKind::SelectChannel { .. } => "select_channel",
            OpKind::BatchNorm => "batchnorm",
            OpKind::Sum => "sum",
            OpKind::Mse => "mse",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    Conv2d { input: NodeId, weight: NodeId, bias: Option<NodeId>, stride: usize, padding: usize },
    Resize { input: NodeId, align_corners: bool },
    Softmax { input: NodeId },
    Relu { input: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    MulChannel { weights: NodeId, x: NodeId },
    Concat { inputs: Vec<NodeId> },
    SelectChannel { input: NodeId, channel: usize },
    BatchNorm { input: NodeId, gamma: NodeId, beta: NodeId, mean: Vec<T>, var: Vec<T>, eps: T },
    Sum { input: NodeId },
    Mse { input: NodeId, target: Tensor<T> },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input | Op::Param(_) => Vec::new(),
            Op::Conv2d { input, weight, bias, .. } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Op::Resize { input, .. }
            | Op::Softmax { input }
            | Op::Relu { input }
            | Op::SelectChannel { input, .. }
            | Op::Sum { input }
            | Op::Mse { input, .. } => vec![*input],
            Op::Add { a, b } | Op::Sub { a, b } => vec![*a, *b],
            Op::MulChannel { weights, x } => vec![*weights, *x],
            Op::Concat { inputs } => inputs.clone(),
            Op::BatchNorm { input, gamma, beta, .. } => vec![*input, *gamma, *beta],
        }
    }
}

struct Node<T> {
    op: Op<T>,
    kind: OpKind,
    shape: Shape,
    value: Option<Tensor<T>>,
    requires_grad: bool,
    name: String,
}

/// Read-only view of one recorded node.
#[derive(Clone, Debug)]
pub struct NodeInfo<'a> {
    pub id: NodeId,
    pub name: &'a str,
    pub kind: &'a OpKind,
    pub inputs: Vec<NodeId>,
    pub shape: Shape,
    pub param: Option<ParamId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Mode {
    Eager,
    ShapeOnly,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    mode: Mode,
    exec: Execution,
    scopes: Vec<String>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    /// A graph that evaluates every node as it is recorded.
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), mode: Mode::Eager, exec: Execution::default(), scopes: Vec::new() }
    }

    /// A graph that only propagates shapes.
    pub fn shape_only() -> Self {
        Graph { mode: Mode::ShapeOnly, ..Self::new() }
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    pub fn execution(&self) -> Execution {
        self.exec
    }

    pub fn is_shape_only(&self) -> bool {
        self.mode == Mode::ShapeOnly
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn push_scope(&mut self, scope: impl Into<String>) {
        self.scopes.push(scope.into());
    }

    pub fn pop_scope(&mut self) {
        self.scopes.pop();
    }

    /// Runs `f` with `scope` as the name prefix of new nodes. Nodes are named
    /// after the innermost scope only.
    pub fn scoped<R>(&mut self, scope: impl Into<String>, f: impl FnOnce(&mut Self) -> Result<R>) -> Result<R> {
        self.push_scope(scope);
        let out = f(self);
        self.pop_scope();
        out
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].shape
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor<T>> {
        self.nodes[id.0]
            .value
            .as_ref()
            .ok_or_else(|| Error::Usage("node values are not available in a shape-only graph".into()))
    }

    pub fn name(&self, id: NodeId) -> &str {
        &self.nodes[id.0].name
    }

    pub fn node(&self, id: NodeId) -> NodeInfo<'_> {
        let n = &self.nodes[id.0];
        NodeInfo {
            id,
            name: &n.name,
            kind: &n.kind,
            inputs: n.op.inputs(),
            shape: n.shape,
            param: match n.op {
                Op::Param(p) => Some(p),
                _ => None,
            },
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeInfo<'_>> {
        (0..self.nodes.len()).map(|i| self.node(NodeId(i)))
    }

    /// True if `target` depends on `source` through any chain of inputs.
    pub fn depends_on(&self, target: NodeId, source: NodeId) -> bool {
        if source.0 > target.0 {
            return false;
        }
        let mut reach = vec![false; target.0 + 1];
        reach[target.0] = true;
        for i in (source.0..=target.0).rev() {
            if !reach[i] {
                continue;
            }
            for inp in self.nodes[i].op.inputs() {
                reach[inp.0] = true;
            }
        }
        reach[source.0]
    }

    fn push(&mut self, op: Op<T>, kind: OpKind, shape: Shape, value: Option<Tensor<T>>) -> Result<NodeId> {
        let requires_grad = match &op {
            Op::Input | Op::Param(_) => false,
            other => other.inputs().iter().any(|i| self.nodes[i.0].requires_grad),
        };
        let name = match self.scopes.last() {
            Some(scope) => format!("{scope}/{}", kind.name()),
            None => kind.name().to_string(),
        };
        if let Some(v) = &value {
            debug_assert_eq!(v.shape(), shape);
            if !v.all_finite() {
                return Err(Error::Numeric {
                    node: format!("node {} `{name}`", self.nodes.len()),
                    detail: "produced NaN or infinity".into(),
                });
            }
        }
        self.nodes.push(Node { op, kind, shape, value, requires_grad, name });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn eager(&self) -> bool {
        self.mode == Mode::Eager
    }

    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<NodeId> {
        let shape = value.shape();
        let id = self.push(Op::Input, OpKind::Input, shape, self.eager().then_some(value))?;
        self.nodes[id.0].requires_grad = requires_grad;
        Ok(id)
    }

    /// A value-less input; only valid in shape-only graphs.
    pub fn placeholder(&mut self, shape: Shape) -> Result<NodeId> {
        if self.eager() {
            return Err(Error::Usage("placeholders are only allowed in shape-only graphs".into()));
        }
        shape.validate()?;
        self.push(Op::Input, OpKind::Input, shape, None)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<NodeId> {
        let p = store.get(id);
        let shape = p.value.shape();
        self.push_scope(p.name.clone());
        let node = self.push(Op::Param(id), OpKind::Param, shape, self.eager().then(|| p.value.clone()));
        self.pop_scope();
        let node = node?;
        self.nodes[node.0].requires_grad = p.trainable;
        Ok(node)
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let ws = self.shape(weight);
        let shape = conv::conv2d_shape(self.shape(input), ws, bias.map(|b| self.shape(b)), stride, padding)?;
        let value = if self.eager() {
            let b = match bias {
                Some(b) => Some(self.value(b)?),
                None => None,
            };
            Some(conv::conv2d_forward(self.value(input)?, self.value(weight)?, b, stride, padding, self.exec)?)
        } else {
            None
        };
        let kind = OpKind::Conv2d { kernel_h: ws.h, kernel_w: ws.w, stride, padding, bias: bias.is_some() };
        self.push(Op::Conv2d { input, weight, bias, stride, padding }, kind, shape, value)
    }

    pub fn bilinear_resize(&mut self, input: NodeId, out_h: usize, out_w: usize, align_corners: bool) -> Result<NodeId> {
        let shape = resize::resize_shape(self.shape(input), out_h, out_w)?;
        let value = if self.eager() {
            Some(resize::bilinear_forward(self.value(input)?, out_h, out_w, align_corners, self.exec)?)
        } else {
            None
        };
        self.push(Op::Resize { input, align_corners }, OpKind::BilinearResize { align_corners }, shape, value)
    }

    /// Softmax across channels at every `(n, y, x)`, with max subtraction.
    pub fn softmax_channels(&mut self, input: NodeId) -> Result<NodeId> {
        let shape = self.shape(input);
        let value = if self.eager() { Some(softmax_channels(self.value(input)?)) } else { None };
        self.push(Op::Softmax { input }, OpKind::SoftmaxChannels, shape, value)
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        let shape = self.shape(input);
        let value = if self.eager() {
            Some(self.value(input)?.map(|v| if v > T::zero() { v } else { T::zero() }))
        } else {
            None
        };
        self.push(Op::Relu { input }, OpKind::Relu, shape, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err!("add operands differ: {sa} vs {sb}"));
        }
        let value = if self.eager() { Some(self.value(a)?.zip_map(self.value(b)?, |x, y| x + y)?) } else { None };
        self.push(Op::Add { a, b }, OpKind::Add, sa, value)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err!("sub operands differ: {sa} vs {sb}"));
        }
        let value = if self.eager() { Some(self.value(a)?.zip_map(self.value(b)?, |x, y| x - y)?) } else { None };
        self.push(Op::Sub { a, b }, OpKind::Sub, sa, value)
    }

    /// Multiplies every channel of `x` by the single-channel map `weights`.
    pub fn mul_broadcast_channel(&mut self, weights: NodeId, x: NodeId) -> Result<NodeId> {
        let (sw, sx) = (self.shape(weights), self.shape(x));
        if sw != sx.with_c(1) {
            return Err(shape_err!("channel-broadcast weights must be {}, got {sw}", sx.with_c(1)));
        }
        let value = if self.eager() {
            let w = self.value(weights)?.data();
            let xv = self.value(x)?;
            let plane = sx.plane();
            let mut out = xv.data().to_vec();
            for n in 0..sx.n {
                let wp = &w[n * plane..][..plane];
                for c in 0..sx.c {
                    let op = &mut out[(n * sx.c + c) * plane..][..plane];
                    for (o, &wv) in op.iter_mut().zip(wp) {
                        *o = wv * *o;
                    }
                }
            }
            Some(Tensor::from_vec_unchecked(sx, out))
        } else {
            None
        };
        self.push(Op::MulChannel { weights, x }, OpKind::MulBroadcastChannel, sx, value)
    }

    pub fn concat_channels(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let first = *inputs.first().ok_or_else(|| shape_err!("concat needs at least one input"))?;
        let s0 = self.shape(first);
        let mut c = 0;
        for &i in inputs {
            let s = self.shape(i);
            if (s.n, s.h, s.w) != (s0.n, s0.h, s0.w) {
                return Err(shape_err!("concat operands differ outside channels: {s} vs {s0}"));
            }
            c += s.c;
        }
        let shape = s0.with_c(c);
        let value = if self.eager() {
            let mut out = Vec::with_capacity(shape.numel());
            for n in 0..shape.n {
                for &i in inputs {
                    let v = self.value(i)?;
                    let per = v.shape().c * v.shape().plane();
                    out.extend_from_slice(&v.data()[n * per..][..per]);
                }
            }
            Some(Tensor::from_vec_unchecked(shape, out))
        } else {
            None
        };
        self.push(Op::Concat { inputs: inputs.to_vec() }, OpKind::ConcatChannels, shape, value)
    }

    /// Extracts channel `channel` as an `(n, 1, h, w)` map.
    pub fn select_channel(&mut self, input: NodeId, channel: usize) -> Result<NodeId> {
        let s = self.shape(input);
        if channel >= s.c {
            return Err(shape_err!("channel {channel} out of range for {s}"));
        }
        let shape = s.with_c(1);
        let value = if self.eager() {
            let v = self.value(input)?;
            let mut out = Vec::with_capacity(shape.numel());
            for n in 0..s.n {
                out.extend_from_slice(&v.data()[(n * s.c + channel) * s.plane()..][..s.plane()]);
            }
            Some(Tensor::from_vec_unchecked(shape, out))
        } else {
            None
        };
        self.push(Op::SelectChannel { input, channel }, OpKind::SelectChannel { channel }, shape, value)
    }

    /// Inference-mode normalization with fixed per-channel statistics.
    pub fn batchnorm_inference(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<NodeId> {
        let s = self.shape(input);
        let stat = Shape::new(1, s.c, 1, 1);
        if self.shape(gamma) != stat || self.shape(beta) != stat || mean.len() != s.c || var.len() != s.c {
            return Err(shape_err!("batchnorm statistics must have {} channels", s.c));
        }
        if let Some(c) = var.iter().position(|&v| v + eps <= T::zero()) {
            return Err(Error::Numeric {
                node: self.scopes.last().cloned().unwrap_or_default(),
                detail: format!("batchnorm var + eps <= 0 on channel {c}"),
            });
        }
        let value = if self.eager() {
            let x = self.value(input)?;
            let g = self.value(gamma)?.data();
            let b = self.value(beta)?.data();
            let mut out = x.data().to_vec();
            for n in 0..s.n {
                for c in 0..s.c {
                    let scale = g[c] / (var[c] + eps).sqrt();
                    for o in &mut out[(n * s.c + c) * s.plane()..][..s.plane()] {
                        *o = scale * (*o - mean[c]) + b[c];
                    }
                }
            }
            Some(Tensor::from_vec_unchecked(s, out))
        } else {
            None
        };
        let op = Op::BatchNorm { input, gamma, beta, mean: mean.to_vec(), var: var.to_vec(), eps };
        self.push(op, OpKind::BatchNorm, s, value)
    }

    /// Sum of all elements, as a `(1, 1, 1, 1)` scalar.
    pub fn sum(&mut self, input: NodeId) -> Result<NodeId> {
        let value = if self.eager() { Some(Tensor::scalar(self.value(input)?.sum())) } else { None };
        self.push(Op::Sum { input }, OpKind::Sum, Shape::SCALAR, value)
    }

    /// Mean squared error against a constant target, as a scalar.
    pub fn mse(&mut self, input: NodeId, target: &Tensor<T>) -> Result<NodeId> {
        let s = self.shape(input);
        if target.shape() != s {
            return Err(shape_err!("mse target {} does not match prediction {s}", target.shape()));
        }
        let value = if self.eager() {
            let x = self.value(input)?;
            let sq: T = x.data().iter().zip(target.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
            Some(Tensor::scalar(sq / T::from_usize(s.numel()).unwrap()))
        } else {
            None
        };
        self.push(Op::Mse { input, target: target.clone() }, OpKind::Mse, Shape::SCALAR, value)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.is_shape_only() {
            return Err(Error::Usage("cannot differentiate a shape-only graph".into()));
        }
        if !self.shape(loss).is_scalar() {
            return Err(Error::Usage(format!("backward needs a scalar loss, got {}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(Shape::SCALAR));
        let mut params = BTreeMap::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].clone() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let need = |id: NodeId| self.nodes[id.0].requires_grad;
            match &node.op {
                Op::Input => {}
                Op::Param(p) => accumulate(params.entry(*p).or_insert(None), g),
                Op::Conv2d { input, weight, bias, stride, padding } => {
                    if need(*input) {
                        let w = self.value(*weight)?;
                        let gi = conv::conv2d_backward_input(&g, w, self.shape(*input), *stride, *padding, self.exec);
                        accumulate(&mut grads[input.0], gi);
                    }
                    if need(*weight) {
                        let x = self.value(*input)?;
                        let gw = conv::conv2d_backward_weight(&g, x, self.shape(*weight), *stride, *padding, self.exec);
                        accumulate(&mut grads[weight.0], gw);
                    }
                    if let Some(b) = bias.filter(|&b| need(b)) {
                        accumulate(&mut grads[b.0], conv::conv2d_backward_bias(&g));
                    }
                }
                Op::Resize { input, align_corners } => {
                    let gi = resize::bilinear_backward(&g, self.shape(*input), *align_corners, self.exec);
                    accumulate(&mut grads[input.0], gi);
                }
                Op::Softmax { input } => {
                    let y = self.value(NodeId(i))?;
                    accumulate(&mut grads[input.0], softmax_backward(y, &g));
                }
                Op::Relu { input } => {
                    let x = self.value(*input)?;
                    let gi = x.zip_map(&g, |xv, gv| if xv > T::zero() { gv } else { T::zero() })?;
                    accumulate(&mut grads[input.0], gi);
                }
                Op::Add { a, b } => {
                    if need(*a) {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if need(*b) {
                        accumulate(&mut grads[b.0], g);
                    }
                }
                Op::Sub { a, b } => {
                    if need(*a) {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if need(*b) {
                        accumulate(&mut grads[b.0], g.map(|v| -v));
                    }
                }
                Op::MulChannel { weights, x } => {
                    let (gw, gx) = mul_channel_backward(self.value(*weights)?, self.value(*x)?, &g);
                    if need(*weights) {
                        accumulate(&mut grads[weights.0], gw);
                    }
                    if need(*x) {
                        accumulate(&mut grads[x.0], gx);
                    }
                }
                Op::Concat { inputs } => {
                    let s = g.shape();
                    let mut offset = 0;
                    for inp in inputs {
                        let si = self.shape(*inp);
                        if need(*inp) {
                            let mut part = Vec::with_capacity(si.numel());
                            for n in 0..s.n {
                                part.extend_from_slice(&g.data()[(n * s.c + offset) * s.plane()..][..si.c * s.plane()]);
                            }
                            accumulate(&mut grads[inp.0], Tensor::from_vec_unchecked(si, part));
                        }
                        offset += si.c;
                    }
                }
                Op::SelectChannel { input, channel } => {
                    let s = self.shape(*input);
                    let mut gi = vec![T::zero(); s.numel()];
                    for n in 0..s.n {
                        gi[(n * s.c + channel) * s.plane()..][..s.plane()]
                            .copy_from_slice(&g.data()[n * s.plane()..][..s.plane()]);
                    }
                    accumulate(&mut grads[input.0], Tensor::from_vec_unchecked(s, gi));
                }
                Op::BatchNorm { input, gamma, beta, mean, var, eps } => {
                    let x = self.value(*input)?;
                    let gam = self.value(*gamma)?.data();
                    let s = x.shape();
                    let mut gx = vec![T::zero(); s.numel()];
                    let mut gg = vec![T::zero(); s.c];
                    let mut gb = vec![T::zero(); s.c];
                    for n in 0..s.n {
                        for c in 0..s.c {
                            let inv = T::one() / (var[c] + *eps).sqrt();
                            let off = (n * s.c + c) * s.plane();
                            for (k, gxk) in gx.iter_mut().enumerate().skip(off).take(s.plane()) {
                                let gv = g.data()[k];
                                *gxk = gv * gam[c] * inv;
                                gg[c] = gg[c] + gv * (x.data()[k] - mean[c]) * inv;
                                gb[c] = gb[c] + gv;
                            }
                        }
                    }
                    let stat = Shape::new(1, s.c, 1, 1);
                    if need(*input) {
                        accumulate(&mut grads[input.0], Tensor::from_vec_unchecked(s, gx));
                    }
                    if need(*gamma) {
                        accumulate(&mut grads[gamma.0], Tensor::from_vec_unchecked(stat, gg));
                    }
                    if need(*beta) {
                        accumulate(&mut grads[beta.0], Tensor::from_vec_unchecked(stat, gb));
                    }
                }
                Op::Sum { input } => {
                    accumulate(&mut grads[input.0], Tensor::full(self.shape(*input), g.data()[0]));
                }
                Op::Mse { input, target } => {
                    let x = self.value(*input)?;
                    let scale = g.data()[0] * T::from_f64_lossy(2.0) / T::from_usize(x.len()).unwrap();
                    accumulate(&mut grads[input.0], x.zip_map(target, |a, b| scale * (a - b))?);
                }
            }
        }

        let params = params.into_iter().filter_map(|(k, v)| v.map(|t| (k, t))).collect();
        Ok(Gradients { nodes: grads, params })
    }

    /// Runs [`Graph::backward`] and adds the parameter gradients into `store`.
    pub fn backward_into(&self, loss: NodeId, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let grads = self.backward(loss)?;
        store.accumulate(&grads);
        Ok(grads)
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + v;
            }
        }
    }
}

pub(crate) fn softmax_channels<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let plane = s.plane();
    let src = x.data();
    let mut out = vec![T::zero(); s.numel()];
    for n in 0..s.n {
        let base = n * s.c * plane;
        for p in 0..plane {
            let idx = |c: usize| base + c * plane + p;
            let m = (0..s.c).map(|c| src[idx(c)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for c in 0..s.c {
                let e = (src[idx(c)] - m).exp();
                out[idx(c)] = e;
                total = total + e;
            }
            for c in 0..s.c {
                out[idx(c)] = out[idx(c)] / total;
            }
        }
    }
    Tensor::from_vec_unchecked(s, out)
}

fn softmax_backward<T: Real>(y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let s = y.shape();
    let plane = s.plane();
    let (yv, gv) = (y.data(), g.data());
    let mut out = vec![T::zero(); s.numel()];
    for n in 0..s.n {
        let base = n * s.c * plane;
        for p in 0..plane {
            let idx = |c: usize| base + c * plane + p;
            let dot: T = (0..s.c).map(|c| yv[idx(c)] * gv[idx(c)]).sum();
            for c in 0..s.c {
                out[idx(c)] = yv[idx(c)] * (gv[idx(c)] - dot);
            }
        }
    }
    Tensor::from_vec_unchecked(s, out)
}

fn mul_channel_backward<T: Real>(w: &Tensor<T>, x: &Tensor<T>, g: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let s = x.shape();
    let plane = s.plane();
    let mut gw = vec![T::zero(); s.n * plane];
    let mut gx = vec![T::zero(); s.numel()];
    for n in 0..s.n {
        for c in 0..s.c {
            let off = (n * s.c + c) * plane;
            for p in 0..plane {
                let wv = w.data()[n * plane + p];
                gx[off + p] = wv * g.data()[off + p];
                gw[n * plane + p] = gw[n * plane + p] + g.data()[off + p] * x.data()[off + p];
            }
        }
    }
    (Tensor::from_vec_unchecked(w.shape(), gw), Tensor::from_vec_unchecked(s, gx))
}

/// Result of a backward pass.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to a node's output, if it was reached.
    pub fn node(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }
}
