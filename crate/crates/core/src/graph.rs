//! Static computation graph with reverse-mode differentiation.
//!
//! A graph is built once per network: parameters live in their nodes and
//! are updated in place by the optimizer, while inputs and labels are
//! swapped between examples before calling [`Graph::forward`]. Nodes are
//! stored in topological order, so every node's inputs precede it.
//!
//! Frozen parameters never require a gradient. Backward skips every edge
//! whose source does not require one, so a frozen sub-network costs a
//! forward pass only and its weights never accumulate gradient.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

#[derive(Clone, Debug)]
pub enum Op {
    Input,
    Param,
    Constant,
    /// inputs: `[x, kernels, bias]`
    Conv2d,
    MaxPool2 { argmax: Vec<usize> },
    /// inputs: `[x, weights, bias]`
    Dense,
    Relu,
    Flatten,
    Concat { axis: usize },
    SoftmaxXent { label: usize, probs: Tensor },
    /// `lambda * sum(x^2)` over every input node.
    ActivityL2 { lambda: f64 },
    Add,
    /// Mean of one channel of a `(C,H,W)` map.
    ChannelMean { channel: usize },
}

impl Op {
    pub fn tag(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::Constant => "constant",
            Op::Conv2d => "conv2d",
            Op::MaxPool2 { .. } => "maxpool2",
            Op::Dense => "dense",
            Op::Relu => "relu",
            Op::Flatten => "flatten",
            Op::Concat { .. } => "concat",
            Op::SoftmaxXent { .. } => "softmax_xent",
            Op::ActivityL2 { .. } => "activity_l2",
            Op::Add => "add",
            Op::ChannelMean { .. } => "channel_mean",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub id: NodeId,
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub is_param: bool,
    pub is_frozen: bool,
    pub name: String,
    requires_grad: bool,
}

impl Node {
    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<NodeId>,
    /// Length of the prefix of `nodes` whose values are up to date.
    current: usize,
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

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    /// All parameter nodes in creation order.
    pub fn params(&self) -> &[NodeId] {
        &self.params
    }

    /// Parameters that receive gradients, in creation order.
    pub fn trainable_params(&self) -> Vec<NodeId> {
        self.params
            .iter()
            .copied()
            .filter(|&p| !self.nodes[p.0].is_frozen)
            .collect()
    }

    pub fn frozen_params(&self) -> Vec<NodeId> {
        self.params
            .iter()
            .copied()
            .filter(|&p| self.nodes[p.0].is_frozen)
            .collect()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor, name: String) -> NodeId {
        let id = NodeId(self.nodes.len());
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        if self.current == id.0 {
            self.current += 1;
        }
        self.nodes.push(Node {
            id,
            op,
            inputs,
            value,
            grad: None,
            is_param: false,
            is_frozen: false,
            name,
            requires_grad,
        });
        id
    }

    pub fn input(&mut self, shape: &[usize], requires_grad: bool) -> NodeId {
        let id = self.push(Op::Input, vec![], Tensor::zeros(shape), "input".into());
        self.nodes[id.0].requires_grad = requires_grad;
        id
    }

    pub fn param(&mut self, name: impl Into<String>, value: Tensor, frozen: bool) -> NodeId {
        let id = self.push(Op::Param, vec![], value, name.into());
        let node = &mut self.nodes[id.0];
        node.is_param = true;
        node.is_frozen = frozen;
        node.requires_grad = !frozen;
        self.params.push(id);
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, vec![], value, "constant".into())
    }

    fn add_op(&mut self, op: Op, inputs: Vec<NodeId>) -> Result<NodeId> {
        let (refreshed, value) = self.eval(&op, &inputs)?;
        let op = refreshed.unwrap_or(op);
        let name = op.tag().to_string();
        Ok(self.push(op, inputs, value, name))
    }

    pub fn conv2d(&mut self, x: NodeId, kernels: NodeId, bias: NodeId) -> Result<NodeId> {
        self.add_op(Op::Conv2d, vec![x, kernels, bias])
    }

    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId> {
        self.add_op(Op::MaxPool2 { argmax: vec![] }, vec![x])
    }

    pub fn dense(&mut self, x: NodeId, weights: NodeId, bias: NodeId) -> Result<NodeId> {
        self.add_op(Op::Dense, vec![x, weights, bias])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.add_op(Op::Relu, vec![x])
    }

    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        self.add_op(Op::Flatten, vec![x])
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId, axis: usize) -> Result<NodeId> {
        self.add_op(Op::Concat { axis }, vec![a, b])
    }

    pub fn softmax_xent(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let probs = Tensor::zeros(&[0]);
        self.add_op(Op::SoftmaxXent { label, probs }, vec![logits])
    }

    pub fn activity_l2(&mut self, activations: &[NodeId], lambda: f64) -> Result<NodeId> {
        if !(lambda >= 0.0) {
            return Err(Error::Contract(format!("activity L2 lambda must be >= 0, got {lambda}")));
        }
        self.add_op(Op::ActivityL2 { lambda }, activations.to_vec())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.add_op(Op::Add, vec![a, b])
    }

    pub fn channel_mean(&mut self, x: NodeId, channel: usize) -> Result<NodeId> {
        self.add_op(Op::ChannelMean { channel }, vec![x])
    }

    /// Value of a non-leaf node, plus the op with refreshed caches for ops
    /// that keep them (pooling argmax, softmax probabilities).
    fn eval(&self, op: &Op, inputs: &[NodeId]) -> Result<(Option<Op>, Tensor)> {
        let v = |i: usize| &self.nodes[inputs[i].0].value;
        Ok(match *op {
            Op::Input | Op::Param | Op::Constant => {
                return Err(Error::Contract("leaf nodes are not evaluated".into()))
            }
            Op::Conv2d => {
                let out = tensor::conv2d(v(0), v(1), v(2))?;
                (None, out)
            }
            Op::MaxPool2 { .. } => {
                let (out, argmax) = tensor::maxpool2(v(0))?;
                (Some(Op::MaxPool2 { argmax }), out)
            }
            Op::Dense => {
                let out = tensor::dense(v(0), v(1), v(2))?;
                (None, out)
            }
            Op::Relu => (None, tensor::relu(v(0))),
            Op::Flatten => (None, v(0).clone().flatten()),
            Op::Concat { axis } => {
                let out = tensor::concat(v(0), v(1), axis)?;
                (None, out)
            }
            Op::SoftmaxXent { label, .. } => {
                let (loss, probs) = tensor::softmax_xent(v(0), label)?;
                (Some(Op::SoftmaxXent { label, probs }), Tensor::scalar(loss))
            }
            Op::ActivityL2 { lambda } => {
                let acts: Vec<Tensor> = (0..inputs.len()).map(|i| v(i).clone()).collect();
                (None, Tensor::scalar(crate::optim::activity_l2(&acts, lambda)))
            }
            Op::Add => {
                if v(0).shape() != v(1).shape() {
                    return Err(Error::Shape(format!(
                        "add operands differ: {:?} vs {:?}",
                        v(0).shape(),
                        v(1).shape()
                    )));
                }
                let mut out = v(0).clone();
                out.add_scaled(v(1), 1.0);
                (None, out)
            }
            Op::ChannelMean { channel } => {
                let x = v(0);
                let [c, h, w] = x.shape()[..] else {
                    return Err(Error::Shape(format!(
                        "channel_mean expects (C,H,W), got {:?}",
                        x.shape()
                    )));
                };
                if channel >= c {
                    return Err(Error::Shape(format!(
                        "channel {channel} out of range for {c} channels"
                    )));
                }
                let plane = h * w;
                let s: f64 = x.data()[channel * plane..(channel + 1) * plane].iter().sum();
                (None, Tensor::scalar(s / plane as f64))
            }
        })
    }

    pub fn set_input(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Input) {
            return Err(Error::Contract(format!("node {} is not an input", id.0)));
        }
        if node.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "input expects {:?}, got {:?}",
                node.value.shape(),
                value.shape()
            )));
        }
        node.value = value;
        self.current = 0;
        Ok(())
    }

    pub fn set_label(&mut self, id: NodeId, label: usize) -> Result<()> {
        let k = self.nodes[self.nodes[id.0].inputs[0].0].value.numel();
        if label >= k {
            return Err(Error::Contract(format!(
                "label {label} out of range for {k} classes"
            )));
        }
        match &mut self.nodes[id.0].op {
            Op::SoftmaxXent { label: l, .. } => *l = label,
            _ => return Err(Error::Contract(format!("node {} is not a loss", id.0))),
        }
        self.current = 0;
        Ok(())
    }

    /// Mutable access to a parameter's value; marks the graph for re-evaluation.
    pub fn param_mut(&mut self, id: NodeId) -> &mut Tensor {
        debug_assert!(self.nodes[id.0].is_param);
        self.current = 0;
        &mut self.nodes[id.0].value
    }

    /// Mutable access to a parameter's value together with its accumulated gradient.
    pub fn param_and_grad_mut(&mut self, id: NodeId) -> (&mut Tensor, Option<&Tensor>) {
        self.current = 0;
        let node = &mut self.nodes[id.0];
        (&mut node.value, node.grad.as_ref())
    }

    pub fn set_frozen(&mut self, id: NodeId, frozen: bool) {
        let node = &mut self.nodes[id.0];
        assert!(node.is_param, "only parameters can be frozen");
        node.is_frozen = frozen;
        node.requires_grad = !frozen;
        if frozen {
            node.grad = None;
        }
        self.refresh_requires_grad();
    }

    pub fn set_input_requires_grad(&mut self, id: NodeId, requires_grad: bool) {
        assert!(matches!(self.nodes[id.0].op, Op::Input));
        self.nodes[id.0].requires_grad = requires_grad;
        self.refresh_requires_grad();
    }

    fn refresh_requires_grad(&mut self) {
        for i in 0..self.nodes.len() {
            if self.nodes[i].inputs.is_empty() {
                continue;
            }
            let rg = self.nodes[i]
                .inputs
                .iter()
                .any(|p| self.nodes[p.0].requires_grad);
            self.nodes[i].requires_grad = rg;
        }
    }

    /// Re-evaluates every non-leaf node in topological order.
    pub fn forward(&mut self) -> Result<()> {
        match self.nodes.len() {
            0 => Ok(()),
            n => self.forward_to(NodeId(n - 1)),
        }
    }

    /// Brings nodes up to and including `target` up to date, leaving later
    /// nodes untouched.
    pub fn forward_to(&mut self, target: NodeId) -> Result<()> {
        for i in self.current..=target.0 {
            if self.nodes[i].inputs.is_empty() {
                continue;
            }
            let node = &self.nodes[i];
            let (op, value) = self.eval(&node.op, &node.inputs)?;
            let node = &mut self.nodes[i];
            if let Some(op) = op {
                node.op = op;
            }
            node.value = value;
        }
        self.current = self.current.max(target.0 + 1);
        Ok(())
    }

    /// Clears accumulated parameter gradients.
    pub fn zero_grad(&mut self) {
        for &p in &self.params {
            self.nodes[p.0].grad = None;
        }
    }

    /// Reverse-mode pass from a scalar `loss` node. Trainable parameter
    /// gradients accumulate across calls until [`Graph::zero_grad`]; input
    /// nodes that require a gradient have theirs overwritten.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if loss.0 >= self.current {
            return Err(Error::Contract(
                "backward called before forward on updated inputs".into(),
            ));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "loss must be scalar, node {} has shape {:?}",
                loss.0,
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(self.nodes[loss.0].value.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if node.inputs.is_empty() {
                grads[i] = Some(g);
                continue;
            }
            let rg = |k: usize| self.nodes[node.inputs[k].0].requires_grad;
            let val = |k: usize| &self.nodes[node.inputs[k].0].value;
            let mut contribs: Vec<(NodeId, Tensor)> = Vec::with_capacity(node.inputs.len());
            match &node.op {
                Op::Conv2d => {
                    let cg = tensor::conv2d_backward(val(0), val(1), &g, rg(0), rg(1) || rg(2));
                    if let Some(d) = cg.input {
                        contribs.push((node.inputs[0], d));
                    }
                    if rg(1) {
                        contribs.push((node.inputs[1], cg.kernels.expect("kernel grad")));
                    }
                    if rg(2) {
                        contribs.push((node.inputs[2], cg.bias.expect("bias grad")));
                    }
                }
                Op::Dense => {
                    let dg = tensor::dense_backward(val(0), val(1), &g, rg(0), rg(1) || rg(2));
                    if let Some(d) = dg.input {
                        contribs.push((node.inputs[0], d));
                    }
                    if rg(1) {
                        contribs.push((node.inputs[1], dg.weights.expect("weight grad")));
                    }
                    if rg(2) {
                        contribs.push((node.inputs[2], dg.bias.expect("bias grad")));
                    }
                }
                Op::MaxPool2 { argmax } => {
                    contribs.push((
                        node.inputs[0],
                        tensor::maxpool2_backward(val(0).shape(), argmax, &g),
                    ));
                }
                Op::Relu => contribs.push((node.inputs[0], tensor::relu_backward(val(0), &g))),
                Op::Flatten => {
                    contribs.push((node.inputs[0], g.reshape(val(0).shape())?));
                }
                Op::Concat { axis } => {
                    let (ga, gb) = tensor::concat_backward(val(0).shape(), val(1).shape(), *axis, &g);
                    if rg(0) {
                        contribs.push((node.inputs[0], ga));
                    }
                    if rg(1) {
                        contribs.push((node.inputs[1], gb));
                    }
                }
                Op::SoftmaxXent { label, probs } => {
                    let scale = g.data()[0];
                    let mut d = probs.clone();
                    d.data_mut()[*label] -= 1.0;
                    d.data_mut().iter_mut().for_each(|x| *x *= scale);
                    contribs.push((node.inputs[0], d));
                }
                Op::ActivityL2 { lambda } => {
                    let inv = lambda.recip();
                    let up = g.data()[0];
                    for k in 0..node.inputs.len() {
                        if rg(k) {
                            let mut d = val(k).clone();
                            d.data_mut().iter_mut().for_each(|x| *x = 2.0 * *x / inv * up);
                            contribs.push((node.inputs[k], d));
                        }
                    }
                }
                Op::Add => {
                    if rg(0) {
                        contribs.push((node.inputs[0], g.clone()));
                    }
                    if rg(1) {
                        contribs.push((node.inputs[1], g));
                    }
                }
                Op::ChannelMean { channel } => {
                    let x = val(0);
                    let plane = x.shape()[1] * x.shape()[2];
                    let mut d = Tensor::zeros(x.shape());
                    let v = g.data()[0] / plane as f64;
                    d.data_mut()[channel * plane..(channel + 1) * plane]
                        .iter_mut()
                        .for_each(|x| *x = v);
                    contribs.push((node.inputs[0], d));
                }
                Op::Input | Op::Param | Op::Constant => unreachable!("leaf handled above"),
            }
            for (target, d) in contribs {
                if !self.nodes[target.0].requires_grad {
                    continue;
                }
                match &mut grads[target.0] {
                    Some(acc) => acc.add_scaled(&d, 1.0),
                    slot @ None => *slot = Some(d),
                }
            }
        }

        for (i, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let node = &mut self.nodes[i];
            match node.op {
                Op::Param if !node.is_frozen => match &mut node.grad {
                    Some(acc) => acc.add_scaled(&g, 1.0),
                    slot @ None => *slot = Some(g),
                },
                Op::Input => node.grad = Some(g),
                _ => {}
            }
        }
        Ok(())
    }

    /// Trainable parameters that currently hold a gradient.
    pub fn trainable_grads(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.params.iter().filter_map(|&p| {
            let n = &self.nodes[p.0];
            if n.is_frozen {
                None
            } else {
                n.grad.as_ref().map(|g| (p, g))
            }
        })
    }

    /// Smallest distance of any ReLU input from zero, or of any pooling
    /// window's maximum from its runner-up. Finite differences are only
    /// trustworthy when this margin exceeds the perturbation's effect.
    /// Windows whose top two entries are both exactly zero (clamped ReLU
    /// outputs) are skipped: they stay zero while the ReLU margin holds.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match node.op {
                Op::Relu => {
                    let x = &self.nodes[node.inputs[0].0].value;
                    for v in x.data() {
                        margin = margin.min(v.abs());
                    }
                }
                Op::MaxPool2 { .. } => {
                    let x = &self.nodes[node.inputs[0].0].value;
                    let [c, h, w] = x.shape()[..] else { continue };
                    for ci in 0..c {
                        for oy in 0..h.div_ceil(2) {
                            for ox in 0..w.div_ceil(2) {
                                let mut window: Vec<f64> = Vec::with_capacity(4);
                                for iy in 2 * oy..(2 * oy + 2).min(h) {
                                    for ix in 2 * ox..(2 * ox + 2).min(w) {
                                        window.push(x.data()[(ci * h + iy) * w + ix]);
                                    }
                                }
                                if window.len() < 2 {
                                    continue;
                                }
                                window.sort_by(|a, b| b.total_cmp(a));
                                if window[0] == 0.0 && window[1] == 0.0 {
                                    continue;
                                }
                                margin = margin.min(window[0] - window[1]);
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }
}

/// Gradients of `loss` with respect to every trainable parameter, in
/// [`Graph::trainable_params`] order. Leaves the graph's accumulated
/// gradients cleared.
pub fn analytic_gradients(graph: &mut Graph, loss: NodeId) -> Result<Vec<(NodeId, Tensor)>> {
    graph.zero_grad();
    graph.forward()?;
    graph.backward(loss)?;
    let out = graph
        .trainable_params()
        .into_iter()
        .map(|p| {
            let g = graph
                .grad(p)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(graph.value(p).shape()));
            (p, g)
        })
        .collect();
    graph.zero_grad();
    Ok(out)
}

/// Central differences `(f(w+eps) - f(w-eps)) / 2eps` for every trainable scalar.
pub fn numeric_gradients(
    graph: &mut Graph,
    loss: NodeId,
    epsilon: f64,
) -> Result<Vec<(NodeId, Tensor)>> {
    let mut out = Vec::new();
    for p in graph.trainable_params() {
        let n = graph.value(p).numel();
        let mut g = Tensor::zeros(graph.value(p).shape());
        for j in 0..n {
            let orig = graph.value(p).data()[j];
            graph.param_mut(p).data_mut()[j] = orig + epsilon;
            graph.forward()?;
            let plus = graph.value(loss).data()[0];
            graph.param_mut(p).data_mut()[j] = orig - epsilon;
            graph.forward()?;
            let minus = graph.value(loss).data()[0];
            graph.param_mut(p).data_mut()[j] = orig;
            g.data_mut()[j] = (plus - minus) / (2.0 * epsilon);
        }
        out.push((p, g));
    }
    graph.forward()?;
    Ok(out)
}

/// Floor on the relative-error denominator so gradients that are both
/// essentially zero compare by absolute difference.
const REL_ERR_FLOOR: f64 = 1e-6;

pub fn max_relative_error(analytic: &[(NodeId, Tensor)], numeric: &[(NodeId, Tensor)]) -> f64 {
    let mut worst = 0.0f64;
    for ((pa, a), (pn, n)) in analytic.iter().zip(numeric) {
        debug_assert_eq!(pa, pn);
        for (x, y) in a.data().iter().zip(n.data()) {
            let denom = x.abs().max(y.abs()).max(REL_ERR_FLOOR);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    worst
}

/// Worst relative error between backward() and central differences over
/// every trainable scalar. Zero when nothing is trainable.
pub fn grad_check(graph: &mut Graph, loss: NodeId, epsilon: f64) -> Result<f64> {
    if graph.trainable_params().is_empty() {
        return Ok(0.0);
    }
    let analytic = analytic_gradients(graph, loss)?;
    let numeric = numeric_gradients(graph, loss, epsilon)?;
    Ok(max_relative_error(&analytic, &numeric))
}
