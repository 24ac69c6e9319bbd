use std::sync::Arc;

use super::ops::{self, Padding};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of one [`ComputeGraph`]. Indices are insertion order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Input,
    Param,
    Conv2d {
        input: NodeId,
        kernels: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: Padding,
    },
    Relu(NodeId),
    MaxPool {
        input: NodeId,
        size: usize,
        stride: usize,
    },
    Gap(NodeId),
    Dense {
        input: NodeId,
        weights: NodeId,
        bias: NodeId,
    },
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    Select {
        input: NodeId,
        index: usize,
    },
    CrossEntropy {
        logits: NodeId,
        label: usize,
    },
}

impl OpKind {
    fn inputs(&self) -> Vec<NodeId> {
        match *self {
            OpKind::Input | OpKind::Param => vec![],
            OpKind::Conv2d {
                input,
                kernels,
                bias,
                ..
            } => {
                let mut v = vec![input, kernels];
                v.extend(bias);
                v
            }
            OpKind::Relu(a)
            | OpKind::Gap(a)
            | OpKind::Scale(a, _)
            | OpKind::Sum(a)
            | OpKind::MaxPool { input: a, .. }
            | OpKind::Select { input: a, .. }
            | OpKind::CrossEntropy { logits: a, .. } => vec![a],
            OpKind::Dense {
                input,
                weights,
                bias,
            } => vec![input, weights, bias],
            OpKind::Add(a, b) => vec![a, b],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: OpKind,
    value: Arc<Tensor>,
    /// Max-pool winner indices.
    argmax: Option<Arc<Vec<usize>>>,
    name: Option<String>,
}

/// Append-only operator tape with cached outputs.
///
/// Node values are reference counted, so cloning a graph or deriving a
/// substituted copy with [`ComputeGraph::substitute`] shares every tensor
/// that does not need recomputation.
#[derive(Debug, Clone, Default)]
pub struct ComputeGraph {
    nodes: Vec<Node>,
    output: Option<NodeId>,
}

impl ComputeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: OpKind) -> Result<NodeId> {
        let (value, argmax) = self.eval(&op)?;
        self.nodes.push(Node {
            op,
            value: Arc::new(value),
            argmax: argmax.map(Arc::new),
            name: None,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn leaf(&mut self, op: OpKind, value: Arc<Tensor>) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            argmax: None,
            name: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.leaf(OpKind::Input, Arc::new(value))
    }

    pub fn param(&mut self, value: Arc<Tensor>) -> NodeId {
        self.leaf(OpKind::Param, value)
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernels: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        self.push(OpKind::Conv2d {
            input,
            kernels,
            bias,
            stride,
            padding,
        })
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        self.push(OpKind::Relu(input))
    }

    pub fn maxpool(&mut self, input: NodeId, size: usize, stride: usize) -> Result<NodeId> {
        self.push(OpKind::MaxPool {
            input,
            size,
            stride,
        })
    }

    pub fn gap(&mut self, input: NodeId) -> Result<NodeId> {
        self.push(OpKind::Gap(input))
    }

    pub fn dense(&mut self, input: NodeId, weights: NodeId, bias: NodeId) -> Result<NodeId> {
        self.push(OpKind::Dense {
            input,
            weights,
            bias,
        })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(OpKind::Add(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.push(OpKind::Scale(a, factor))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(OpKind::Sum(a))
    }

    pub fn select(&mut self, input: NodeId, index: usize) -> Result<NodeId> {
        self.push(OpKind::Select { input, index })
    }

    pub fn cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        self.push(OpKind::CrossEntropy { logits, label })
    }

    /// Names a node, making it capturable and substitutable by name.
    pub fn mark(&mut self, id: NodeId, name: impl Into<String>) {
        self.nodes[id.0].name = Some(name.into());
    }

    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.nodes
            .iter()
            .position(|n| n.name.as_deref() == Some(name))
            .map(NodeId)
    }

    pub fn is_capturable(&self, id: NodeId) -> bool {
        self.nodes.get(id.0).is_some_and(|n| n.name.is_some())
    }

    pub fn set_output(&mut self, id: NodeId) {
        self.output = Some(id);
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shared_value(&self, id: NodeId) -> Arc<Tensor> {
        Arc::clone(&self.nodes[id.0].value)
    }

    pub fn op(&self, id: NodeId) -> &OpKind {
        &self.nodes[id.0].op
    }

    /// All node handles in insertion order.
    pub fn ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.nodes.len()).map(NodeId)
    }

    /// Flat input index of each window's winner, for max-pool nodes.
    pub fn pool_winners(&self, id: NodeId) -> Option<&[usize]> {
        self.nodes[id.0].argmax.as_deref().map(|v| v.as_slice())
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::shape(
                "graph",
                format!("node {} does not exist ({} nodes)", id.0, self.nodes.len()),
            ));
        }
        Ok(())
    }

    fn eval(&self, op: &OpKind) -> Result<(Tensor, Option<Vec<usize>>)> {
        for i in op.inputs() {
            self.check(i)?;
        }
        let v = |id: NodeId| &*self.nodes[id.0].value;
        let out = match *op {
            OpKind::Input | OpKind::Param => unreachable!("leaves are not evaluated"),
            OpKind::Conv2d {
                input,
                kernels,
                bias,
                stride,
                padding,
            } => {
                let y = ops::conv2d(v(input), v(kernels), stride, padding)?;
                match bias {
                    Some(b) => ops::add_channel_bias(&y, v(b))?,
                    None => y,
                }
            }
            OpKind::Relu(a) => ops::relu(v(a)),
            OpKind::MaxPool {
                input,
                size,
                stride,
            } => {
                let (y, arg) = ops::maxpool2d(v(input), size, stride)?;
                return Ok((y, Some(arg)));
            }
            OpKind::Gap(a) => ops::gap(v(a))?,
            OpKind::Dense {
                input,
                weights,
                bias,
            } => ops::dense(v(input), v(weights), v(bias))?,
            OpKind::Add(a, b) => v(a).add(v(b))?,
            OpKind::Scale(a, f) => v(a).scale(f),
            OpKind::Sum(a) => Tensor::scalar(v(a).sum()),
            OpKind::Select { input, index } => {
                let x = v(input);
                let value = *x.data().get(index).ok_or_else(|| {
                    Error::shape("select", format!("index {index} of {:?}", x.shape()))
                })?;
                Tensor::scalar(value)
            }
            OpKind::CrossEntropy { logits, label } => {
                Tensor::scalar(ops::cross_entropy_loss(v(logits), label)?)
            }
        };
        Ok((out, None))
    }

    /// Gradient of the single-element `scalar` node w.r.t. the output of
    /// `wrt`. Nodes that do not lie on a path to `scalar` get a zero tensor.
    pub fn backward(&self, scalar: NodeId, wrt: NodeId) -> Result<Tensor> {
        Ok(self
            .backward_many(scalar, &[wrt])?
            .pop()
            .expect("one target requested"))
    }

    /// Like [`backward`](Self::backward) for several targets at once; only
    /// nodes between a target and `scalar` are visited.
    pub fn backward_many(&self, scalar: NodeId, targets: &[NodeId]) -> Result<Vec<Tensor>> {
        self.check(scalar)?;
        for &t in targets {
            self.check(t)?;
        }
        let seed = &self.nodes[scalar.0].value;
        if seed.len() != 1 {
            return Err(Error::NotScalar { len: seed.len() });
        }
        let n = scalar.0 + 1;
        let inputs: Vec<Vec<NodeId>> = self.nodes[..n].iter().map(|node| node.op.inputs()).collect();

        let mut below = vec![false; n];
        for &t in targets {
            if t.0 < n {
                below[t.0] = true;
            }
        }
        for i in 0..n {
            if !below[i] && inputs[i].iter().any(|p| below[p.0]) {
                below[i] = true;
            }
        }
        let mut above = vec![false; n];
        above[scalar.0] = true;
        for i in (0..n).rev() {
            if above[i] {
                for p in &inputs[i] {
                    above[p.0] = true;
                }
            }
        }
        let live: Vec<bool> = below.iter().zip(&above).map(|(&b, &a)| a && b).collect();

        let mut is_target = vec![false; n];
        for &t in targets {
            if t.0 < n {
                is_target[t.0] = true;
            }
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        let mut kept: Vec<Option<Tensor>> = vec![None; n];
        grads[scalar.0] = Some(Tensor::full(seed.shape(), 1.0));

        for i in (0..n).rev() {
            if !live[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (p, pg) in self.vjp(NodeId(i), &g, &live)? {
                accumulate(&mut grads[p.0], pg)?;
            }
            if is_target[i] {
                kept[i] = Some(g);
            }
        }

        Ok(targets
            .iter()
            .map(|&t| {
                kept.get(t.0)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[t.0].value.shape()))
            })
            .collect())
    }

    /// Vector-Jacobian product of one node, restricted to live parents.
    fn vjp(&self, id: NodeId, g: &Tensor, live: &[bool]) -> Result<Vec<(NodeId, Tensor)>> {
        let node = &self.nodes[id.0];
        let v = |id: NodeId| &*self.nodes[id.0].value;
        let want = |id: NodeId| live[id.0];
        let mut out = Vec::new();
        match node.op {
            OpKind::Input | OpKind::Param => {}
            OpKind::Conv2d {
                input,
                kernels,
                bias,
                stride,
                padding,
            } => {
                let (di, dk) = ops::conv2d_backward(
                    v(input),
                    v(kernels),
                    stride,
                    padding,
                    g,
                    want(input),
                    want(kernels),
                )?;
                out.extend(di.map(|t| (input, t)));
                out.extend(dk.map(|t| (kernels, t)));
                if let Some(b) = bias.filter(|&b| want(b)) {
                    out.push((b, ops::channel_bias_backward(g)));
                }
            }
            OpKind::Relu(a) => out.push((a, ops::relu_backward(v(a), g)?)),
            OpKind::MaxPool { input, .. } => {
                let arg = node.argmax.as_ref().expect("max-pool caches winners");
                out.push((input, ops::maxpool2d_backward(v(input).shape(), arg, g)?));
            }
            OpKind::Gap(a) => out.push((a, ops::gap_backward(v(a).shape(), g)?)),
            OpKind::Dense {
                input,
                weights,
                bias,
            } => {
                let (di, dw) =
                    ops::dense_backward(v(input), v(weights), g, want(input), want(weights))?;
                out.extend(di.map(|t| (input, t)));
                out.extend(dw.map(|t| (weights, t)));
                if want(bias) {
                    out.push((bias, g.clone()));
                }
            }
            OpKind::Add(a, b) => {
                out.push((a, g.clone()));
                out.push((b, g.clone()));
            }
            OpKind::Scale(a, f) => out.push((a, g.scale(f))),
            OpKind::Sum(a) => out.push((a, Tensor::full(v(a).shape(), g.data()[0]))),
            OpKind::Select { input, index } => {
                let mut t = Tensor::zeros(v(input).shape());
                t.data_mut()[index] = g.data()[0];
                out.push((input, t));
            }
            OpKind::CrossEntropy { logits, label } => {
                out.push((logits, ops::cross_entropy_backward(v(logits), label).scale(g.data()[0])))
            }
        }
        Ok(out.into_iter().filter(|(p, _)| want(*p)).collect())
    }

    /// A copy of this graph in which `node` produced `substituted`: every
    /// downstream node is recomputed, everything else is shared. The node
    /// itself becomes an input, so gradients stop there.
    pub fn substitute(&self, node: NodeId, substituted: Tensor) -> Result<ComputeGraph> {
        self.check(node)?;
        let current = self.nodes[node.0].value.shape();
        if substituted.shape() != current {
            return Err(Error::shape(
                "forward_from",
                format!(
                    "substituted tensor {:?} does not match node output {current:?}",
                    substituted.shape()
                ),
            ));
        }
        let mut next = ComputeGraph {
            nodes: self.nodes[..=node.0].to_vec(),
            output: self.output,
        };
        let subst = &mut next.nodes[node.0];
        subst.op = OpKind::Input;
        subst.value = Arc::new(substituted);
        subst.argmax = None;

        let mut dirty = vec![false; self.nodes.len()];
        dirty[node.0] = true;
        for (i, original) in self.nodes.iter().enumerate().skip(node.0 + 1) {
            if original.op.inputs().iter().any(|p| dirty[p.0]) {
                dirty[i] = true;
                let (value, argmax) = next.eval(&original.op)?;
                next.nodes.push(Node {
                    op: original.op.clone(),
                    value: Arc::new(value),
                    argmax: argmax.map(Arc::new),
                    name: original.name.clone(),
                });
            } else {
                next.nodes.push(original.clone());
            }
        }
        Ok(next)
    }

    /// Output of the graph as if `node` had produced `substituted`.
    pub fn forward_from(&self, node: NodeId, substituted: Tensor) -> Result<Tensor> {
        let out = self
            .output
            .ok_or_else(|| Error::shape("forward_from", "graph has no designated output"))?;
        let g = self.substitute(node, substituted)?;
        Ok(g.value(out).clone())
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    match slot {
        Some(acc) => acc.axpy(1.0, &g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}
