//! Append-only Wengert tape.
//!
//! Every operation evaluates eagerly, records its inputs plus whatever it
//! needs for the vector-Jacobian product, and returns a [`Var`] handle.
//! [`Tape::backward`] sweeps the nodes in reverse insertion order, which is
//! a valid reverse topological order because inputs always precede outputs.

use crate::error::{Result, TensorError};
use crate::ops;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

pub(crate) enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Transpose { a: Var },
    Solve { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    Square { a: Var },
    Exp { a: Var },
    Activation { a: Var, kind: Activation },
    Reshape { a: Var },
    AddRowBias { x: Var, bias: Var },
    ConcatRows { a: Var, b: Var },
    SliceRows { a: Var, start: usize },
    Sum { a: Var },
    Mean { a: Var },
    Conv2d { x: Var, w: Var, cols: Vec<f64> },
    AvgPool2 { x: Var },
    GlobalAvgPool { x: Var },
    BatchNorm(Box<ops::norm::BatchNormSaved>),
    ChannelAffine { x: Var, scale: Var, shift: Var },
    L2NormalizeRows { a: Var, norms: Vec<f64> },
    SymNormalize { w: Var, degrees: Vec<f64> },
    SoftmaxRows { a: Var },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    BinaryCrossEntropy { p: Var, targets: Vec<f64> },
    NllProb { p: Var, labels: Vec<usize> },
    Gram { m: Var },
    SqDist { a: Var, b: Var },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b }
            | Op::Solve { a, b }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b }
            | Op::ConcatRows { a, b }
            | Op::SqDist { a, b } => vec![*a, *b],
            Op::Transpose { a }
            | Op::Scale { a, .. }
            | Op::Square { a }
            | Op::Exp { a }
            | Op::Activation { a, .. }
            | Op::Reshape { a }
            | Op::SliceRows { a, .. }
            | Op::Sum { a }
            | Op::Mean { a }
            | Op::L2NormalizeRows { a, .. }
            | Op::SoftmaxRows { a } => vec![*a],
            Op::AddRowBias { x, bias } => vec![*x, *bias],
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::AvgPool2 { x } | Op::GlobalAvgPool { x } => vec![*x],
            Op::BatchNorm(saved) => vec![saved.x, saved.source],
            Op::ChannelAffine { x, scale, shift } => vec![*x, *scale, *shift],
            Op::SymNormalize { w, .. } => vec![*w],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
            Op::BinaryCrossEntropy { p, .. } | Op::NllProb { p, .. } => vec![*p],
            Op::Gram { m } => vec![*m],
        }
    }

    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Solve { .. } => "solve",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Square { .. } => "square",
            Op::Exp { .. } => "exp",
            Op::Activation { .. } => "activation",
            Op::Reshape { .. } => "reshape",
            Op::AddRowBias { .. } => "add_row_bias",
            Op::ConcatRows { .. } => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool2 { .. } => "avg_pool2",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::BatchNorm(_) => "batch_norm",
            Op::ChannelAffine { .. } => "channel_affine",
            Op::L2NormalizeRows { .. } => "l2_normalize_rows",
            Op::SymNormalize { .. } => "sym_normalize",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::BinaryCrossEntropy { .. } => "binary_cross_entropy",
            Op::NllProb { .. } => "nll_prob",
            Op::Gram { .. } => "gram_matrix",
            Op::SqDist { .. } => "sq_dist",
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    requires_grad: bool,
    is_param: bool,
}

#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every parameter on the tape.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `var`; `None` when `var` is not a parameter.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a parameter, panicking on non-parameters.
    pub fn wrt(&self, var: Var) -> &Tensor {
        self.get(var)
            .unwrap_or_else(|| panic!("no gradient recorded for var {}", var.0))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a trainable leaf; it always receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// Copies `var`'s value into a fresh constant, cutting gradient flow.
    pub fn detach(&mut self, var: Var) -> Var {
        let value = self.value(var).clone();
        self.constant(value)
    }

    fn push_leaf(&mut self, value: Tensor, is_param: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: is_param,
            is_param,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub(crate) fn check(&self, var: Var) -> Result<()> {
        if var.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(TensorError::UnknownVar { id: var.0 })
        }
    }

    /// Appends an operation node after verifying its output is finite.
    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            is_param: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar root seeded with gradient 1.
    ///
    /// Every parameter on the tape gets an entry; parameters the root does
    /// not depend on get zeros.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        self.check(root)?;
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: root_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(Tensor::from_parts(root_value.shape().to_vec(), vec![1.0]));
        }
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let mut sink = GradSink {
                nodes: &self.nodes,
                grads: &mut grads,
            };
            ops::backward(self, &node.op, &node.value, &g, &mut sink)?;
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.is_param {
                if grads[idx].is_none() {
                    grads[idx] = Some(Tensor::zeros_like(&node.value));
                }
            } else {
                grads[idx] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

/// Accumulates vector-Jacobian products into the per-node gradient slots.
pub(crate) struct GradSink<'a> {
    nodes: &'a [Node],
    grads: &'a mut Vec<Option<Tensor>>,
}

impl GradSink<'_> {
    pub(crate) fn wants(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Adds `data` (laid out like `var`'s value) into `var`'s gradient.
    pub(crate) fn add(&mut self, var: Var, data: Vec<f64>) {
        if !self.wants(var) {
            return;
        }
        let slot = &mut self.grads[var.0];
        match slot {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(&data) {
                    *e += d;
                }
            }
            None => {
                let shape = self.nodes[var.0].value.shape().to_vec();
                *slot = Some(Tensor::from_parts(shape, data));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(&[2, 3], vec![1., -2., 3., 0.5, 7., -1.]).unwrap());
        let s = tape.sum(x).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(x).data(), &[1.0; 6]);
        assert_eq!(grads.wrt(x).shape(), &[2, 3]);
    }

    #[test]
    fn mean_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1., 2., 3., 4.]).unwrap());
        let sq = tape.square(x).unwrap();
        let m = tape.mean(sq).unwrap();
        let grads = tape.backward(m).unwrap();
        assert_eq!(grads.wrt(x).data(), &[0.5, 1.0, 1.5, 2.0]);
    }

    #[test]
    fn disconnected_parameter_gets_zeros() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1., 2.]).unwrap());
        let y = tape.param(Tensor::vector(vec![3., 4., 5.]).unwrap());
        let s = tape.sum(x).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(y).data(), &[0.0; 3]);
        assert_eq!(grads.wrt(x).data(), &[1.0; 2]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1., 2.]).unwrap());
        let y = tape.scale(x, 2.0).unwrap();
        assert!(matches!(tape.backward(y), Err(TensorError::NotScalar { .. })));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::vector(vec![1., 2.]).unwrap());
        let x = tape.param(Tensor::vector(vec![3., 4.]).unwrap());
        let p = tape.mul(c, x).unwrap();
        let s = tape.sum(p).unwrap();
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.wrt(x).data(), &[1., 2.]);
    }

    #[test]
    fn reused_node_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let grads = tape.backward(z).unwrap();
        assert_eq!(grads.wrt(x).data(), &[7.0]);
    }
}
