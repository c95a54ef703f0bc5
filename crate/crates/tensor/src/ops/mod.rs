pub mod conv;
pub mod elementwise;
pub mod gram;
pub mod linalg;
pub mod loss;
pub mod norm;

use crate::error::Result;
use crate::tape::{GradSink, Op, Tape};
use crate::tensor::Tensor;

/// Dispatches the vector-Jacobian product of one recorded operation.
pub(crate) fn backward(
    tape: &Tape,
    op: &Op,
    out: &Tensor,
    g: &Tensor,
    sink: &mut GradSink,
) -> Result<()> {
    match op {
        Op::Leaf => Ok(()),
        Op::MatMul { .. } | Op::Transpose { .. } | Op::Solve { .. } => {
            linalg::backward(tape, op, out, g, sink)
        }
        Op::Conv2d { .. } | Op::AvgPool2 { .. } | Op::GlobalAvgPool { .. } => {
            conv::backward(tape, op, out, g, sink)
        }
        Op::BatchNorm(_)
        | Op::ChannelAffine { .. }
        | Op::L2NormalizeRows { .. }
        | Op::SymNormalize { .. }
        | Op::SoftmaxRows { .. } => norm::backward(tape, op, out, g, sink),
        Op::SoftmaxCrossEntropy { .. } | Op::BinaryCrossEntropy { .. } | Op::NllProb { .. } => {
            loss::backward(tape, op, out, g, sink)
        }
        Op::Gram { .. } | Op::SqDist { .. } => gram::backward(tape, op, out, g, sink),
        _ => elementwise::backward(tape, op, out, g, sink),
    }
}
