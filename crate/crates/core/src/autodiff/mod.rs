//! Minimal reverse-mode differentiation over the fixed set of operations
//! the models need, an Adam optimiser, and a central-difference gradient
//! checker.

mod array;
mod gradcheck;
mod graph;
mod optim;
mod params;

pub use array::Array;
pub use gradcheck::{finite_difference_check, relative_error, GradCheckReport};
pub use graph::{
    graph_regularizer_value, BatchNormMode, ConvLayout, FilterDims, Graph, Var, PROB_CLAMP,
};
pub(crate) use graph::sigmoid;
pub use optim::{adam_step, AdamConfig, AdamState};
pub use params::{Gradients, Params};

use crate::error::{Error, Result};

/// The differentiable primitives recorded by [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    SparseConv3d,
    Exp,
    Negate,
    Scale,
    ScaleBy,
    MatMul,
    Add,
    AddBias,
    Sigmoid,
    Tanh,
    LeakyRelu,
    Mul,
    Concat,
    BatchNorm,
    Dropout,
    Softplus,
    L1Norm,
    L2Norm,
    GraphRegularizer,
    SliceRows,
    Sum,
    BinaryCrossEntropy,
}

impl OpKind {
    pub const ALL: [OpKind; 22] = [
        OpKind::SparseConv3d,
        OpKind::Exp,
        OpKind::Negate,
        OpKind::Scale,
        OpKind::ScaleBy,
        OpKind::MatMul,
        OpKind::Add,
        OpKind::AddBias,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::LeakyRelu,
        OpKind::Mul,
        OpKind::Concat,
        OpKind::BatchNorm,
        OpKind::Dropout,
        OpKind::Softplus,
        OpKind::L1Norm,
        OpKind::L2Norm,
        OpKind::GraphRegularizer,
        OpKind::SliceRows,
        OpKind::Sum,
        OpKind::BinaryCrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::SparseConv3d => "sparse_conv3d",
            OpKind::Exp => "exp",
            OpKind::Negate => "negate",
            OpKind::Scale => "scale",
            OpKind::ScaleBy => "scale_by",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::AddBias => "add_bias",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::LeakyRelu => "leaky_relu",
            OpKind::Mul => "mul",
            OpKind::Concat => "concat",
            OpKind::BatchNorm => "batch_norm",
            OpKind::Dropout => "dropout",
            OpKind::Softplus => "softplus",
            OpKind::L1Norm => "l1_norm",
            OpKind::L2Norm => "l2_norm",
            OpKind::GraphRegularizer => "graph_regularizer",
            OpKind::SliceRows => "slice_rows",
            OpKind::Sum => "sum",
            OpKind::BinaryCrossEntropy => "binary_cross_entropy",
        }
    }
}

/// Names of every registered primitive.
pub fn supported_ops() -> Vec<&'static str> {
    OpKind::ALL.iter().map(|k| k.name()).collect()
}

pub fn lookup_op(name: &str) -> Result<OpKind> {
    OpKind::ALL
        .iter()
        .copied()
        .find(|k| k.name() == name)
        .ok_or_else(|| Error::UnknownOp(name.to_string()))
}
