use std::sync::Arc;

use crate::error::{Error, Result};

/// The closed set of differentiable operations the tape understands.
///
/// Binary elementwise ops accept a right operand whose shape equals the
/// trailing extents of the left operand (a per-row bias); nothing else
/// broadcasts. `MatMul` multiplies the two trailing axes and allows either
/// side to be a single shared matrix against a batch.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    MatMul,
    /// Softmax along the last axis.
    Softmax,
    Relu,
    Abs,
    /// `max(x, c)`; gradient 0 at the boundary.
    MaxConst(f64),
    /// Minimum over each index set of the last axis. Ties route the
    /// gradient to the lowest index.
    MinOverSets(Arc<Vec<Vec<usize>>>),
    Sum(Vec<usize>),
    Mean(Vec<usize>),
    Gather { axis: usize, indices: Arc<Vec<usize>> },
    Concat { axis: usize },
    /// `x ⊙ mask`, where the mask is already scaled by 1/keep.
    Dropout,
    /// Batched product of `[.., 4, 4]` homogeneous transforms.
    TransformCompose,
    /// Normalizes `[.., 4]` quaternions to unit length.
    QuatNormalize,
    Reshape(Vec<usize>),
    /// Swaps the last two axes.
    Transpose,
    /// `scale * x + shift`.
    ScaleShift { scale: f64, shift: f64 },
}

/// Attribute-free identity of a primitive, used where primitives are
/// selected by name (for instance on the command line).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PrimitiveKind {
    Add,
    Sub,
    Mul,
    MatMul,
    Softmax,
    Relu,
    Abs,
    MaxConst,
    MinOverSets,
    Sum,
    Mean,
    Gather,
    Concat,
    Dropout,
    TransformCompose,
    QuatNormalize,
    Reshape,
    Transpose,
    ScaleShift,
}

impl PrimitiveKind {
    pub const ALL: [PrimitiveKind; 19] = [
        PrimitiveKind::Add,
        PrimitiveKind::Sub,
        PrimitiveKind::Mul,
        PrimitiveKind::MatMul,
        PrimitiveKind::Softmax,
        PrimitiveKind::Relu,
        PrimitiveKind::Abs,
        PrimitiveKind::MaxConst,
        PrimitiveKind::MinOverSets,
        PrimitiveKind::Sum,
        PrimitiveKind::Mean,
        PrimitiveKind::Gather,
        PrimitiveKind::Concat,
        PrimitiveKind::Dropout,
        PrimitiveKind::TransformCompose,
        PrimitiveKind::QuatNormalize,
        PrimitiveKind::Reshape,
        PrimitiveKind::Transpose,
        PrimitiveKind::ScaleShift,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PrimitiveKind::Add => "add",
            PrimitiveKind::Sub => "subtract",
            PrimitiveKind::Mul => "multiply",
            PrimitiveKind::MatMul => "matmul",
            PrimitiveKind::Softmax => "softmax",
            PrimitiveKind::Relu => "relu",
            PrimitiveKind::Abs => "abs",
            PrimitiveKind::MaxConst => "max-const",
            PrimitiveKind::MinOverSets => "min-over-sets",
            PrimitiveKind::Sum => "sum",
            PrimitiveKind::Mean => "mean",
            PrimitiveKind::Gather => "gather",
            PrimitiveKind::Concat => "concat",
            PrimitiveKind::Dropout => "dropout",
            PrimitiveKind::TransformCompose => "transform-compose",
            PrimitiveKind::QuatNormalize => "quat-normalize",
            PrimitiveKind::Reshape => "reshape",
            PrimitiveKind::Transpose => "transpose",
            PrimitiveKind::ScaleShift => "scale-shift",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown primitive '{name}'")))
    }
}

impl Primitive {
    pub fn kind(&self) -> PrimitiveKind {
        match self {
            Primitive::Add => PrimitiveKind::Add,
            Primitive::Sub => PrimitiveKind::Sub,
            Primitive::Mul => PrimitiveKind::Mul,
            Primitive::MatMul => PrimitiveKind::MatMul,
            Primitive::Softmax => PrimitiveKind::Softmax,
            Primitive::Relu => PrimitiveKind::Relu,
            Primitive::Abs => PrimitiveKind::Abs,
            Primitive::MaxConst(_) => PrimitiveKind::MaxConst,
            Primitive::MinOverSets(_) => PrimitiveKind::MinOverSets,
            Primitive::Sum(_) => PrimitiveKind::Sum,
            Primitive::Mean(_) => PrimitiveKind::Mean,
            Primitive::Gather { .. } => PrimitiveKind::Gather,
            Primitive::Concat { .. } => PrimitiveKind::Concat,
            Primitive::Dropout => PrimitiveKind::Dropout,
            Primitive::TransformCompose => PrimitiveKind::TransformCompose,
            Primitive::QuatNormalize => PrimitiveKind::QuatNormalize,
            Primitive::Reshape(_) => PrimitiveKind::Reshape,
            Primitive::Transpose => PrimitiveKind::Transpose,
            Primitive::ScaleShift { .. } => PrimitiveKind::ScaleShift,
        }
    }

    pub fn name(&self) -> &'static str {
        self.kind().name()
    }

    /// Number of inputs, `None` for variadic primitives.
    pub(crate) fn arity(&self) -> Option<usize> {
        match self {
            Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::MatMul
            | Primitive::Dropout
            | Primitive::TransformCompose => Some(2),
            Primitive::Concat { .. } => None,
            _ => Some(1),
        }
    }
}
