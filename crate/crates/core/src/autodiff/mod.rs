//! Dense reverse-mode differentiation with the sparse segment primitives
//! needed for neighborhood aggregation.
//!
//! Values live on a [`Tape`]; a [`Var`] is a copyable handle into it.
//! Trainable state is kept outside the tape in a [`ParamSet`] and bound as
//! leaves for each forward pass, so one tape corresponds to one step.

pub mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::{Optimizer, OptimizerKind};
pub use params::{Bound, ParamId, ParamSet};
pub use tape::{
    concat_cols, sigmoid_bce, softmax_cross_entropy, validate_segments, BinaryOp, Gradients,
    SegmentKind, Tape, UnaryOp, Var, LEAKY_RELU_SLOPE,
};
pub use tensor::{Tensor, TensorError};
