//! Dense-tensor reverse-mode automatic differentiation.
//!
//! Every loss and body-model operation in this crate is built from the
//! primitives in [`Primitive`] and differentiated by a reverse sweep over a
//! [`Tape`]. Tensors are immutable `f64` arrays; a tape records an
//! operation only when one of its inputs is already on that tape.

mod gradcheck;
pub(crate) mod kernels;
mod primitive;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, GradCheckStatus};
pub use kernels::MIN_QUAT_NORM;
pub use primitive::{Primitive, PrimitiveKind};
pub use tape::{Gradients, Tape};
pub use tensor::{NodeId, Tensor};
