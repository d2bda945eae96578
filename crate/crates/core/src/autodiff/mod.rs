//! Dense-tensor reverse-mode differentiation.
//!
//! Operations are recorded on a [`Tape`] as they run; [`Tape::backward`]
//! then sweeps the tape once in reverse. The op set is deliberately small:
//! elementwise arithmetic, matmul, a few nonlinearities, reductions, row
//! normalization, row concatenation and softmax cross-entropy.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, OpFamily};
pub use tape::{Gradients, NodeId, OpKind, Tape};
pub use tensor::Tensor;
