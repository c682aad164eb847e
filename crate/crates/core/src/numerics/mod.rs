//! Differentiable dense-math kernel: tensors, forward primitives, a
//! define-by-run tape with reverse-mode gradients, deterministic RNG, and the
//! finite-difference oracle used by the test suite.

mod rng;
mod tape;
mod tensor;

pub use rng::{stream, Rng};
pub use tape::{
    finite_diff, grads_close, GradEntry, Gradients, NodeId, ParamId, ParamView, ParamsMut, Tape,
};
pub use tensor::Tensor2;
