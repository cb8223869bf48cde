//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation in execution order; [`Graph::backward`]
//! walks the tape in reverse. Attention, layer normalization, log-softmax and
//! CTC are single primitives with hand-written adjoints.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod params;
mod tensor;

pub use gradcheck::{
    analytic_grads, compare_gradients, grad_check, grad_check_params, rel_error, GradCheckReport, InputCheck,
    REL_ERROR_FLOOR,
};
pub use graph::{CtcStats, CtcTarget, Graph, Var};
pub use kernels::{ctc_min_frames, Segment};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
