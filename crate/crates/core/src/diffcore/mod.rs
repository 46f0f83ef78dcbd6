//! Dense `f32` tensors with define-by-run reverse-mode differentiation.

mod backward;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod params;
mod tensor;

pub use backward::Gradients;
pub use gradcheck::{grad_check, GradCheckError, GradCheckOptions, GradCheckReport};
pub use graph::{BnMode, Graph, Var, BCE_CLAMP, COSINE_EPS, NORM_FLOOR};
pub use params::{
    kaiming_normal, standard_normal, trunc_normal, ParamEntry, ParamGroup, ParamId, ParamKind, ParamStore,
};
pub use tensor::{Tensor, TensorError};
