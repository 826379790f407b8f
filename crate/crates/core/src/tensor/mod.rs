//! Dense tensors with reverse-mode automatic differentiation.

mod gradcheck;
mod graph;
mod lstm;
mod params;
mod value;

pub use gradcheck::{grad_check, grad_check_steps, GradCheckReport, ParamCheck};
pub use graph::{Fault, Graph, Var};
pub use params::{glorot_uniform, Gradients, Param, ParamId, ParamStore};
pub use value::Tensor;
