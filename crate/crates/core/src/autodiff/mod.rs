//! Dense tensors, reverse-mode differentiation and momentum SGD.

mod gradcheck;
mod graph;
mod optim;
mod params;
mod scalar;
mod tensor;

pub use gradcheck::{gradient_check, relative_error, GradCheck};
pub use graph::{conv_out_dim, Gradients, Graph, LrnParams, NodeId, ParamId};
pub use optim::{sgd_step, OptimizerState};
pub use params::{ParamGroup, ParamInfo, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub(crate) use graph::softplus;
