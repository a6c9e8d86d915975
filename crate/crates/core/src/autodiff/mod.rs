//! Reverse-mode automatic differentiation over dense `f64` tensors, plus the
//! optimizer used to train every model in the crate.

mod adam;
mod gemm;
mod graph;
mod params;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use graph::{Gradients, Graph, NodeId};
pub use params::{ParamId, ParamStore, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use tensor::Tensor;
