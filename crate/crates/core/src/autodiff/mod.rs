//! Reverse-mode differentiation over dense `f64` tensors, restricted to
//! the layer set the guided network uses.

pub mod conv;
pub mod gemm;
pub mod gradcheck;
pub mod graph;
pub mod norm;
pub mod params;
pub mod pool;

pub use conv::ConvSpec;
pub use gradcheck::{GradCheckReport, GradientCheck};
pub use graph::{sigmoid, BatchStats, Gradients, Graph, Var};
pub use params::{ParamEntry, ParamId, ParamKind, ParamStore};
pub use pool::PoolKind;
