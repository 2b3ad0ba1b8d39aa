//! The guided classification network: residual/reduction trunk, pooled
//! multi-scale concatenation, atrous pyramid, and a depth-1 linear map whose
//! sigmoid is the activation map and whose pooled sigmoid is the prediction.

mod config;
mod net;

pub use config::{LesionSize, ModelConfig};
pub use net::{BnUpdate, GuidedNet, Mode, NetOutput, Prediction};
