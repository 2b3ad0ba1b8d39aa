//! Regionally guided convolutional classifier for fundus photographs.
//!
//! The crate bundles a small reverse-mode autodiff engine, the anatomical
//! region partition derived from the optic disc and fovea, the guided
//! network, its objectives and metrics, a synthetic fundus generator and
//! the training/evaluation loop.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod geometry;
pub mod model;
pub mod objectives;
pub mod par;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
