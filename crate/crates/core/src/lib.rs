//! Resource-efficient visual anomaly detection on tiny convolutional backbones.

pub mod backbone;
pub mod data;
pub mod error;
pub mod methods;
pub mod metrics;
pub mod nn;
pub mod resources;
pub mod tensor_io;

pub use error::{Error, Result};
