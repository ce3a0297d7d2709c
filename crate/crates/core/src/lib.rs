//! Keyword-guided multi-modal report generation on a small reverse-mode
//! autodiff engine.

pub mod abstractor;
pub mod adaptor;
pub mod alignment;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod metrics;
pub mod model;
pub mod packing;
pub mod params;
pub mod tensor;
pub mod train;

pub use config::{Components, ModelConfig, TrainConfig};
pub use error::{DreamError, Result};
pub use model::Dream;
pub use tensor::{Precision, Tensor};
