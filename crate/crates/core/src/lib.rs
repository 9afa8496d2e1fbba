//! Cross-image reasoning model (CIRM) for multi-image sarcasm detection,
//! built on a small dense-tensor autodiff engine.

pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod train;

pub use error::{Error, Result};
pub use numerics::{ParamStore, Rng, Tensor};
