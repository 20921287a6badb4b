//! Non-stationary Transformer forecasting.
//!
//! Series stationarization wraps an encoder-decoder Transformer whose
//! attention is rescaled by learned de-stationary factors. The crate also
//! carries its own reverse-mode autograd, an exact attention-recovery oracle,
//! ADF stationarity analytics and a training engine.

pub mod attention;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod stationarization;
pub mod tensor;
pub mod training;

pub use error::{NstError, Result};
pub use tensor::{Graph, ParameterSet, Tensor, Var};
