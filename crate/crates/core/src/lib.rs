//! Conditional variational autoencoders with a calibrated (optimal-sigma) Gaussian decoder
//! and an optional normalizing-flow conditional prior `p(z | y)`.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod distributions;
pub mod error;
pub mod flow;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod params;
pub mod training;

pub use candle_core::DType;
pub use error::{Error, Result};
