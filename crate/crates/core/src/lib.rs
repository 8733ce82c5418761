//! Variable-rate learned image codec: one frozen Swin-style hyperprior
//! backbone plus small per-rate prompt networks that steer its window
//! attention toward a target rate-distortion trade-off.

pub mod attention;
pub mod backbone;
pub mod codec;
pub mod config;
pub mod entropy;
pub mod error;
pub mod io;
pub mod lpm;
pub mod metrics;
pub mod params;
pub mod report;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
