//! Visual transformation telling: data model, dataset construction,
//! synthetic benchmarks, the TTNet model, training, metrics and diagnostics.

pub mod autograd;
pub mod data;
pub mod dataset;
pub mod diagnostics;
pub mod decoder;
pub mod encoder;
pub mod encoding;
pub mod error;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod synth;
pub mod tokenize;
pub mod train;

pub use error::{Result, VttError};
