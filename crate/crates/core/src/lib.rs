//! Multimodal trajectory forecasting: scene tokenization, attention-based
//! fusion encoders, a Gaussian-mixture decoder, training, aggregation and metrics.

pub mod aggregate;
pub mod attention;
pub mod config;
pub mod decoder;
pub mod error;
pub mod fusion;
pub mod jsonl;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod pipeline;
pub mod scene;
pub mod synthdata;

pub use error::{Error, Result};
