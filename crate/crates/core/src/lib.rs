//! Tajweed rule classification from recitation audio: corpus ingest, the
//! log-mel front end, an EfficientNet-B0 classifier with a squeeze-excitation
//! gate on the pooled features, training and evaluation.

pub mod audio;
pub mod config;
pub mod dsp;
pub mod error;
pub mod evaluator;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod rules;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
