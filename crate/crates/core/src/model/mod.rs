pub mod checkpoint;
pub mod classifier;
pub mod depthwise;
pub mod efficientnet;
mod fused;
pub mod params;
mod simd;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader, LoadedCheckpoint};
pub use classifier::{se_gate, se_gates, BackboneInit, HeadInit, ModelConfig, SePlacement, TajweedNet};
