//! Data files, synthetic scenes, training, checkpoints and attention export.

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod features;
pub mod grounding;
pub mod heatmap;
pub mod inference;
pub mod manifest;
pub mod synth;
pub mod train;
