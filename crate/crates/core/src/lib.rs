//! Soft-label watermarking for classifiers: embed watermarks as learned
//! perturbations of the output probability distribution, verify them with a
//! jointly-trained binary detector, and evaluate robustness against
//! fine-tuning, pruning, and knowledge-distillation removal attacks.

pub mod attacks;
pub mod checkpoint;
pub mod config;
pub mod datasets;
pub mod detector;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod modelzoo;
pub mod nn;
pub mod pipelines;
pub mod signal;

pub use error::{Error, Result};
pub use signal::{OutputBatch, SourceTag, WatermarkSignal};
