//! Dataset-level context aggregation for semantic segmentation.
//!
//! A per-class distribution memory is maintained by moving averages of
//! ground-truth masked feature statistics; category representations sampled
//! from it are mixed per pixel with predicted class probabilities,
//! recalibrated by attention, and fused with the pixel features before
//! classification. Inference can refine the mixing weights over several
//! stages, and historical video frames can contribute their own dataset-level
//! context.

pub mod ablation;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod context;
pub mod data;
pub mod dca;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod iis;
pub mod memory_bank;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod segmentor;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
