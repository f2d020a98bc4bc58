//! Knowledge distillation from a multi-modal segmentation teacher to a
//! mono-modal student.
//!
//! The crate is organised along the pipeline:
//!
//! - [`data`]: ingestion, preprocessing, region targets, folds, synthetic data
//! - [`network`]: the 3D encoder-decoder used for both teacher and student
//! - [`losses`]: distillation, bottleneck-KL and ground-truth terms
//! - [`training`]: two-stage training, optimizer, plateau schedule, cross-validation
//! - [`evaluation`]: per-region Dice, ablation runner and reports

pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod network;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
