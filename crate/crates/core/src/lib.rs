//! Masked student-teacher pretraining with image-text alignment for 3D light
//! sheet microscopy volumes, with segmentation, classification and
//! deblurring adapters and an evaluation harness.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod finetune;
pub mod harness;
pub mod metrics;
pub mod nets;
pub mod pretrain;
pub mod synth;
pub mod text;
pub mod volume_io;

pub use error::{Error, Result};
pub use lsmfm_tensor as tensor;
