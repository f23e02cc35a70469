//! Selective fine-tuning of a miniature CLIP-style dual encoder.
//!
//! Only text feed-forward projection biases and image-encoder LayerNorm
//! parameters are trained, optionally regularized toward the frozen
//! pretrained class weights. The crate also carries the baseline freeze
//! strategies, a synthetic multimodal benchmark, and forensics over how
//! fine-tuning moves individual layers.

pub mod analyze;
pub mod autodiff;
pub mod bench;
pub mod cli;
pub mod error;
pub mod exec;
pub mod model;
pub mod params;
pub mod report;
pub mod synthdata;
pub mod train;

pub use error::{Error, Result};
