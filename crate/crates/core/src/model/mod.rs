//! Miniature CLIP-style dual encoder and zero-shot classification.

pub mod checkpoint;
mod classifier;
mod config;
mod encoder;
mod layout;
pub mod vocab;

pub use classifier::{build_class_weights, classify, logits, predict, ClassWeights, Provenance};
pub use config::{ImageConfig, ModelConfig, TextConfig};
pub use encoder::{Bindings, DualEncoder, INFERENCE_CHUNK, MAX_LOGIT_SCALE};
pub use layout::{layout, Init, ParamSpec, INIT_LOGIT_SCALE, INIT_STD};
