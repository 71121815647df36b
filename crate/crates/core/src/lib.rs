//! Text-conditioned diffusion with low-rank cross-attention adapters,
//! synthetic data augmentation and downstream classifier evaluation.

pub mod attention;
pub mod augment;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod lora;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod prompt;
pub mod rng;
pub mod tensor;
pub mod text;
pub mod unet;

pub use error::{Error, Result};
pub use tensor::Tensor;
