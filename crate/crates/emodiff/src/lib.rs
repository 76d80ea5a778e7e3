//! Audio-conditioned emotional 3D facial animation over 51-coefficient
//! blendshape sequences: region-split transformer VAEs, a conditional latent
//! diffusion model with an emotion adapter, evaluation metrics, and a
//! deterministic synthetic dataset generator.

pub mod adapter;
pub mod ckpt;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod seqcore;
pub mod tape;
pub mod vae;

pub use error::{Error, Result};
