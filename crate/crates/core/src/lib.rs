//! Latent-prefix steering for a toy autoregressive policy.
//!
//! A VAE learns a latent space over mean-pooled question/answer token
//! embeddings; decoded latents become continuous prefix rows prepended to the
//! prompt. The crate covers the whole desk-scale loop: synthetic verifiable
//! tasks, the transformer policy, VAE training, prefix SFT, latent-scheduled
//! GRPO/RLOO, and evaluation/analysis.

pub mod checkpoint;
pub mod error;
pub mod harness;
pub mod latent_control;
pub mod numerics;
pub mod palette_vae;
pub mod rl;
pub mod seeding;
pub mod sft;
pub mod tasks;
pub mod toy_lm;

pub use error::{Error, Result};
