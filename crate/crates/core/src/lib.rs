//! Single-image textual inversion for a small latent diffusion model.

pub mod codec;
pub mod conditioning;
pub mod config;
pub mod corpus;
pub mod denoiser;
pub mod diffusion;
pub mod digest;
pub mod error;
pub mod eval;
pub mod inversion;
pub mod persist;
pub mod pipeline;
pub mod pretrain;
pub mod rng;
pub mod synthesis;

pub use error::{Error, Result};
