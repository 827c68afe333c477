//! Illumination-degraded image restoration built from three cooperating parts:
//! a Retinex decomposition that splits an image into reflectance and
//! illumination, compact latent diffusion models that synthesize guidance
//! vectors for both components, and a transformer restorer whose attention and
//! feed-forward paths are modulated by those vectors.
//!
//! The crate is self-contained: it ships its own reverse-mode autodiff tape
//! (f64, ndarray-backed), both training phases, checkpointing, a synthetic
//! data generator, and PSNR/SSIM evaluation.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod priors;
pub mod retinex;
pub mod rgformer;
pub mod rldm;
pub mod rng;
pub mod tensor;
pub mod training;

pub use config::{ModelConfig, TrainConfig};
pub use error::Error;
pub use retinex::{decompose, recompose, Image, RetinexPair};
pub use rldm::NoiseSchedule;
pub use tensor::{Data, ParamSet, Tape, Var};

pub type Result<T> = std::result::Result<T, Error>;
