//! Masked diffusion as a projection of a latent Gaussian process, and masked
//! consistency distillation built on top of it.
//!
//! The crate is organised bottom-up:
//!
//! - [`schedule`]: discrete signal schedules and the latent SNR calibration
//!   that makes the Gaussian projection reproduce them exactly.
//! - [`duality`]: latent states, the projection operator and Monte Carlo
//!   verification of the static duality and scalar trajectory locking.
//! - [`masking`]: the production masking path driven by one uniform per token.
//! - [`model`]: a tiny bidirectional transformer denoiser with hand-written
//!   backpropagation, its losses and the checkpoint format.
//! - [`trainer`]: teacher pretraining and staged consistency distillation.
//! - [`sampler`]: ancestral reverse sampling at any number of steps.
//! - [`eval`]: a synthetic Markov text source, oracle perplexity and reports.
//! - [`config`] and [`pipeline`]: the run configuration and the subcommand
//!   drivers used by the `mcd` binary.

pub mod config;
pub mod duality;
pub mod error;
pub mod eval;
pub mod masking;
pub mod model;
pub mod normal;
pub mod pipeline;
pub mod quadrature;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
