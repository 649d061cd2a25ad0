//! Score distillation laboratory.
//!
//! Toy diffusion priors (a trainable conditional denoiser and an exact
//! Gaussian-mixture oracle), the four score-distillation gradient fields
//! (SDS, CSD, VSD, ASD), optimizable scenes (particles and conditional
//! generators), run harnesses for prompt-specific and prompt-amortized
//! optimization, and the measurement tools used to compare them.

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod distill;
pub mod error;
pub mod harness;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod par;
pub mod report;
pub mod rng;
pub mod scene;
pub mod schedule;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Mat;
