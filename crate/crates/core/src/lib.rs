//! Sampling-aware quantization of diffusion ODE samplers, at desk scale.
//!
//! A tiny noise-prediction MLP is trained on analytic Gaussian-mixture data,
//! sampled with exponential-integrator ODE solvers, quantized with
//! mixed-order trajectory alignment (post-training rounding reconstruction
//! and low-rank adapter fine-tuning), and used to check the error
//! accumulation theory of quantized high-order samplers numerically.

pub mod archive;
pub mod diffusion;
pub mod error;
pub mod errorlab;
pub mod harness;
pub mod metrics;
pub mod net;
pub mod quant;
pub mod rng;
pub mod saquant;
pub mod samplers;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
