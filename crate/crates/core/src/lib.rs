//! Gaussian particles with latent dynamics.
//!
//! Standard 3D Gaussian kernels carry a latent state: a per-particle local
//! feature from a multi-resolution hash grid plus one global feature shared
//! by the whole particle system. The global feature evolves through a learned
//! ODE, a multi-head decoder turns the evolved state into per-particle affine
//! deformations, and a differentiable splatting renderer closes the loop with
//! multi-view video so motion can be extrapolated past the training window.

pub mod autodiff;
pub mod decoder;
pub mod error;
pub mod evaluate;
pub mod gaussian;
pub mod latent;
pub mod metrics;
pub mod nn;
pub mod ode;
pub mod render;
pub mod scene;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
