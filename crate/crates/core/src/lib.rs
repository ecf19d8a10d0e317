//! Discrete Wasserstein-2 geometry on pixel graphs and the diffusion
//! Tikhonov regularizer built on it, together with an input-dependent
//! Gaussian noise model, FGSM-family adversarial attacks, a deterministic
//! classifier-training harness and robustness evaluators.
//!
//! The geometry lives on a weighted grid graph over pixels: an image `x`
//! induces the edge-weighted Laplacian `L(x)` whose pseudo-inverse is the
//! metric tensor. Gradient penalties, the noise model and the perturbation
//! budget all route through `L(x)`.

pub mod attacks;
pub mod calculus;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod noise;
pub mod regularizer;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{ImageMassVector, IncidenceOperator, LaplacianState, WeightRule, WeightedPixelGraph};
