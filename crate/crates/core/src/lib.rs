//! Multi-fidelity Bayesian parameter estimation with training-free
//! score-based diffusion.
//!
//! The pipeline:
//! 1. simulate a prior dataset `{(theta_n, y_n)}` with a cheap solver on a coarse grid,
//! 2. generate labeled triples `(y, z, theta)` by solving the probability-flow ODE
//!    with a Monte-Carlo score estimate (no score network is trained),
//! 3. fit a conditional generator `G_low(y, z)` by mean-squared error,
//! 4. for a fixed observation, refine: KDE of `G_low` samples, a dense
//!    high-fidelity design over their range, importance-corrected score, and an
//!    unconditional generator `G_high(z)`.

pub mod config;
pub mod diagnostics;
pub mod diffusion;
pub mod error;
pub mod io;
pub mod matrix;
pub mod mcmc;
pub mod pipeline;
pub mod problems;
pub mod refinement;
pub mod rng;
pub mod surrogate;

pub use error::{Error, Result};
pub use matrix::Matrix;
