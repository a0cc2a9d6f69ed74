//! Variational smoothing for latent state-space models.
//!
//! The approximate posterior is a Gaussian whose precision is block
//! tri-diagonal in time, so factorization, sampling, entropy and marginal
//! covariances all cost `O(T)`. Posteriors are produced by small networks from
//! the observations and trained with reparameterized stochastic gradients of
//! the evidence lower bound.

pub mod btd;
pub mod cli;
pub mod dense;
pub mod error;
pub mod io;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod posterior;
pub mod train;

pub use error::{Error, Result};
