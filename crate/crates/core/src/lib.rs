//! Sparse variational multi-output Gaussian processes with neural likelihoods.

pub mod datacli;
pub mod diffmath;
pub mod error;
pub mod gauss;
pub mod kernels;
pub mod likelihoods;
pub mod models;
pub mod quadmoments;
pub mod svgp;
pub mod traineval;

pub use error::{Error, Result};
