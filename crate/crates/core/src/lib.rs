//! Global consensus Monte Carlo.
//!
//! Each data block gets a local copy `x_j` of the parameter, tied to a
//! global `z` by a kernel of width `λ`. Sampling the extended model is
//! communication-light; the `λ → 0` bias is then removed by regression over
//! an SMC sweep of decreasing `λ`.

pub mod cluster;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod gibbs;
pub mod laplace;
pub mod model;
pub mod oracle;
pub mod quadrature;
pub mod regression;
pub mod rng;
pub mod rwm;
pub mod samples;
pub mod smc;
pub mod test_fn;

pub use error::{Error, Result};
