//! A desk-scale diffusion backbone that fuses selective state-space scanning
//! over pixel space with scanning in the Haar wavelet domain, trained by flow
//! matching and sampled with fixed-step or adaptive ODE integrators.
//!
//! Everything numerical is built here from scratch on a small reverse-mode
//! autodiff tensor engine; no ML framework is involved.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod flow;
pub mod frechet;
pub mod fusion;
pub mod model;
pub mod ode;
pub mod optim;
pub mod oracle;
pub mod rng;
pub mod scalar;
pub mod scan;
pub mod selfcheck;
pub mod ssm;
pub mod tensor;
pub mod wavelet;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
