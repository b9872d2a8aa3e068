//! Fully integer neural-network training on a dynamic fixed-point format.

pub mod error;
pub mod kernels;
pub mod nn;
pub mod numfmt;
pub mod optim;
pub mod report;
pub mod theory;

pub use error::{Error, Result};
