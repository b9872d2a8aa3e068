//! Front end for paired float/integer training runs, verification suites,
//! bit-width ablations and loss-landscape probes.

pub mod config;
pub mod criteria;
pub mod data;
pub mod error;
pub mod landscape;
pub mod train;
pub mod verify;

pub use config::RunConfig;
pub use error::{CliError, Result};
