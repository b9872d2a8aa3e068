//! Integer-only SGD on 16-bit master weights.

pub mod master;
pub mod sgd;

pub use master::{MasterTensor, MASTER_BITS, MASTER_MAX};
pub use sgd::{quantize_master, FloatSgd, LrSchedule, OptState, ParamState};
