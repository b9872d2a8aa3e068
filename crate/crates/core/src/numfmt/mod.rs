//! The dynamic fixed-point number format.

pub mod float;
pub mod golden;
pub mod map;
pub mod rounding;
pub mod scalar;
pub mod serialize;
pub mod tensor;

pub use float::{shared_exponent, unpack, UnpackedFloat};
pub use map::{inverse_map, inverse_map_wide, map_to_fixed, renormalize, renormalize_wide};
pub use rounding::{nearest_round, stochastic_round, OpStream, RoundingContext, RoundingMode};
pub use scalar::FixedScalar;
pub use tensor::{check_bits, max_mantissa, FxpTensor, MAX_BITS, MIN_BITS};
