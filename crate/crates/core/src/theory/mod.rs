//! Empirical checks of the format's statistical guarantees and the SGD
//! convergence behaviour on quadratic testbeds.

pub mod bias;
pub mod landscape;
pub mod quadratic;
pub mod uniform;
pub mod variance;

pub use bias::{rounding_bias_suite, worked_example, BiasReport, BiasRow, WorkedExample};
pub use landscape::{landscape_probe, LandscapeGrid};
pub use quadratic::{theorem1_experiment, ConvexProblemSpec, GapRow, NoiseConstants, QuadraticProblem};
pub use uniform::{uniform_dequantize, uniform_quant_baseline, uniform_quantize_with_scale};
pub use variance::{gradient_variance_probe, NoiseStats};
