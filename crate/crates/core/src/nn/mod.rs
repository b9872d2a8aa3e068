//! Layers, tape-based backward, the float reference arm and checkpoints.

pub mod checkpoint;
pub mod float;
pub mod gradcheck;
pub mod int;
pub mod loss;
pub mod spec;
pub mod train;

pub use float::FTensor;
pub use int::{BnRunning, Gradients, Tape, TapeNode};
pub use loss::{quantize_grad, softmax_cross_entropy, LossOutput};
pub use spec::{cnn_preset, mlp_preset, Init, LayerSpec, ModelConfig, ParamSpec};
pub use train::{FloatModel, IntModel, SgdConfig, StepStats};
