//! Differentiable dense-tensor substrate: tensors, a reverse-mode tape,
//! transformer building blocks, finite-difference checking and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod mask;
pub mod params;
pub mod tape;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{gradient_check, gradient_check_report, GradCheckReport, GradEntry};
pub use layers::{AttentionOutput, Encoder, EncoderLayer, LayerNorm, LayerTrace, Linear, MultiHeadAttention};
pub use mask::Mask;
pub use params::{Init, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
