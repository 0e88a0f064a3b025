//! Hand-rolled neural network layers and the four affect architectures.
//!
//! Everything is `f64` with exact analytic gradients; convolutions run as
//! im2col + GEMM so the desk-scale networks train quickly on a CPU. The
//! layer zoo is deliberately small: strided same-padding convolution,
//! ceil-mode 2x2 max pooling, dense, ReLU and inverted dropout are all the
//! paper's models need.

mod layers;
mod model;

pub use layers::{Conv2d, Dense, Dropout, MaxPool2};
pub use model::{
    BatchInput, ConvSpec, ForwardCache, ForwardOutput, Gradients, Mode, Model, ModelError,
    ModelKind, ModelSpec, STANDARD_CONVS,
};
pub use model::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, CheckpointMeta};
pub use model::softmax_rows;

pub use crate::windowing::Task;

/// Alias used in specs and configs; classification or regression.
pub type TaskKind = Task;
