//! Small dense-tensor arithmetic in `f64` with reverse-mode gradients.
//!
//! Forward ops in [`ops`] are pure. The [`Tape`] records the same ops for
//! differentiation; parameters live in a [`ParamStore`] and are updated by
//! [`adamw_step`] following an [`LrSchedule`].

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use checkpoint::{Checkpoint, CheckpointError, META_PREFIX};
pub use error::{Result, TensorError};
pub use nn::{LayerNorm, Linear, Mlp, MultiHeadAttention};
pub use optim::{adamw_step, AdamWConfig, LrSchedule};
pub use params::{GradBuffer, Param, ParamId, ParamStore, Trainable};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
