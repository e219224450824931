//! Dense tensors, a reverse-mode tape, recurrent blocks, losses and AdamW.

pub mod adamw;
pub mod gradcheck;
pub mod loss;
pub mod lstm;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adamw::{AdamW, AdamWConfig};
pub use lstm::{LstmParams, LstmVars};
pub use params::{GradStore, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Global-norm clipping threshold used by both training loops.
pub const GRAD_CLIP_NORM: f64 = 5.0;
