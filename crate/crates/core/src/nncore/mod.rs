//! Minimal differentiable-computation substrate: a reverse-mode tape over
//! `ndarray` tensors, the layers the temporal U-Net and the RL networks need,
//! AdamW, parameter EMA and the checkpoint format.

pub mod checkpoint;
mod float;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
mod params;

pub use float::Float;
pub use graph::{Activation, Gradients, Graph, Var};
pub use layers::{Conv1d, GroupNorm, LayerNorm, LayerSpec, Linear, Mlp, TimeEmbedding};
pub use optim::{ema_update, soft_update, AdamW, AdamWConfig};
pub use params::{Bound, Param, ParamSet};

/// Global gradient-norm clip applied by every training loop.
pub const GRAD_CLIP_NORM: f64 = 10.0;
