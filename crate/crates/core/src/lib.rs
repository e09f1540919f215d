//! Trajectory-level generative embeddings (TGE) for offline imitation from
//! observations.
//!
//! The pipeline trains a temporal diffusion model on reward-free behavioral
//! trajectories, embeds fixed-length segments with the model's encoder, labels
//! every behavioral state with a k-nearest-neighbor log-kernel reward against
//! the segments of a single state-only expert episode, and hands the labeled
//! data to an offline RL learner.
//!
//! Modules, bottom up:
//! - [`trajdata`]: toy environments, datasets, mixing, windows, normalization
//! - [`nncore`]: reverse-mode tape, layers, AdamW, EMA, checkpoints
//! - [`diffusion`]: noise schedule, temporal U-Net, denoising objective
//! - [`embedding`]: unit-sphere segment embeddings with origin bookkeeping
//! - [`reward`]: exact top-m search, kernels, annotation, entropy estimators
//! - [`offline_rl`]: expectile (IQL-style) and reward-weighted BC-regularized
//!   (ReBRAC-style) backbones, evaluation
//! - [`harness`]: end-to-end runs, caching, sweeps and exports

pub mod diffusion;
pub mod embedding;
pub mod error;
pub mod fsutil;
pub mod harness;
pub mod nncore;
pub mod offline_rl;
pub mod reward;
pub mod trajdata;

pub use error::{Error, Result};
