//! Temporal DDPM: noise schedule, forward corruption, the denoising objective
//! and the U-Net split into a segment encoder and a noise decoder.

mod model;
mod schedule;
mod unet;

pub use model::{
    denoise_loss, evaluate_denoise_loss, normalizer_tag, train_diffusion, zero_predictor_loss,
    DiffusionConfig, DiffusionModel, ModelSidecar, NoiseDraw, TrainedDiffusion,
};
pub use schedule::{build_schedule, NoiseSchedule, ScheduleKind};
pub use unet::{Encoded, TemporalUNet, UNetConfig};
