use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::schedule::{NoiseSchedule, ScheduleKind};
use super::unet::{TemporalUNet, UNetConfig};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::nncore::{checkpoint, ema_update, AdamW, AdamWConfig, Graph, ParamSet, GRAD_CLIP_NORM};
use crate::trajdata::{segment_at, window_starts, DatasetKind, TrajectoryDataset};

/// Diffusion training hyperparameters. Defaults mirror the reference
/// configuration (H=32, K=20, d_z=64, multipliers 1/2/4/8, lr 2e-4, batch 32,
/// EMA 0.995).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub horizon: usize,
    pub diffusion_steps: usize,
    pub d_z: usize,
    pub dim_mults: Vec<usize>,
    /// Channel width of the first U-Net level.
    pub base_dim: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub ema_decay: f64,
    pub train_steps: usize,
    pub seed: u64,
    pub schedule: ScheduleKind,
    /// Loss-curve sampling interval in steps.
    pub log_every: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            horizon: 32,
            diffusion_steps: 20,
            d_z: 64,
            dim_mults: vec![1, 2, 4, 8],
            base_dim: 32,
            learning_rate: 2e-4,
            batch_size: 32,
            ema_decay: 0.995,
            train_steps: 20_000,
            seed: 0,
            schedule: ScheduleKind::Linear,
            log_every: 100,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.diffusion_steps == 0 || self.d_z == 0 {
            return Err(Error::config(
                "diffusion horizon, steps and d_z must be at least 1",
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("diffusion batch_size must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::config("ema_decay must lie in [0, 1]"));
        }
        if self.learning_rate <= 0.0 || self.learning_rate.is_nan() {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.dim_mults.is_empty() || self.dim_mults.contains(&0) {
            return Err(Error::config("dim_mults must be non-empty and positive"));
        }
        Ok(())
    }
}

/// Per-sample diffusion steps and Gaussian noise for one batch.
#[derive(Clone, Debug)]
pub struct NoiseDraw {
    pub steps: Vec<usize>,
    pub eps: Array3<f32>,
}

impl NoiseDraw {
    /// `k ~ U{1..K}` and `eps ~ N(0, I)` for a `[B, H, D]` batch.
    pub fn sample<R: Rng + ?Sized>(
        schedule: &NoiseSchedule,
        shape: (usize, usize, usize),
        rng: &mut R,
    ) -> Self {
        let steps = (0..shape.0)
            .map(|_| rng.random_range(1..=schedule.steps()))
            .collect();
        let eps = Array3::from_shape_simple_fn(shape, || rng.sample(StandardNormal));
        NoiseDraw { steps, eps }
    }

    /// Corrupted batch `tau_k`, one step per sample.
    pub fn apply(&self, schedule: &NoiseSchedule, tau0: &Array3<f32>) -> Result<Array3<f32>> {
        let mut out = Array3::zeros(tau0.raw_dim());
        for (b, &k) in self.steps.iter().enumerate() {
            let x = tau0.index_axis(Axis(0), b).to_owned();
            let e = self.eps.index_axis(Axis(0), b).to_owned();
            out.index_axis_mut(Axis(0), b)
                .assign(&schedule.forward_noise(&x, k, &e)?);
        }
        Ok(out)
    }
}

/// `mean_b ||eps_b - eps_hat_b||^2` for any noise predictor.
pub fn denoise_loss<F>(
    schedule: &NoiseSchedule,
    tau0: &Array3<f32>,
    draw: &NoiseDraw,
    mut predict: F,
) -> Result<f64>
where
    F: FnMut(&Array3<f32>, &[usize]) -> Result<Array3<f32>>,
{
    let xk = draw.apply(schedule, tau0)?;
    let pred = predict(&xk, &draw.steps)?;
    if pred.shape() != draw.eps.shape() {
        return Err(Error::Shape {
            layer: "denoise_loss".into(),
            expected: format!("{:?}", draw.eps.shape()),
            got: format!("{:?}", pred.shape()),
        });
    }
    let b = tau0.shape()[0].max(1);
    let sse: f64 = pred
        .iter()
        .zip(draw.eps.iter())
        .map(|(&p, &e)| {
            let d = p as f64 - e as f64;
            d * d
        })
        .sum();
    Ok(sse / b as f64)
}

/// Trained denoiser (EMA weights) with the metadata needed to encode safely.
#[derive(Clone, Debug)]
pub struct DiffusionModel {
    pub config: DiffusionConfig,
    pub unet: TemporalUNet,
    pub params: ParamSet<f32>,
    pub schedule: NoiseSchedule,
    pub state_dim: usize,
    pub action_dim: usize,
    /// Hash of the observation normalizer of the training data (`"raw"` if none).
    pub normalizer_hash: String,
    pub step: u64,
    hash: String,
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    config: DiffusionConfig,
    state_dim: usize,
    action_dim: usize,
    normalizer_hash: String,
}

/// JSON sidecar written next to a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSidecar {
    pub config: DiffusionConfig,
    pub normalizer_hash: String,
    pub model_hash: String,
    pub state_dim: usize,
    pub action_dim: usize,
}

/// Result of [`train_diffusion`].
#[derive(Clone, Debug)]
pub struct TrainedDiffusion {
    pub model: DiffusionModel,
    /// `(step, mean training loss since the previous entry)`.
    pub loss_curve: Vec<(usize, f64)>,
    /// Last raw (non-EMA) parameters, kept for diagnostics.
    pub raw_params: ParamSet<f32>,
}

pub fn normalizer_tag(ds: &TrajectoryDataset) -> String {
    ds.obs_normalizer
        .as_ref()
        .map_or_else(|| "raw".to_string(), |n| n.hash())
}

impl DiffusionModel {
    fn new_untrained(
        cfg: &DiffusionConfig,
        state_dim: usize,
        action_dim: usize,
        normalizer_hash: String,
    ) -> Result<(Self, ChaCha8Rng)> {
        cfg.validate()?;
        let schedule = NoiseSchedule::new(cfg.diffusion_steps, cfg.schedule)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamSet::new();
        let unet = TemporalUNet::new(
            &mut params,
            UNetConfig {
                horizon: cfg.horizon,
                transition_dim: state_dim + action_dim,
                base_dim: cfg.base_dim,
                dim_mults: cfg.dim_mults.clone(),
                d_z: cfg.d_z,
            },
            &mut rng,
        )?;
        let mut m = DiffusionModel {
            config: cfg.clone(),
            unet,
            params,
            schedule,
            state_dim,
            action_dim,
            normalizer_hash,
            step: 0,
            hash: String::new(),
        };
        m.hash = fsutil::short_hash(&m.checkpoint_bytes()?);
        Ok((m, rng))
    }

    pub fn transition_dim(&self) -> usize {
        self.state_dim + self.action_dim
    }

    /// Content hash of the checkpoint bytes.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let header = ModelHeader {
            config: self.config.clone(),
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            normalizer_hash: self.normalizer_hash.clone(),
        };
        checkpoint::encode(
            serde_json::to_value(header)?,
            self.unet.specs(),
            self.step,
            &self.params,
        )
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".meta.json");
        PathBuf::from(s)
    }

    /// Writes the checkpoint and its JSON sidecar; returns the model hash.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.checkpoint_bytes()?;
        fsutil::atomic_write(path, &bytes)?;
        let side = ModelSidecar {
            config: self.config.clone(),
            normalizer_hash: self.normalizer_hash.clone(),
            model_hash: self.hash.clone(),
            state_dim: self.state_dim,
            action_dim: self.action_dim,
        };
        fsutil::atomic_write(
            &Self::sidecar_path(path),
            &serde_json::to_vec_pretty(&side)?,
        )?;
        Ok(self.hash.clone())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let (manifest, params) = checkpoint::decode(&mut &bytes[..])?;
        let header: ModelHeader = serde_json::from_value(manifest.model)
            .map_err(|e| Error::format(format!("diffusion checkpoint header: {e}")))?;
        let (mut m, _) = Self::new_untrained(
            &header.config,
            header.state_dim,
            header.action_dim,
            header.normalizer_hash,
        )?;
        checkpoint::restore_into(&mut m.params, &params)?;
        m.step = manifest.step;
        m.hash = fsutil::short_hash(&bytes);
        let side_path = Self::sidecar_path(path);
        if side_path.exists() {
            let side: ModelSidecar = serde_json::from_slice(&std::fs::read(&side_path)?)?;
            if side.model_hash != m.hash {
                return Err(Error::ModelMismatch {
                    expected: side.model_hash,
                    got: m.hash,
                });
            }
        }
        Ok(m)
    }

    /// Refuses data normalized with different statistics than the training data.
    pub fn check_normalizer(&self, ds: &TrajectoryDataset) -> Result<()> {
        let tag = normalizer_tag(ds);
        if tag != self.normalizer_hash {
            return Err(Error::NormalizerMismatch {
                expected: self.normalizer_hash.clone(),
                got: tag,
            });
        }
        Ok(())
    }

    /// `z = phi(segment, k)` for one `[H, d_s + d_a]` segment.
    pub fn encode(&self, segment: &Array2<f32>, k: usize) -> Result<Array1<f32>> {
        let b = segment.clone().insert_axis(Axis(0));
        Ok(self.encode_batch(&b, k)?.index_axis(Axis(0), 0).to_owned())
    }

    /// Latents `[B, d_z]` for a `[B, H, d_s + d_a]` batch at step `k`.
    pub fn encode_batch(&self, batch: &Array3<f32>, k: usize) -> Result<Array2<f32>> {
        if k > self.schedule.steps() {
            return Err(Error::OutOfRange(format!(
                "encode step {k} outside 0..={}",
                self.schedule.steps()
            )));
        }
        let steps = vec![k as f64; batch.shape()[0]];
        self.unet.embed(&self.params, batch, &steps)
    }

    /// Noise prediction with the EMA weights.
    pub fn predict_noise(&self, x: &Array3<f32>, steps: &[usize]) -> Result<Array3<f32>> {
        let s: Vec<f64> = steps.iter().map(|&k| k as f64).collect();
        self.unet.predict(&self.params, x, &s)
    }
}

/// All stride-1 training windows `(trajectory, start)` of a dataset.
fn training_windows(ds: &TrajectoryDataset, horizon: usize) -> Vec<(usize, usize)> {
    ds.trajectories
        .iter()
        .enumerate()
        .flat_map(|(i, t)| {
            window_starts(t.len(), horizon, 1)
                .into_iter()
                .map(move |s| (i, s))
        })
        .collect()
}

fn gather(
    ds: &TrajectoryDataset,
    windows: &[(usize, usize)],
    idx: &[usize],
    horizon: usize,
) -> Array3<f32> {
    let d = ds.state_dim + ds.action_dim;
    let mut out = Array3::zeros((idx.len(), horizon, d));
    for (b, &w) in idx.iter().enumerate() {
        let (ti, start) = windows[w];
        let seg = segment_at(&ds.trajectories[ti], ti, start, horizon, ds.action_dim);
        out.index_axis_mut(Axis(0), b).assign(&seg.joint());
    }
    out
}

/// Trains the denoiser on state-action windows of a behavioral dataset and
/// returns the EMA weights.
pub fn train_diffusion(ds: &TrajectoryDataset, cfg: &DiffusionConfig) -> Result<TrainedDiffusion> {
    if ds.kind != DatasetKind::Behavioral {
        return Err(Error::config("diffusion trains on the behavioral dataset"));
    }
    if !ds.has_actions() {
        return Err(Error::MissingActions);
    }
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (mut model, _) =
        DiffusionModel::new_untrained(cfg, ds.state_dim, ds.action_dim, normalizer_tag(ds))?;
    let mut params = model.params.clone();
    let mut ema = model.params.clone();
    let mut opt = AdamW::new(&params, AdamWConfig::new(cfg.learning_rate, 0.0));
    let windows = training_windows(ds, cfg.horizon);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let d = model.transition_dim();
    let log_every = cfg.log_every.max(1);
    let mut curve = Vec::new();
    let (mut acc, mut acc_n) = (0.0f64, 0usize);

    for step in 1..=cfg.train_steps {
        let idx: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.random_range(0..windows.len()))
            .collect();
        let tau0 = gather(ds, &windows, &idx, cfg.horizon);
        let draw = NoiseDraw::sample(&model.schedule, (cfg.batch_size, cfg.horizon, d), &mut rng);
        let xk = draw.apply(&model.schedule, &tau0)?;

        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let x = g.constant(xk.into_dyn());
        let steps: Vec<f64> = draw.steps.iter().map(|&k| k as f64).collect();
        let pred = model.unet.forward(&mut g, &p, x, &steps)?;
        let target = g.constant(draw.eps.into_dyn());
        let diff = g.sub(pred, target);
        let sq = g.square(diff);
        let total = g.sum(sq);
        let loss = g.scale(total, 1.0 / cfg.batch_size as f32);
        let lv = g.scalar(loss) as f64;
        let grads = g.backward(loss)?;
        params.accumulate(&grads, &p);
        params.clip_grad_norm(GRAD_CLIP_NORM);
        opt.step(&mut params)?;
        ema_update(&mut ema, &params, cfg.ema_decay);

        acc += lv;
        acc_n += 1;
        if step % log_every == 0 || step == cfg.train_steps {
            curve.push((step, acc / acc_n as f64));
            log::debug!("diffusion step {step}: loss {:.4}", acc / acc_n as f64);
            acc = 0.0;
            acc_n = 0;
        }
    }
    model.params = ema;
    model.step = cfg.train_steps as u64;
    model.hash = fsutil::short_hash(&model.checkpoint_bytes()?);
    Ok(TrainedDiffusion {
        model,
        loss_curve: curve,
        raw_params: params,
    })
}

/// Mean denoising loss of `model` on `n_batches` random batches (fixed seed).
pub fn evaluate_denoise_loss(
    model: &DiffusionModel,
    ds: &TrajectoryDataset,
    n_batches: usize,
    batch_size: usize,
    seed: u64,
) -> Result<f64> {
    let windows = training_windows(ds, model.config.horizon);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..n_batches {
        let idx: Vec<usize> = (0..batch_size)
            .map(|_| rng.random_range(0..windows.len()))
            .collect();
        let tau0 = gather(ds, &windows, &idx, model.config.horizon);
        let draw = NoiseDraw::sample(
            &model.schedule,
            (batch_size, model.config.horizon, model.transition_dim()),
            &mut rng,
        );
        total += denoise_loss(&model.schedule, &tau0, &draw, |x, k| {
            model.predict_noise(x, k)
        })?;
    }
    Ok(total / n_batches.max(1) as f64)
}

/// Expected loss of the all-zeros predictor: `E||eps||^2 = H (d_s + d_a)`.
pub fn zero_predictor_loss(horizon: usize, transition_dim: usize) -> f64 {
    (horizon * transition_dim) as f64
}
