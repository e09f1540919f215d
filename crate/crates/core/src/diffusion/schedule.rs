use ndarray::{Array, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Linear,
    Cosine,
}

/// Variance schedule `beta_1..beta_K` and the cumulative products
/// `alpha_bar_k = prod_{i<=k} (1 - beta_i)`. Indices are 1-based in the API.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

/// Reference linear range for a 1000-step process.
const LINEAR_START: f64 = 1e-4;
const LINEAR_END: f64 = 2e-2;
const MAX_BETA: f64 = 0.999;
const COSINE_OFFSET: f64 = 0.008;

impl NoiseSchedule {
    /// Linear betas use the 1000-step range `1e-4..2e-2` rescaled by `1000 / K`
    /// so that short chains still end near pure noise; each beta is capped at
    /// 0.999. With `K = 1` this gives `beta_1 = 0.1`.
    pub fn new(k: usize, kind: ScheduleKind) -> Result<Self> {
        if k == 0 {
            return Err(Error::config("diffusion step count K must be at least 1"));
        }
        let beta: Vec<f64> = match kind {
            ScheduleKind::Linear => {
                let scale = 1000.0 / k as f64;
                let (lo, hi) = (scale * LINEAR_START, scale * LINEAR_END);
                (0..k)
                    .map(|i| {
                        let frac = if k == 1 {
                            0.0
                        } else {
                            i as f64 / (k - 1) as f64
                        };
                        (lo + (hi - lo) * frac).min(MAX_BETA)
                    })
                    .collect()
            }
            ScheduleKind::Cosine => {
                let f = |t: f64| {
                    let x = (t / k as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)
                        * std::f64::consts::FRAC_PI_2;
                    x.cos().powi(2)
                };
                (1..=k)
                    .map(|i| (1.0 - f(i as f64) / f((i - 1) as f64)).clamp(1e-8, MAX_BETA))
                    .collect()
            }
        };
        let mut alpha_bar = Vec::with_capacity(k);
        let mut acc = 1.0;
        for b in &beta {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(NoiseSchedule {
            kind,
            beta,
            alpha_bar,
        })
    }

    /// Number of diffusion steps `K`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn alpha_bar(&self, k: usize) -> Result<f64> {
        self.check(k)?;
        Ok(self.alpha_bar[k - 1])
    }

    pub fn beta(&self, k: usize) -> Result<f64> {
        self.check(k)?;
        Ok(self.beta[k - 1])
    }

    fn check(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.steps() {
            return Err(Error::OutOfRange(format!(
                "diffusion step {k} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    /// `tau_k = sqrt(alpha_bar_k) tau_0 + sqrt(1 - alpha_bar_k) eps`, evaluated
    /// per element in `f64`.
    pub fn forward_noise<D: Dimension>(
        &self,
        tau0: &Array<f32, D>,
        k: usize,
        eps: &Array<f32, D>,
    ) -> Result<Array<f32, D>> {
        let ab = self.alpha_bar(k)?;
        if tau0.shape() != eps.shape() {
            return Err(Error::Shape {
                layer: "forward_noise".into(),
                expected: format!("{:?}", tau0.shape()),
                got: format!("{:?}", eps.shape()),
            });
        }
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let mut out = tau0.clone();
        Zip::from(&mut out)
            .and(eps)
            .for_each(|x, &e| *x = (a * *x as f64 + b * e as f64) as f32);
        Ok(out)
    }
}

/// Shorthand for [`NoiseSchedule::new`].
pub fn build_schedule(k: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    NoiseSchedule::new(k, kind)
}
