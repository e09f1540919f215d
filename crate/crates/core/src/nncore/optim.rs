use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

use super::{Float, ParamSet};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamWConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay,
            eps: 1e-8,
        }
    }
}

/// Adaptive moments with decoupled weight decay:
///
/// ```text
/// m <- b1 m + (1 - b1) g
/// v <- b2 v + (1 - b2) g^2
/// p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)
/// ```
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    step: u64,
    m: Vec<ArrayD<T>>,
    v: Vec<ArrayD<T>>,
}

impl<T: Float> AdamW<T> {
    pub fn new(params: &ParamSet<T>, cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            step: 0,
            m: params
                .iter()
                .map(|p| ArrayD::zeros(p.value.raw_dim()))
                .collect(),
            v: params
                .iter()
                .map(|p| ArrayD::zeros(p.value.raw_dim()))
                .collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    ///
    /// A non-finite gradient aborts before any parameter is touched.
    pub fn step(&mut self, params: &mut ParamSet<T>) -> Result<()> {
        if let Some(bad) = params
            .iter()
            .find(|p| p.grad.iter().any(|g| !g.is_finite()))
        {
            return Err(Error::NonFiniteGradient {
                param: bad.name.clone(),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::c(c.beta1), T::c(c.beta2));
        let (ob1, ob2) = (T::c(1.0 - c.beta1), T::c(1.0 - c.beta2));
        let (lr, wd, eps) = (T::c(c.lr), T::c(c.weight_decay), T::c(c.eps));
        let (ibc1, ibc2) = (T::c(1.0 / bc1), T::c(1.0 / bc2));
        for ((p, m), v) in params
            .iter_mut()
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            Zip::from(&mut p.value)
                .and(&mut p.grad)
                .and(m)
                .and(v)
                .for_each(|w, g, m, v| {
                    *m = b1 * *m + ob1 * *g;
                    *v = b2 * *v + ob2 * *g * *g;
                    let m_hat = *m * ibc1;
                    let v_hat = *v * ibc2;
                    *w = *w - lr * (m_hat / (v_hat.sqrt() + eps) + wd * *w);
                    *g = T::zero();
                });
        }
        debug_assert!(
            params.all_finite(),
            "non-finite parameter after optimizer step"
        );
        Ok(())
    }
}

/// `ema <- decay * ema + (1 - decay) * params`, elementwise.
pub fn ema_update<T: Float>(ema: &mut ParamSet<T>, params: &ParamSet<T>, decay: f64) {
    assert!(
        ema.same_layout(params),
        "ema_update: parameter layouts differ"
    );
    let d = T::c(decay);
    let od = T::c(1.0 - decay);
    for (e, p) in ema.iter_mut().zip(params.iter()) {
        Zip::from(&mut e.value)
            .and(&p.value)
            .for_each(|e, &p| *e = d * *e + od * p);
    }
}

/// Polyak averaging of target networks: `target <- (1 - tau) target + tau online`.
pub fn soft_update<T: Float>(target: &mut ParamSet<T>, online: &ParamSet<T>, tau: f64) {
    ema_update(target, online, 1.0 - tau);
}
