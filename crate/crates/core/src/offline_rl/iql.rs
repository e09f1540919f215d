use ndarray::{Array1, ArrayD};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::buffer::{Batch, TransitionBuffer};
use super::networks::{
    constant2, q_value, scalar_head, to_array1, Architecture, Backbone, PolicyBundle, LOG_STD_MAX,
    LOG_STD_MIN,
};
use super::rebrac::soft_update_targets;
use super::train::{Logger, Streams, TrainOptions, TrainOutput};
use crate::error::{Error, Result};
use crate::nncore::{AdamW, AdamWConfig, Graph, Var, GRAD_CLIP_NORM};
use crate::reward::AnnotatedDataset;

/// Upper clip of the advantage weights `exp(beta (Q - V))`.
pub const MAX_AWR_WEIGHT: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IQLConfig {
    pub expectile: f64,
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub value_lr: f64,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    /// Actor dropout probability; 0 disables it.
    pub dropout: f64,
}

impl Default for IQLConfig {
    fn default() -> Self {
        IQLConfig {
            expectile: 0.8,
            beta: 0.5,
            gamma: 0.99,
            tau: 0.005,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            value_lr: 3e-4,
            batch_size: 256,
            hidden: vec![256, 256],
            dropout: 0.0,
        }
    }
}

impl IQLConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(format!("iql: {m}")));
        if !(self.expectile > 0.0 && self.expectile < 1.0) {
            return bad("expectile must lie in (0, 1)");
        }
        if !(self.beta > 0.0) {
            return bad("beta must be positive");
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("gamma must lie in [0, 1] and tau in (0, 1]");
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0 && self.value_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("batch_size and hidden widths must be positive");
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            actor_hidden: self.hidden.clone(),
            critic_hidden: self.hidden.clone(),
            value_hidden: self.hidden.clone(),
            critic_layer_norm: false,
            gaussian_actor: true,
            twin_critics: true,
            target_actor: false,
        }
    }
}

/// `|e - 1{u < 0}|`
pub fn expectile_weight(u: f64, e: f64) -> f64 {
    if u < 0.0 {
        1.0 - e
    } else {
        e
    }
}

/// `L_e(u) = |e - 1{u < 0}| u^2`
pub fn expectile_loss(u: f64, e: f64) -> f64 {
    expectile_weight(u, e) * u * u
}

/// Mean expectile loss of the residuals `u` on the tape. The weights are
/// piecewise constant in `u`, so treating them as constants is exact.
pub fn expectile_loss_graph(g: &mut Graph<f32>, u: Var, e: f64) -> Var {
    let w: ArrayD<f32> = g.value(u).mapv(|x| expectile_weight(x as f64, e) as f32);
    let sq = g.square(u);
    let wl = g.mul_const(sq, w);
    g.mean(wl)
}

/// `min(exp(beta adv), MAX_AWR_WEIGHT)`
pub fn awr_weight(adv: f64, beta: f64) -> f64 {
    (beta * adv).exp().min(MAX_AWR_WEIGHT)
}

pub fn iql_train(
    ann: &AnnotatedDataset,
    cfg: &IQLConfig,
    opts: &TrainOptions,
) -> Result<TrainOutput> {
    iql_train_buffer(&TransitionBuffer::from_annotated(ann)?, cfg, opts)
}

pub fn iql_train_buffer(
    buffer: &TransitionBuffer,
    cfg: &IQLConfig,
    opts: &TrainOptions,
) -> Result<TrainOutput> {
    cfg.validate()?;
    opts.validate()?;
    if buffer.obs_normalizer.is_none() {
        return Err(Error::config(
            "iql: observation normalizer not attached to the dataset",
        ));
    }
    let mut st = Streams::new(opts.seed);
    let mut b = PolicyBundle::new(
        Backbone::Iql,
        cfg.architecture(),
        buffer.state_dim(),
        buffer.action_dim(),
        &mut st.init,
    );
    b.obs_normalizer = buffer.obs_normalizer.clone();
    let mut opt_actor = AdamW::new(&b.actor.params, AdamWConfig::new(cfg.actor_lr, 0.0));
    let mut opt_v = AdamW::new(
        &b.value.as_ref().expect("value net").params,
        AdamWConfig::new(cfg.value_lr, 0.0),
    );
    let ccfg = AdamWConfig::new(cfg.critic_lr, 0.0);
    let mut opt_q1 = AdamW::new(&b.q1.as_ref().expect("twin critics").params, ccfg);
    let mut opt_q2 = AdamW::new(&b.q2.as_ref().expect("twin critics").params, ccfg);
    let mut logger = Logger::new(opts);

    for step in 1..=opts.steps {
        let batch = buffer.sample(cfg.batch_size, &mut st.batch);
        let (target_q, next_v) = frozen_estimates(&b, &batch)?;
        let (lv, adv) = value_step(&mut b, cfg, &batch, &target_q, &mut opt_v)?;
        logger.value(lv);
        let gamma = cfg.gamma as f32;
        let y = ndarray::Zip::from(&batch.rewards)
            .and(&batch.terminals)
            .and(&next_v)
            .map_collect(|&r, &d, &v| r + gamma * (1.0 - d) * v);
        let lc = critic_step(&mut b, &batch, &y, &mut opt_q1, &mut opt_q2)?;
        logger.critic(lc);
        let w = adv.mapv(|a| awr_weight(a as f64, cfg.beta) as f32);
        let la = actor_step(&mut b, cfg, &batch, &w, &mut st.noise, &mut opt_actor)?;
        logger.actor(la);
        soft_update_targets(&mut b, cfg.tau);
        b.step += 1;
        logger.after_step(step, &b)?;
    }
    Ok(TrainOutput {
        bundle: b,
        log: logger.rows,
    })
}

/// `min_j Q'_j(s, a)` and `V(s')`, both without gradients.
fn frozen_estimates(b: &PolicyBundle, batch: &Batch) -> Result<(Array1<f32>, Array1<f32>)> {
    let mut g = Graph::new();
    let q = b.q1.as_ref().expect("twin critics");
    let p1 = b
        .q1_target
        .as_ref()
        .expect("target critic")
        .bind_frozen(&mut g);
    let p2 = b
        .q2_target
        .as_ref()
        .expect("target critic")
        .bind_frozen(&mut g);
    let s = constant2(&mut g, &batch.states);
    let a = constant2(&mut g, &batch.actions);
    let t1 = q_value(&mut g, &q.mlp, &p1, s, a)?;
    let t2 = q_value(&mut g, &q.mlp, &p2, s, a)?;
    let tq = g.minimum(t1, t2);
    let v = b.value.as_ref().expect("value net");
    let pv = v.params.bind_frozen(&mut g);
    let s2 = constant2(&mut g, &batch.next_states);
    let nv = scalar_head(&mut g, &v.mlp, &pv, s2)?;
    Ok((to_array1(g.value(tq)), to_array1(g.value(nv))))
}

/// Expectile regression of `V(s)` toward the target Q. Returns the loss and
/// the advantages `Q - V` measured before the update.
fn value_step(
    b: &mut PolicyBundle,
    cfg: &IQLConfig,
    batch: &Batch,
    target_q: &Array1<f32>,
    opt: &mut AdamW<f32>,
) -> Result<(f64, Array1<f32>)> {
    let v = b.value.as_mut().expect("value net");
    let mut g = Graph::new();
    let pv = v.params.bind(&mut g);
    let s = constant2(&mut g, &batch.states);
    let vs = scalar_head(&mut g, &v.mlp, &pv, s)?;
    let tq = g.constant(target_q.clone().into_dyn());
    let u = g.sub(tq, vs);
    let adv = to_array1(g.value(u));
    let loss = expectile_loss_graph(&mut g, u, cfg.expectile);
    let grads = g.backward(loss)?;
    v.params.accumulate(&grads, &pv);
    v.params.clip_grad_norm(GRAD_CLIP_NORM);
    opt.step(&mut v.params)?;
    Ok((g.scalar(loss) as f64, adv))
}

fn critic_step(
    b: &mut PolicyBundle,
    batch: &Batch,
    y: &Array1<f32>,
    opt1: &mut AdamW<f32>,
    opt2: &mut AdamW<f32>,
) -> Result<f64> {
    let mut g = Graph::new();
    let q1 = b.q1.as_mut().expect("twin critics");
    let q2 = b.q2.as_mut().expect("twin critics");
    let p1 = q1.params.bind(&mut g);
    let p2 = q2.params.bind(&mut g);
    let s = constant2(&mut g, &batch.states);
    let a = constant2(&mut g, &batch.actions);
    let yv = g.constant(y.clone().into_dyn());
    let v1 = q_value(&mut g, &q1.mlp, &p1, s, a)?;
    let v2 = q_value(&mut g, &q2.mlp, &p2, s, a)?;
    let d1 = g.sub(v1, yv);
    let d2 = g.sub(v2, yv);
    let s1 = g.square(d1);
    let s2 = g.square(d2);
    let l1 = g.mean(s1);
    let l2 = g.mean(s2);
    let loss = g.add(l1, l2);
    let grads = g.backward(loss)?;
    q1.params.accumulate(&grads, &p1);
    q2.params.accumulate(&grads, &p2);
    q1.params.clip_grad_norm(GRAD_CLIP_NORM);
    q2.params.clip_grad_norm(GRAD_CLIP_NORM);
    opt1.step(&mut q1.params)?;
    opt2.step(&mut q2.params)?;
    Ok(g.scalar(loss) as f64)
}

/// Advantage-weighted regression: `-mean(w log pi(a | s))`.
fn actor_step<R: Rng>(
    b: &mut PolicyBundle,
    cfg: &IQLConfig,
    batch: &Batch,
    w: &Array1<f32>,
    rng: &mut R,
    opt: &mut AdamW<f32>,
) -> Result<f64> {
    let log_std_id = b.log_std.expect("gaussian actor");
    let mut g = Graph::new();
    let pa = b.actor.params.bind(&mut g);
    let s = constant2(&mut g, &batch.states);
    let p = cfg.dropout;
    let mut mask = |shape: &[usize]| -> ArrayD<f32> {
        let keep = 1.0 / (1.0 - p) as f32;
        ArrayD::from_shape_simple_fn(shape, || if rng.random::<f64>() < p { 0.0 } else { keep })
    };
    let mean = if p > 0.0 {
        b.actor
            .mlp
            .forward_with_dropout(&mut g, &pa, s, Some(&mut mask))?
    } else {
        b.actor.mlp.forward(&mut g, &pa, s)?
    };
    let lp = g.gaussian_log_prob(batch.actions.clone(), mean, pa.get(log_std_id));
    let wlp = g.mul_const(lp, w.clone().into_dyn());
    let m = g.mean(wlp);
    let loss = g.scale(m, -1.0);
    let grads = g.backward(loss)?;
    b.actor.params.accumulate(&grads, &pa);
    b.actor.params.clip_grad_norm(GRAD_CLIP_NORM);
    opt.step(&mut b.actor.params)?;
    b.actor
        .params
        .get_mut(log_std_id)
        .value
        .mapv_inplace(|x| x.clamp(LOG_STD_MIN, LOG_STD_MAX));
    Ok(g.scalar(loss) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::ParamSet;
    use ndarray::IxDyn;

    #[test]
    fn loss_definition() {
        assert_eq!(expectile_loss(0.0, 0.8), 0.0);
        for u in [-2.0, -0.3, 0.7, 5.0] {
            assert_eq!(expectile_loss(u, 0.5), 0.5 * u * u);
        }
        assert!((expectile_loss(-1.0, 0.8) - 0.2).abs() < 1e-15);
        assert!((expectile_loss(1.0, 0.8) - 0.8).abs() < 1e-15);
        for beta in [0.1, 0.5, 3.0] {
            assert_eq!(awr_weight(0.0, beta), 1.0);
        }
        assert_eq!(awr_weight(1e3, 0.5), MAX_AWR_WEIGHT);
    }

    /// Fits a scalar `v` to `targets` by minimizing the on-tape expectile loss.
    fn fit_scalar(targets: &[f32], e: f64) -> f64 {
        let mut ps = ParamSet::<f32>::new();
        ps.add("v", ArrayD::zeros(IxDyn(&[1])));
        let mut opt = AdamW::new(&ps, AdamWConfig::new(0.05, 0.0));
        let t = ndarray::Array1::from(targets.to_vec()).into_dyn();
        for i in 0..6000 {
            if i == 3000 {
                opt.cfg.lr = 1e-3;
            }
            if i == 5000 {
                opt.cfg.lr = 5e-5;
            }
            let mut g = Graph::new();
            let p = ps.bind(&mut g);
            let tv = g.constant(t.clone());
            let zeros = g.constant(ArrayD::zeros(IxDyn(&[targets.len(), 1])));
            let vb = g.add_row_bias(zeros, p.get(0));
            let vb = g.reshape(vb, &[targets.len()]);
            let u = g.sub(tv, vb);
            let loss = expectile_loss_graph(&mut g, u, e);
            let grads = g.backward(loss).unwrap();
            ps.accumulate(&grads, &p);
            opt.step(&mut ps).unwrap();
        }
        ps.get(0).value[[0]] as f64
    }

    /// Root of `sum_i w_e(t_i - v) (t_i - v) = 0`, by bisection in f64.
    fn expectile_oracle(targets: &[f32], e: f64) -> f64 {
        let f = |v: f64| {
            targets
                .iter()
                .map(|&t| {
                    let u = t as f64 - v;
                    expectile_weight(u, e) * u
                })
                .sum::<f64>()
        };
        let (mut lo, mut hi) = (-10.0, 10.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                lo = mid
            } else {
                hi = mid
            }
        }
        0.5 * (lo + hi)
    }

    const TARGETS: [f32; 8] = [0.3, -1.2, 2.5, 0.9, 0.0, 1.7, -0.4, 3.1];

    #[test]
    fn half_expectile_is_the_mean() {
        let mean = TARGETS.iter().map(|&t| t as f64).sum::<f64>() / TARGETS.len() as f64;
        let v = fit_scalar(&TARGETS, 0.5);
        assert!((v - mean).abs() < 1e-4, "{v} vs {mean}");
    }

    #[test]
    fn fitted_value_increases_with_expectile() {
        let mut prev = f64::NEG_INFINITY;
        for e in [0.3, 0.5, 0.7, 0.9] {
            let v = fit_scalar(&TARGETS, e);
            assert!(
                (v - expectile_oracle(&TARGETS, e)).abs() < 1e-3,
                "e={e}: {v}"
            );
            assert!(v >= prev, "e={e}: {v} < {prev}");
            prev = v;
        }
    }
}
