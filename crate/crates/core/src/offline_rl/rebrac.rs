use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::buffer::{Batch, TransitionBuffer};
use super::networks::{
    clipped_noise, constant2, q_value, to_array1, to_array2, Architecture, Backbone, PolicyBundle,
};
use super::train::{Logger, Streams, TrainOptions, TrainOutput};
use crate::error::{Error, Result};
use crate::nncore::{soft_update, AdamW, AdamWConfig, Bound, Graph, Var, GRAD_CLIP_NORM};
use crate::reward::AnnotatedDataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReBRACConfig {
    pub gamma: f64,
    pub tau: f64,
    pub policy_freq: usize,
    pub policy_noise: f64,
    pub noise_clip: f64,
    pub beta_actor: f64,
    pub beta_critic: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub layer_norm: bool,
    /// Scale each transition's actor BC penalty by its normalized reward.
    pub reward_weighted_bc: bool,
    /// Divide the actor's Q term by the batch mean of `|Q|`.
    pub normalize_q: bool,
}

impl Default for ReBRACConfig {
    fn default() -> Self {
        ReBRACConfig {
            gamma: 0.99,
            tau: 0.005,
            policy_freq: 2,
            policy_noise: 0.2,
            noise_clip: 0.5,
            beta_actor: 0.4,
            beta_critic: 1.0,
            actor_lr: 5e-4,
            critic_lr: 5e-4,
            weight_decay: 1e-4,
            batch_size: 256,
            hidden: vec![256, 256, 256],
            layer_norm: true,
            reward_weighted_bc: true,
            normalize_q: true,
        }
    }
}

/// The actor BC coefficients used across dataset families.
pub const BETA_ACTOR_GRID: [f64; 3] = [0.1, 0.4, 1.0];

impl ReBRACConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(format!("rebrac: {m}")));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        if self.policy_freq == 0 {
            return bad("policy_freq must be at least 1");
        }
        if self.noise_clip < 0.0 || self.policy_noise < 0.0 {
            return bad("policy_noise and noise_clip must be non-negative");
        }
        if self.beta_actor < 0.0 || self.beta_critic < 0.0 {
            return bad("BC coefficients must be non-negative");
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) || self.weight_decay < 0.0 {
            return bad("learning rates must be positive and weight decay non-negative");
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
            value_hidden: vec![],
            critic_layer_norm: self.layer_norm,
            gaussian_actor: false,
            twin_critics: true,
            target_actor: true,
        }
    }
}

pub fn rebrac_train(
    ann: &AnnotatedDataset,
    cfg: &ReBRACConfig,
    opts: &TrainOptions,
) -> Result<TrainOutput> {
    rebrac_train_buffer(&TransitionBuffer::from_annotated(ann)?, cfg, opts)
}

/// Actor BC weights for a batch: the normalized rewards, or ones when weighting is off.
pub fn bc_weights(cfg: &ReBRACConfig, batch: &Batch) -> Array1<f32> {
    if cfg.reward_weighted_bc {
        batch.rewards.clone()
    } else {
        Array1::ones(batch.rewards.len())
    }
}

pub fn rebrac_train_buffer(
    buffer: &TransitionBuffer,
    cfg: &ReBRACConfig,
    opts: &TrainOptions,
) -> Result<TrainOutput> {
    cfg.validate()?;
    opts.validate()?;
    if buffer.obs_normalizer.is_none() {
        return Err(Error::config(
            "rebrac: observation normalizer not attached to the dataset",
        ));
    }
    if cfg.reward_weighted_bc {
        let (lo, hi) = buffer.reward_range();
        if lo < 0.0 || hi > 1.0 {
            return Err(Error::OutOfRange(format!(
                "reward-weighted BC needs rewards in [0, 1], found [{lo}, {hi}]; annotate with minmax normalization"
            )));
        }
    }
    let mut st = Streams::new(opts.seed);
    let mut b = PolicyBundle::new(
        Backbone::Rebrac,
        cfg.architecture(),
        buffer.state_dim(),
        buffer.action_dim(),
        &mut st.init,
    );
    b.obs_normalizer = buffer.obs_normalizer.clone();
    let mut opt_actor = AdamW::new(
        &b.actor.params,
        AdamWConfig::new(cfg.actor_lr, cfg.weight_decay),
    );
    let critic_cfg = AdamWConfig::new(cfg.critic_lr, cfg.weight_decay);
    let mut opt_q1 = AdamW::new(&b.q1.as_ref().expect("twin critics").params, critic_cfg);
    let mut opt_q2 = AdamW::new(&b.q2.as_ref().expect("twin critics").params, critic_cfg);
    let mut logger = Logger::new(opts);

    for step in 1..=opts.steps {
        let batch = buffer.sample(cfg.batch_size, &mut st.batch);
        let y = critic_targets(&b, cfg, &batch, &mut st)?;
        let lc = critic_step(&mut b, &batch, &y, &mut opt_q1, &mut opt_q2)?;
        logger.critic(lc);
        if step % cfg.policy_freq == 0 {
            let w = bc_weights(cfg, &batch);
            let la = actor_step(&mut b, cfg, &batch, &w, &mut opt_actor)?;
            logger.actor(la);
            soft_update_targets(&mut b, cfg.tau);
        }
        b.step += 1;
        logger.after_step(step, &b)?;
    }
    Ok(TrainOutput {
        bundle: b,
        log: logger.rows,
    })
}

/// `y = r + gamma (1 - done) (min_j Q'_j(s', a~') - beta_critic ||a~' - a'||^2)`
/// with `a~' = clip(pi'(s') + clip(eps, -c, c), -1, 1)`.
fn critic_targets(
    b: &PolicyBundle,
    cfg: &ReBRACConfig,
    batch: &Batch,
    st: &mut Streams,
) -> Result<Array1<f32>> {
    let n = batch.rewards.len();
    let mut g = Graph::new();
    let pt = b
        .actor_target
        .as_ref()
        .expect("target actor")
        .bind_frozen(&mut g);
    let s2 = constant2(&mut g, &batch.next_states);
    let mu = b.actor.mlp.forward(&mut g, &pt, s2)?;
    let noise = clipped_noise(
        (n, b.action_dim),
        cfg.policy_noise,
        cfg.noise_clip,
        &mut st.noise,
    );
    let a2: Array2<f32> = (to_array2(g.value(mu)) + &noise).mapv(|x| x.clamp(-1.0, 1.0));
    let a2v = constant2(&mut g, &a2);
    let q1 = b.q1.as_ref().expect("twin critics");
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
    let t1 = q_value(&mut g, &q1.mlp, &p1, s2, a2v)?;
    let t2 = q_value(&mut g, &q1.mlp, &p2, s2, a2v)?;
    let tmin = g.minimum(t1, t2);
    let qn = to_array1(g.value(tmin));
    let pen = (&a2 - &batch.next_actions)
        .mapv(|x| x * x)
        .sum_axis(ndarray::Axis(1));
    let gamma = cfg.gamma as f32;
    let bc = cfg.beta_critic as f32;
    Ok(ndarray::Zip::from(&batch.rewards)
        .and(&batch.terminals)
        .and(&qn)
        .and(&pen)
        .map_collect(|&r, &d, &q, &p| r + gamma * (1.0 - d) * (q - bc * p)))
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
    let p1 = q1.params.bind(&mut g);
    let q2 = b.q2.as_mut().expect("twin critics");
    let p2 = q2.params.bind(&mut g);
    let s = constant2(&mut g, &batch.states);
    let a = constant2(&mut g, &batch.actions);
    let yv = g.constant(y.clone().into_dyn());
    let mut loss = None;
    for (mlp, p) in [(&q1.mlp, &p1), (&q2.mlp, &p2)] {
        let q = q_value(&mut g, mlp, p, s, a)?;
        let d = g.sub(q, yv);
        let sq = g.square(d);
        let l = g.mean(sq);
        loss = Some(match loss {
            None => l,
            Some(acc) => g.add(acc, l),
        });
    }
    let loss = loss.expect("two critics");
    let grads = g.backward(loss)?;
    let value = g.scalar(loss) as f64;
    q1.params.accumulate(&grads, &p1);
    q2.params.accumulate(&grads, &p2);
    q1.params.clip_grad_norm(GRAD_CLIP_NORM);
    q2.params.clip_grad_norm(GRAD_CLIP_NORM);
    opt1.step(&mut q1.params)?;
    opt2.step(&mut q2.params)?;
    Ok(value)
}

/// Per-row `beta w ||pi - a||^2`, shape `[n]`.
pub(crate) fn weighted_bc_penalty(
    g: &mut Graph<f32>,
    pi: Var,
    actions: &Array2<f32>,
    w: &Array1<f32>,
    beta: f64,
) -> Var {
    let a = constant2(g, actions);
    let diff = g.sub(pi, a);
    let sq = g.square(diff);
    let bc = g.sum_last(sq);
    g.mul_const(bc, (w * beta as f32).into_dyn())
}

/// Actor objective `mean(beta_actor w ||pi(s) - a||^2 - lambda min_j Q_j(s, pi(s)))`
/// with `lambda = 1 / mean|Q|` held constant.
pub(crate) fn actor_loss(
    g: &mut Graph<f32>,
    b: &PolicyBundle,
    actor_params: &Bound,
    cfg: &ReBRACConfig,
    batch: &Batch,
    w: &Array1<f32>,
) -> Result<Var> {
    let s = constant2(g, &batch.states);
    let pi = b.actor.mlp.forward(g, actor_params, s)?;
    let q1 = b.q1.as_ref().expect("twin critics");
    let q2 = b.q2.as_ref().expect("twin critics");
    let p1 = q1.params.bind_frozen(g);
    let p2 = q2.params.bind_frozen(g);
    let qa = q_value(g, &q1.mlp, &p1, s, pi)?;
    let qb = q_value(g, &q2.mlp, &p2, s, pi)?;
    let q = g.minimum(qa, qb);
    let lambda = if cfg.normalize_q {
        let m = g.value(q).iter().map(|x| x.abs() as f64).sum::<f64>() / batch.rewards.len() as f64;
        1.0 / m.max(1e-6)
    } else {
        1.0
    };
    let wbc = weighted_bc_penalty(g, pi, &batch.actions, w, cfg.beta_actor);
    let qs = g.scale(q, -lambda as f32);
    let total = g.add(wbc, qs);
    Ok(g.mean(total))
}

fn actor_step(
    b: &mut PolicyBundle,
    cfg: &ReBRACConfig,
    batch: &Batch,
    w: &Array1<f32>,
    opt: &mut AdamW<f32>,
) -> Result<f64> {
    let mut g = Graph::new();
    let pa = b.actor.params.bind(&mut g);
    let loss = actor_loss(&mut g, b, &pa, cfg, batch, w)?;
    let grads = g.backward(loss)?;
    b.actor.params.accumulate(&grads, &pa);
    b.actor.params.clip_grad_norm(GRAD_CLIP_NORM);
    opt.step(&mut b.actor.params)?;
    Ok(g.scalar(loss) as f64)
}

pub(crate) fn soft_update_targets(b: &mut PolicyBundle, tau: f64) {
    if let Some(t) = b.actor_target.as_mut() {
        soft_update(t, &b.actor.params, tau);
    }
    if let (Some(t), Some(q)) = (b.q1_target.as_mut(), b.q1.as_ref()) {
        soft_update(t, &q.params, tau);
    }
    if let (Some(t), Some(q)) = (b.q2_target.as_mut(), b.q2.as_ref()) {
        soft_update(t, &q.params, tau);
    }
}
