use serde::{Deserialize, Serialize};

use super::buffer::TransitionBuffer;
use super::networks::{constant2, Architecture, Backbone, PolicyBundle};
use super::train::{Logger, Streams, TrainOptions, TrainOutput};
use crate::error::{Error, Result};
use crate::nncore::{AdamW, AdamWConfig, Graph, GRAD_CLIP_NORM};
use crate::trajdata::TrajectoryDataset;

/// Unweighted behavior cloning; the reward-free baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BCConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
}

impl Default for BCConfig {
    fn default() -> Self {
        BCConfig {
            lr: 5e-4,
            weight_decay: 1e-4,
            batch_size: 256,
            hidden: vec![256, 256, 256],
        }
    }
}

impl BCConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::config(
                "bc: lr must be positive and weight decay non-negative",
            ));
        }
        if self.batch_size == 0 || self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::config(
                "bc: batch_size and hidden widths must be positive",
            ));
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            actor_hidden: self.hidden.clone(),
            critic_hidden: vec![],
            value_hidden: vec![],
            critic_layer_norm: false,
            gaussian_actor: false,
            twin_critics: false,
            target_actor: false,
        }
    }
}

/// Clones every action in `ds`; rewards are not needed.
pub fn bc_train(
    ds: &TrajectoryDataset,
    cfg: &BCConfig,
    opts: &TrainOptions,
) -> Result<TrainOutput> {
    let zeros = vec![0.0; ds.num_transitions()];
    bc_train_buffer(&TransitionBuffer::from_parts(ds, &zeros)?, cfg, opts)
}

pub fn bc_train_buffer(
    buffer: &TransitionBuffer,
    cfg: &BCConfig,
    opts: &TrainOptions,
) -> Result<TrainOutput> {
    cfg.validate()?;
    opts.validate()?;
    if buffer.obs_normalizer.is_none() {
        return Err(Error::config(
            "bc: observation normalizer not attached to the dataset",
        ));
    }
    let mut st = Streams::new(opts.seed);
    let mut b = PolicyBundle::new(
        Backbone::Bc,
        cfg.architecture(),
        buffer.state_dim(),
        buffer.action_dim(),
        &mut st.init,
    );
    b.obs_normalizer = buffer.obs_normalizer.clone();
    let mut opt = AdamW::new(&b.actor.params, AdamWConfig::new(cfg.lr, cfg.weight_decay));
    let mut logger = Logger::new(opts);
    for step in 1..=opts.steps {
        let batch = buffer.sample(cfg.batch_size, &mut st.batch);
        let mut g = Graph::new();
        let p = b.actor.params.bind(&mut g);
        let s = constant2(&mut g, &batch.states);
        let a = constant2(&mut g, &batch.actions);
        let pi = b.actor.mlp.forward(&mut g, &p, s)?;
        let d = g.sub(pi, a);
        let sq = g.square(d);
        let per_row = g.sum_last(sq);
        let loss = g.mean(per_row);
        let grads = g.backward(loss)?;
        b.actor.params.accumulate(&grads, &p);
        b.actor.params.clip_grad_norm(GRAD_CLIP_NORM);
        opt.step(&mut b.actor.params)?;
        logger.actor(g.scalar(loss) as f64);
        b.step += 1;
        logger.after_step(step, &b)?;
    }
    Ok(TrainOutput {
        bundle: b,
        log: logger.rows,
    })
}
