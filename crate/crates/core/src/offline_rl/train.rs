use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::eval::{evaluate_policy, EvalResult};
use super::networks::PolicyBundle;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::trajdata::EnvSpec;

/// Loop-level settings shared by every backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    pub steps: usize,
    pub seed: u64,
    /// Log (and evaluate, if configured) every this many steps; 0 logs only the end.
    pub log_every: usize,
    pub eval_env: Option<EnvSpec>,
    pub eval_episodes: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 10_000,
            seed: 0,
            log_every: 1_000,
            eval_env: None,
            eval_episodes: 10,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("training steps must be positive"));
        }
        if self.eval_env.is_some() && self.eval_episodes == 0 {
            return Err(Error::config(
                "eval_episodes must be positive when evaluation is enabled",
            ));
        }
        Ok(())
    }

    /// Evaluation seed used during training; distinct from the training stream.
    pub fn eval_seed(&self) -> u64 {
        self.seed.wrapping_add(1_000_003)
    }
}

/// One row of the training curve. Losses are running means since the previous row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub critic_loss: Option<f64>,
    pub actor_loss: Option<f64>,
    pub value_loss: Option<f64>,
    pub eval_return: Option<f64>,
    pub normalized_score: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub bundle: PolicyBundle,
    pub log: Vec<LogRow>,
}

pub const LOG_COLUMNS: &str = "step,critic_loss,actor_loss,value_loss,eval_return,normalized_score";

pub fn log_to_csv(rows: &[LogRow]) -> String {
    fn cell(v: Option<f64>) -> String {
        v.map(|x| format!("{x}")).unwrap_or_default()
    }
    let mut out = String::from(LOG_COLUMNS);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.step,
            cell(r.critic_loss),
            cell(r.actor_loss),
            cell(r.value_loss),
            cell(r.eval_return),
            cell(r.normalized_score)
        );
    }
    out
}

pub fn write_log_csv(rows: &[LogRow], path: &Path) -> Result<()> {
    fsutil::atomic_write(path, log_to_csv(rows).as_bytes())
}

/// Running loss means plus the log/eval schedule.
pub(crate) struct Logger<'a> {
    opts: &'a TrainOptions,
    sums: [f64; 3],
    counts: [usize; 3],
    pub rows: Vec<LogRow>,
}

impl<'a> Logger<'a> {
    pub fn new(opts: &'a TrainOptions) -> Self {
        Logger {
            opts,
            sums: [0.0; 3],
            counts: [0; 3],
            rows: Vec::new(),
        }
    }

    pub fn critic(&mut self, v: f64) {
        self.sums[0] += v;
        self.counts[0] += 1;
    }

    pub fn actor(&mut self, v: f64) {
        self.sums[1] += v;
        self.counts[1] += 1;
    }

    pub fn value(&mut self, v: f64) {
        self.sums[2] += v;
        self.counts[2] += 1;
    }

    /// Called after update `step` (1-based).
    pub fn after_step(&mut self, step: usize, bundle: &PolicyBundle) -> Result<()> {
        let due =
            step == self.opts.steps || (self.opts.log_every > 0 && step % self.opts.log_every == 0);
        if !due {
            return Ok(());
        }
        let mean = |i: usize, s: &Self| (s.counts[i] > 0).then(|| s.sums[i] / s.counts[i] as f64);
        let eval: Option<EvalResult> = match self.opts.eval_env {
            Some(env) => Some(evaluate_policy(
                env,
                bundle,
                self.opts.eval_episodes,
                self.opts.eval_seed(),
            )?),
            None => None,
        };
        let row = LogRow {
            step,
            critic_loss: mean(0, self),
            actor_loss: mean(1, self),
            value_loss: mean(2, self),
            eval_return: eval.as_ref().map(|e| e.mean_return),
            normalized_score: eval.as_ref().map(|e| e.normalized_score),
        };
        log::debug!(
            "{} step {step}: {row:?}",
            format!("{:?}", bundle.backbone).to_lowercase()
        );
        self.rows.push(row);
        self.sums = [0.0; 3];
        self.counts = [0; 3];
        Ok(())
    }
}

/// Independent streams for minibatch sampling, initialization and noise.
pub(crate) struct Streams {
    pub init: ChaCha8Rng,
    pub batch: ChaCha8Rng,
    pub noise: ChaCha8Rng,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        let make = |stream: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(stream);
            r
        };
        Streams {
            init: make(21),
            batch: make(22),
            noise: make(23),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_leaves_missing_cells_empty() {
        let rows = vec![LogRow {
            step: 5,
            critic_loss: Some(0.5),
            actor_loss: None,
            value_loss: None,
            eval_return: Some(-10.0),
            normalized_score: Some(42.0),
        }];
        assert_eq!(
            log_to_csv(&rows),
            format!("{LOG_COLUMNS}\n5,0.5,,,-10,42\n")
        );
    }
}
