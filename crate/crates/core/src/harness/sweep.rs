use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::pipeline::{run_pipeline_in, RunPaths, RunRecord};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::offline_rl::Backbone;
use crate::reward::KernelKind;
use crate::trajdata::PolicyKind;

/// The single hyperparameter a sweep varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    /// Segment length of the diffusion model and the embeddings.
    Horizon,
    /// Kernel bandwidth.
    Sigma,
    /// Neighbor count.
    M,
    Kernel,
    Backbone,
    /// `kind:n_expert`, e.g. `medium:3`.
    Mixture,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 6] = [
        SweepAxis::Horizon,
        SweepAxis::Sigma,
        SweepAxis::M,
        SweepAxis::Kernel,
        SweepAxis::Backbone,
        SweepAxis::Mixture,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Horizon => "horizon",
            SweepAxis::Sigma => "sigma",
            SweepAxis::M => "m",
            SweepAxis::Kernel => "kernel",
            SweepAxis::Backbone => "backbone",
            SweepAxis::Mixture => "mixture",
        }
    }

    /// Copy of `base` with this axis set to `value`.
    pub fn apply(self, base: &ExperimentConfig, value: &str) -> Result<ExperimentConfig> {
        let bad = |e: &dyn fmt::Display| {
            Error::config(format!("bad {} value `{value}`: {e}", self.name()))
        };
        let mut cfg = base.clone();
        match self {
            SweepAxis::Horizon => cfg.diffusion.horizon = value.parse().map_err(|e| bad(&e))?,
            SweepAxis::Sigma => cfg.reward.kernel.sigma = value.parse().map_err(|e| bad(&e))?,
            SweepAxis::M => cfg.reward.m = value.parse().map_err(|e| bad(&e))?,
            SweepAxis::Kernel => {
                cfg.reward.kernel.kind =
                    serde_json::from_value::<KernelKind>(serde_json::Value::String(value.into()))
                        .map_err(|e| bad(&e))?
            }
            SweepAxis::Backbone => {
                cfg.rl.backbone = Backbone::from_str(value).map_err(|e| bad(&e))?
            }
            SweepAxis::Mixture => {
                let (kind, n) = value
                    .split_once(':')
                    .ok_or_else(|| bad(&"expected kind:n_expert"))?;
                cfg.mixture.behavior_kind = PolicyKind::from_str(kind).map_err(|e| bad(&e))?;
                cfg.mixture.n_expert_trajectories = n.parse().map_err(|e| bad(&e))?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SweepAxis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config(format!("unknown sweep axis `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: String,
    pub seed: u64,
    pub score: f64,
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
    pub records: Vec<(String, RunRecord)>,
    pub csv_path: PathBuf,
}

impl SweepResult {
    /// Mean score per value, in sweep order.
    pub fn mean_scores(&self) -> Vec<(String, f64)> {
        self.records
            .iter()
            .map(|(v, r)| (v.clone(), r.mean_score()))
            .collect()
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("axis,value,seed,score\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.axis, r.value, r.seed, r.score));
    }
    s
}

/// One full pipeline per value, all sharing one stage cache so that stages
/// upstream of the varied parameter run once. The first value runs alone to
/// populate those shared stages; the rest run on the current rayon pool.
pub fn run_sweep(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[String],
    out_dir: &Path,
) -> Result<SweepResult> {
    if values.is_empty() {
        return Err(Error::config("sweep needs at least one value"));
    }
    let cache_dir = base
        .cache_dir
        .clone()
        .unwrap_or_else(|| out_dir.join("cache"));
    let plans: Vec<(String, ExperimentConfig, RunPaths)> = values
        .iter()
        .map(|v| {
            let cfg = axis.apply(base, v)?;
            let paths = RunPaths {
                out_dir: out_dir.join(format!("{axis}-{}", v.replace([':', '/'], "_"))),
                cache_dir: cache_dir.clone(),
            };
            Ok((v.clone(), cfg, paths))
        })
        .collect::<Result<_>>()?;

    let (first, rest) = plans.split_first().expect("non-empty");
    let mut records = vec![(first.0.clone(), run_pipeline_in(&first.1, &first.2)?)];
    let others: Vec<Result<(String, RunRecord)>> = rest
        .par_iter()
        .map(|(v, cfg, paths)| run_pipeline_in(cfg, paths).map(|r| (v.clone(), r)))
        .collect();
    for r in others {
        records.push(r?);
    }

    let rows: Vec<SweepRow> = records
        .iter()
        .flat_map(|(v, rec)| {
            rec.seeds.iter().map(move |s| SweepRow {
                axis,
                value: v.clone(),
                seed: s.seed,
                score: s.eval.normalized_score,
            })
        })
        .collect();
    let csv_path = out_dir.join(format!("sweep_{axis}.csv"));
    fsutil::atomic_write(&csv_path, sweep_csv(&rows).as_bytes())?;
    Ok(SweepResult {
        axis,
        rows,
        records,
        csv_path,
    })
}
