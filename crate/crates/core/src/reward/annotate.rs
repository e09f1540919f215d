use std::path::Path;

use ndarray::ArrayView1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::kernel::KernelSpec;
use super::knn::KnnIndex;
use crate::embedding::EmbeddingSet;
use crate::error::{Error, Result};
use crate::trajdata::{read_dataset_with, write_dataset_with, DatasetKind, TrajectoryDataset};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardNormalization {
    None,
    #[default]
    MinMax,
    ZScore,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    /// Neighbor count.
    pub m: usize,
    pub kernel: KernelSpec,
    pub normalize: RewardNormalization,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            m: 10,
            kernel: KernelSpec::default(),
            normalize: RewardNormalization::MinMax,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::config("neighbor count m must be at least 1"));
        }
        self.kernel.validate()
    }
}

/// Parameters of the normalization applied after annotation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NormalizationParams {
    None,
    MinMax { min: f64, max: f64 },
    ZScore { mean: f64, std: f64 },
}

impl NormalizationParams {
    pub fn apply(&self, r: f64) -> f64 {
        match *self {
            NormalizationParams::None => r,
            NormalizationParams::MinMax { min, max } => {
                if max - min > 0.0 {
                    (r - min) / (max - min)
                } else {
                    1.0
                }
            }
            NormalizationParams::ZScore { mean, std } => {
                if std > 0.0 {
                    (r - mean) / std
                } else {
                    0.0
                }
            }
        }
    }
}

/// Fits and applies `mode` over all rewards. A constant reward vector maps to
/// all ones under min-max (every transition equally trusted) and to zeros
/// under z-scoring.
pub fn normalize_rewards(
    raw: &[f64],
    mode: RewardNormalization,
) -> (Vec<f64>, NormalizationParams) {
    let params = match mode {
        RewardNormalization::None => NormalizationParams::None,
        RewardNormalization::MinMax => {
            let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
            let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            NormalizationParams::MinMax { min, max }
        }
        RewardNormalization::ZScore => {
            let n = raw.len().max(1) as f64;
            let mean = raw.iter().sum::<f64>() / n;
            let var = raw.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
            NormalizationParams::ZScore {
                mean,
                std: var.sqrt(),
            }
        }
    };
    (raw.iter().map(|&r| params.apply(r)).collect(), params)
}

/// Mean kernel value over precomputed neighbor distances.
pub fn reward_from_distances(distances: &[f64], kernel: &KernelSpec) -> f64 {
    distances.iter().map(|&d| kernel.eval(d)).sum::<f64>() / distances.len() as f64
}

/// Surrogate reward of one unit-norm latent: the mean kernel value over its
/// `m` nearest expert embeddings.
pub fn reward_for_state(
    z: ArrayView1<'_, f32>,
    expert: &EmbeddingSet,
    cfg: &RewardConfig,
) -> Result<f64> {
    reward_with_index(z, &KnnIndex::from_embeddings(expert), cfg)
}

pub fn reward_with_index(
    z: ArrayView1<'_, f32>,
    index: &KnnIndex,
    cfg: &RewardConfig,
) -> Result<f64> {
    let nb = index.query(z, cfg.m)?;
    let d: Vec<f64> = nb.iter().map(|n| n.distance).collect();
    Ok(reward_from_distances(&d, &cfg.kernel))
}

/// Header metadata stored with an annotated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationInfo {
    pub reward_config: RewardConfig,
    pub model_hash: String,
    pub horizon: usize,
    pub normalization: NormalizationParams,
}

/// Behavioral dataset with one surrogate reward per state row, laid out
/// trajectory by trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedDataset {
    pub dataset: TrajectoryDataset,
    pub rewards: Vec<f32>,
    pub info: AnnotationInfo,
}

impl AnnotatedDataset {
    /// Rewards of trajectory `i`.
    pub fn trajectory_rewards(&self, i: usize) -> &[f32] {
        let start: usize = self.dataset.trajectories[..i].iter().map(|t| t.len()).sum();
        &self.rewards[start..start + self.dataset.trajectories[i].len()]
    }
}

/// Window start whose reward a state at `t` receives.
fn window_for(t: usize, len: usize, horizon: usize) -> usize {
    if len <= horizon {
        0
    } else {
        t.min(len - horizon)
    }
}

/// Unnormalized per-row rewards: each state takes the reward of the window
/// starting at it; the last `H - 1` states inherit the window at `L - H`.
pub fn raw_state_rewards(
    dataset: &TrajectoryDataset,
    behavioral: &EmbeddingSet,
    expert: &EmbeddingSet,
    cfg: &RewardConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if behavioral.model_hash != expert.model_hash {
        return Err(Error::ModelMismatch {
            expected: expert.model_hash.clone(),
            got: behavioral.model_hash.clone(),
        });
    }
    if behavioral.source_kind != DatasetKind::Behavioral
        || expert.source_kind != DatasetKind::Expert
    {
        return Err(Error::config(
            "annotate needs behavioral query embeddings and expert reference embeddings",
        ));
    }
    if behavioral.horizon != expert.horizon {
        return Err(Error::config(format!(
            "embedding horizons differ: behavioral {} vs expert {}",
            behavioral.horizon, expert.horizon
        )));
    }
    if cfg.m > expert.len() {
        return Err(Error::NeighborCount {
            m: cfg.m,
            available: expert.len(),
        });
    }
    let index = KnnIndex::from_embeddings(expert);
    let per_window: Vec<f64> = (0..behavioral.len())
        .into_par_iter()
        .map(|i| reward_with_index(behavioral.row(i), &index, cfg))
        .collect::<Result<_>>()?;
    let h = behavioral.horizon;
    let mut out = Vec::with_capacity(dataset.num_transitions());
    for (ti, traj) in dataset.trajectories.iter().enumerate() {
        let len = traj.len();
        for t in 0..len {
            let origin = (ti, window_for(t, len, h));
            let row = behavioral.find(origin).ok_or_else(|| {
                Error::config(format!(
                    "no behavioral embedding for window {origin:?}; annotation needs stride-1 windows"
                ))
            })?;
            out.push(per_window[row]);
        }
    }
    Ok(out)
}

/// Labels every behavioral state with its surrogate reward and applies the
/// configured normalization.
pub fn annotate(
    dataset: &TrajectoryDataset,
    behavioral: &EmbeddingSet,
    expert: &EmbeddingSet,
    cfg: &RewardConfig,
) -> Result<AnnotatedDataset> {
    let raw = raw_state_rewards(dataset, behavioral, expert, cfg)?;
    if let Some(bad) = raw.iter().find(|r| !r.is_finite()) {
        return Err(Error::OutOfRange(format!("non-finite reward {bad}")));
    }
    let (norm, params) = normalize_rewards(&raw, cfg.normalize);
    Ok(AnnotatedDataset {
        dataset: dataset.clone(),
        rewards: norm.into_iter().map(|r| r as f32).collect(),
        info: AnnotationInfo {
            reward_config: *cfg,
            model_hash: expert.model_hash.clone(),
            horizon: expert.horizon,
            normalization: params,
        },
    })
}

pub fn write_annotated(path: &Path, ann: &AnnotatedDataset) -> Result<()> {
    let info = serde_json::to_value(&ann.info)?;
    write_dataset_with(path, &ann.dataset, Some((&info, &ann.rewards)))
}

pub fn read_annotated(path: &Path) -> Result<AnnotatedDataset> {
    let (dataset, rewards) = read_dataset_with(path)?;
    let (info, rewards) = rewards.ok_or(Error::MissingRewards)?;
    let info: AnnotationInfo = serde_json::from_value(info)
        .map_err(|e| Error::format(format!("annotation header: {e}")))?;
    Ok(AnnotatedDataset {
        dataset,
        rewards,
        info,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tail_states_inherit_last_window() {
        assert_eq!(window_for(0, 100, 32), 0);
        assert_eq!(window_for(68, 100, 32), 68);
        assert_eq!(window_for(99, 100, 32), 68);
        assert_eq!(window_for(5, 10, 32), 0);
    }

    #[test]
    fn minmax_endpoints_and_constant_input() {
        let (n, p) = normalize_rewards(&[-3.0, -1.0, -2.0], RewardNormalization::MinMax);
        assert_eq!(n, vec![0.0, 1.0, 0.5]);
        assert_eq!(
            p,
            NormalizationParams::MinMax {
                min: -3.0,
                max: -1.0
            }
        );
        let (c, _) = normalize_rewards(&[0.4; 3], RewardNormalization::MinMax);
        assert_eq!(c, vec![1.0; 3]);
        let (z, _) = normalize_rewards(&[1.0, 3.0], RewardNormalization::ZScore);
        assert_eq!(z, vec![-1.0, 1.0]);
    }

    proptest! {
        #[test]
        fn normalization_preserves_order(v in prop::collection::vec(-50.0f64..0.0, 2..40), z in any::<bool>()) {
            let mode = if z { RewardNormalization::ZScore } else { RewardNormalization::MinMax };
            let (n, _) = normalize_rewards(&v, mode);
            for i in 0..v.len() {
                for j in 0..v.len() {
                    if v[i] < v[j] {
                        prop_assert!(n[i] < n[j] || (n[j] - n[i]).abs() < 1e-12);
                    }
                }
            }
            if !z {
                prop_assert!(n.iter().all(|&x| (0.0..=1.0).contains(&x)));
            }
        }
    }
}
