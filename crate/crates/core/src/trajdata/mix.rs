use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{generate_toy_dataset, DatasetKind, Trajectory, TrajectoryDataset};
use super::env::{EnvSpec, PolicyKind};
use crate::error::{Error, Result};

/// Composition of a behavioral mixture: a block of suboptimal transitions plus
/// a few whole expert trajectories.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixtureSpec {
    pub n_suboptimal_transitions: usize,
    pub n_expert_trajectories: usize,
    pub behavior_kind: PolicyKind,
    pub seed: u64,
}

impl Default for MixtureSpec {
    /// Desk-scale "random + few expert": 1e4 random transitions and 3 expert
    /// episodes, the same ratio structure as 1e6 + 30.
    fn default() -> Self {
        MixtureSpec {
            n_suboptimal_transitions: 10_000,
            n_expert_trajectories: 3,
            behavior_kind: PolicyKind::Random,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixSource {
    Suboptimal,
    Expert,
}

/// Where a mixed trajectory came from: source dataset and trajectory index in it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: MixSource,
    pub index: usize,
}

/// Takes exactly `spec.n_suboptimal_transitions` rows from `suboptimal` (the
/// last taken episode is truncated if needed), appends the first
/// `spec.n_expert_trajectories` episodes of `expert_pool`, and shuffles at the
/// trajectory level.
pub fn mix_datasets(
    suboptimal: &TrajectoryDataset,
    expert_pool: &TrajectoryDataset,
    spec: &MixtureSpec,
) -> Result<TrajectoryDataset> {
    mix_with_provenance(suboptimal, expert_pool, spec).map(|(d, _)| d)
}

/// [`mix_datasets`] plus per-trajectory provenance, for evaluation code.
pub fn mix_with_provenance(
    suboptimal: &TrajectoryDataset,
    expert_pool: &TrajectoryDataset,
    spec: &MixtureSpec,
) -> Result<(TrajectoryDataset, Vec<Provenance>)> {
    if expert_pool.len() < spec.n_expert_trajectories {
        return Err(Error::InsufficientExperts {
            required: spec.n_expert_trajectories,
            available: expert_pool.len(),
        });
    }
    if suboptimal.num_transitions() < spec.n_suboptimal_transitions {
        return Err(Error::config(format!(
            "suboptimal dataset has {} transitions, mixture needs {}",
            suboptimal.num_transitions(),
            spec.n_suboptimal_transitions
        )));
    }
    if !suboptimal.has_actions() {
        return Err(Error::MissingActions);
    }
    if spec.n_expert_trajectories > 0
        && (expert_pool.state_dim != suboptimal.state_dim
            || expert_pool.action_dim != suboptimal.action_dim)
    {
        return Err(Error::format(
            "expert pool dimensions differ from the suboptimal dataset",
        ));
    }
    if suboptimal.obs_normalizer.is_some() || expert_pool.obs_normalizer.is_some() {
        return Err(Error::format("mix raw datasets before normalizing"));
    }

    let mut items: Vec<(Trajectory, Provenance)> = Vec::new();
    let mut remaining = spec.n_suboptimal_transitions;
    for (i, t) in suboptimal.trajectories.iter().enumerate() {
        if remaining == 0 {
            break;
        }
        let take = t.len().min(remaining);
        let mut t = t.clone();
        if take < t.len() {
            t.states = t.states.slice(ndarray::s![..take, ..]).to_owned();
            t.actions = t
                .actions
                .map(|a| a.slice(ndarray::s![..take, ..]).to_owned());
            t.terminated = false;
        }
        remaining -= take;
        items.push((
            t,
            Provenance {
                source: MixSource::Suboptimal,
                index: i,
            },
        ));
    }
    for (i, t) in expert_pool
        .trajectories
        .iter()
        .take(spec.n_expert_trajectories)
        .enumerate()
    {
        items.push((
            t.clone(),
            Provenance {
                source: MixSource::Expert,
                index: i,
            },
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(11);
    items.shuffle(&mut rng);
    let (trajectories, provenance): (Vec<_>, Vec<_>) = items.into_iter().unzip();
    let ds = TrajectoryDataset::new(
        DatasetKind::Behavioral,
        suboptimal.state_dim,
        suboptimal.action_dim,
        trajectories,
    )?;
    Ok((ds, provenance))
}

/// Generates both sources for `env` and mixes them.
///
/// The expert pool is rolled out with its own random stream, so it never
/// contains the observation-only expert demonstration.
pub fn generate_mixture(
    env: EnvSpec,
    spec: &MixtureSpec,
) -> Result<(TrajectoryDataset, Vec<Provenance>)> {
    let sub = generate_toy_dataset(
        env,
        spec.behavior_kind,
        spec.n_suboptimal_transitions,
        spec.seed,
    )?;
    let pool = generate_toy_dataset(
        env,
        PolicyKind::Expert,
        spec.n_expert_trajectories * env.episode_len(),
        spec.seed,
    )?;
    mix_with_provenance(&sub, &pool, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajdata::SourceLabel;

    fn spec(n_sub: usize, n_exp: usize) -> MixtureSpec {
        MixtureSpec {
            n_suboptimal_transitions: n_sub,
            n_expert_trajectories: n_exp,
            behavior_kind: PolicyKind::Random,
            seed: 5,
        }
    }

    #[test]
    fn random_plus_few_expert_counts() {
        let (ds, prov) = generate_mixture(EnvSpec::PointMass2d, &spec(10_000, 3)).unwrap();
        assert_eq!(ds.num_transitions(), 10_300);
        assert_eq!(ds.kind, DatasetKind::Behavioral);
        assert_eq!(
            prov.iter()
                .filter(|p| p.source == MixSource::Expert)
                .count(),
            3
        );
        // Labels travel with the trajectories and agree with provenance.
        for (t, p) in ds.trajectories.iter().zip(&prov) {
            let expected = if p.source == MixSource::Expert {
                SourceLabel::Expert
            } else {
                SourceLabel::Random
            };
            assert_eq!(t.source_label, Some(expected));
        }
    }

    #[test]
    fn zero_expert_keeps_suboptimal_count() {
        let mut s = spec(2_000, 0);
        s.behavior_kind = PolicyKind::Medium;
        let (ds, _) = generate_mixture(EnvSpec::PointMass2d, &s).unwrap();
        assert_eq!(ds.num_transitions(), 2_000);
    }

    #[test]
    fn insufficient_pool_names_counts() {
        let sub = generate_toy_dataset(EnvSpec::PointMass2d, PolicyKind::Random, 300, 1).unwrap();
        let pool = generate_toy_dataset(EnvSpec::PointMass2d, PolicyKind::Expert, 200, 1).unwrap();
        let err = mix_datasets(&sub, &pool, &spec(300, 3)).unwrap_err();
        assert!(matches!(
            err,
            Error::InsufficientExperts {
                required: 3,
                available: 2
            }
        ));
        assert!(err.to_string().contains('3') && err.to_string().contains('2'));
    }

    #[test]
    fn provenance_is_a_bijection() {
        let sub =
            generate_toy_dataset(EnvSpec::SineWalker1d, PolicyKind::Random, 1_050, 3).unwrap();
        let pool = generate_toy_dataset(EnvSpec::SineWalker1d, PolicyKind::Expert, 500, 3).unwrap();
        let (ds, prov) = mix_with_provenance(&sub, &pool, &spec(1_050, 4)).unwrap();
        let mut seen = std::collections::HashSet::new();
        for (t, p) in ds.trajectories.iter().zip(&prov) {
            assert!(seen.insert((p.source as u8, p.index)));
            let src = match p.source {
                MixSource::Suboptimal => &sub.trajectories[p.index],
                MixSource::Expert => &pool.trajectories[p.index],
            };
            let l = t.len();
            assert_eq!(t.states, src.states.slice(ndarray::s![..l, ..]));
        }
        assert_eq!(seen.len(), 11 + 4);
    }
}
