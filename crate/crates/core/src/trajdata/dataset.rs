use ndarray::{Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::env::{rollout, scripted_action, EnvSpec, PolicyKind, ScriptedActor};
use super::normalize::Normalizer;
use crate::error::{Error, Result};

/// Which role a dataset plays: the reward-free behavioral mixture or the
/// single state-only expert episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Behavioral,
    Expert,
}

/// Generating policy of a trajectory. Only evaluation code reads it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceLabel {
    Expert,
    Medium,
    Random,
}

impl From<PolicyKind> for SourceLabel {
    fn from(k: PolicyKind) -> Self {
        match k {
            PolicyKind::Expert => SourceLabel::Expert,
            PolicyKind::Medium => SourceLabel::Medium,
            PolicyKind::Random => SourceLabel::Random,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// `[L, d_s]`
    pub states: Array2<f32>,
    /// `[L, d_a]` when the dataset is action-labeled.
    pub actions: Option<Array2<f32>>,
    /// The episode ended in a true terminal state (not a time-limit truncation).
    pub terminated: bool,
    /// Held out from every training-facing format.
    pub source_label: Option<SourceLabel>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.nrows() == 0
    }

    pub fn state(&self, t: usize) -> ArrayView1<'_, f32> {
        self.states.row(t)
    }
}

/// One `(s, a, s', terminal)` view into a trajectory.
#[derive(Clone, Copy, Debug)]
pub struct Transition<'a> {
    pub state: ArrayView1<'a, f32>,
    pub action: Option<ArrayView1<'a, f32>>,
    pub next_state: ArrayView1<'a, f32>,
    pub terminal: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryDataset {
    pub kind: DatasetKind,
    pub state_dim: usize,
    /// Zero for state-only datasets.
    pub action_dim: usize,
    pub trajectories: Vec<Trajectory>,
    /// Set when the stored states are normalized with these statistics.
    pub obs_normalizer: Option<Normalizer>,
}

impl TrajectoryDataset {
    pub fn new(
        kind: DatasetKind,
        state_dim: usize,
        action_dim: usize,
        trajectories: Vec<Trajectory>,
    ) -> Result<Self> {
        let ds = TrajectoryDataset {
            kind,
            state_dim,
            action_dim,
            trajectories,
            obs_normalizer: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == DatasetKind::Expert {
            if self.trajectories.len() != 1 {
                return Err(Error::format(format!(
                    "expert dataset must hold exactly one episode, found {}",
                    self.trajectories.len()
                )));
            }
            if self.action_dim != 0 {
                return Err(Error::format("expert dataset must be state-only"));
            }
        }
        for (i, t) in self.trajectories.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::format(format!("trajectory {i} is empty")));
            }
            if t.states.ncols() != self.state_dim {
                return Err(Error::format(format!(
                    "trajectory {i}: state dim {} != {}",
                    t.states.ncols(),
                    self.state_dim
                )));
            }
            match (&t.actions, self.action_dim) {
                (None, 0) => {}
                (Some(a), d) if d > 0 && a.ncols() == d && a.nrows() == t.len() => {}
                _ => {
                    return Err(Error::format(format!(
                        "trajectory {i}: action block inconsistent with d_a={}",
                        self.action_dim
                    )))
                }
            }
        }
        if let Some(n) = &self.obs_normalizer {
            if n.mean.len() != self.state_dim || n.std.len() != self.state_dim {
                return Err(Error::format(
                    "normalizer dimension differs from state dimension",
                ));
            }
        }
        Ok(())
    }

    pub fn has_actions(&self) -> bool {
        self.action_dim > 0
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Number of `(state, action)` rows over all trajectories.
    pub fn num_transitions(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn episode_lengths(&self) -> Vec<usize> {
        self.trajectories.iter().map(Trajectory::len).collect()
    }

    /// Transitions with a successor state. A truncated episode's final row has
    /// no successor and is skipped; a terminated episode's final row is kept
    /// with `terminal = true` (its `next_state` is a placeholder).
    pub fn transitions(&self) -> impl Iterator<Item = Transition<'_>> {
        self.trajectories.iter().flat_map(|traj| {
            let l = traj.len();
            let upto = if traj.terminated {
                l
            } else {
                l.saturating_sub(1)
            };
            (0..upto).map(move |t| {
                let last = t + 1 == l;
                Transition {
                    state: traj.states.row(t),
                    action: traj.actions.as_ref().map(|a| a.row(t)),
                    next_state: traj.states.row(if last { t } else { t + 1 }),
                    terminal: last && traj.terminated,
                }
            })
        })
    }

    /// Source labels per trajectory, for evaluation code only.
    pub fn labels(&self) -> Vec<Option<SourceLabel>> {
        self.trajectories.iter().map(|t| t.source_label).collect()
    }

    /// Drops actions, producing a state-only view of the same states.
    pub fn without_actions(&self) -> TrajectoryDataset {
        let mut out = self.clone();
        out.action_dim = 0;
        for t in &mut out.trajectories {
            t.actions = None;
        }
        out
    }
}

/// Rolls out a scripted policy until exactly `n_transitions` rows are
/// collected; the final episode is truncated to fit.
pub fn generate_toy_dataset(
    env: EnvSpec,
    policy: PolicyKind,
    n_transitions: usize,
    seed: u64,
) -> Result<TrajectoryDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(policy.stream());
    let mut trajectories = Vec::new();
    let mut remaining = n_transitions;
    while remaining > 0 {
        let len = env.episode_len().min(remaining);
        let mut actor = ScriptedActor::new(env, policy);
        let ep = rollout(env, len, &mut rng, |s, r| actor.act(s, r));
        remaining -= ep.states.len();
        trajectories.push(episode_to_trajectory(
            &ep.states,
            Some(&ep.actions),
            ep.terminated,
            Some(policy.into()),
        ));
    }
    TrajectoryDataset::new(
        DatasetKind::Behavioral,
        env.state_dim(),
        env.action_dim(),
        trajectories,
    )
}

/// The single observation-only expert episode.
pub fn generate_expert_demo(env: EnvSpec, seed: u64) -> Result<TrajectoryDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(100 + PolicyKind::Expert.stream());
    let ep = rollout(env, env.episode_len(), &mut rng, |s, r| {
        scripted_action(env, PolicyKind::Expert, s, r)
    });
    let traj = episode_to_trajectory(&ep.states, None, ep.terminated, Some(SourceLabel::Expert));
    TrajectoryDataset::new(DatasetKind::Expert, env.state_dim(), 0, vec![traj])
}

pub(crate) fn episode_to_trajectory(
    states: &[Vec<f32>],
    actions: Option<&[Vec<f32>]>,
    terminated: bool,
    label: Option<SourceLabel>,
) -> Trajectory {
    let ds = states[0].len();
    let s = Array2::from_shape_vec((states.len(), ds), states.concat()).expect("ragged states");
    let a = actions.map(|acts| {
        let da = acts[0].len();
        Array2::from_shape_vec((acts.len(), da), acts.concat()).expect("ragged actions")
    });
    Trajectory {
        states: s,
        actions: a,
        terminated,
        source_label: label,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_exact() {
        let a = generate_toy_dataset(EnvSpec::PointMass2d, PolicyKind::Expert, 1000, 7).unwrap();
        let b = generate_toy_dataset(EnvSpec::PointMass2d, PolicyKind::Expert, 1000, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.num_transitions(), 1000);
        let c = generate_toy_dataset(EnvSpec::PointMass2d, PolicyKind::Random, 250, 7).unwrap();
        assert_eq!(c.episode_lengths(), vec![100, 100, 50]);
    }

    #[test]
    fn empty_generation() {
        let d = generate_toy_dataset(EnvSpec::PointMass2d, PolicyKind::Random, 0, 1).unwrap();
        assert!(d.is_empty());
        assert_eq!((d.state_dim, d.action_dim), (4, 2));
    }

    #[test]
    fn expert_demo_is_state_only_single_episode() {
        let d = generate_expert_demo(EnvSpec::PointMass2d, 3).unwrap();
        assert_eq!(d.kind, DatasetKind::Expert);
        assert_eq!(d.len(), 1);
        assert_eq!(d.trajectories[0].len(), 100);
        assert!(!d.has_actions());
    }

    #[test]
    fn transitions_skip_truncated_tail() {
        let d = generate_toy_dataset(EnvSpec::SineWalker1d, PolicyKind::Random, 200, 2).unwrap();
        assert_eq!(d.transitions().count(), 198);
        let t0 = d.transitions().next().unwrap();
        assert_eq!(t0.next_state, d.trajectories[0].states.row(1));
    }
}
