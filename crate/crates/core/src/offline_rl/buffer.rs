use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::reward::AnnotatedDataset;
use crate::trajdata::{Normalizer, TrajectoryDataset};

/// Flat transition arrays `(s, a, r, s', a', done)` built from an annotated
/// dataset. `a'` is the dataset action at `s'` (the critic-side BC target);
/// for terminal rows it repeats `a` and is never used.
#[derive(Clone, Debug)]
pub struct TransitionBuffer {
    pub states: Array2<f32>,
    pub actions: Array2<f32>,
    pub rewards: Array1<f32>,
    pub next_states: Array2<f32>,
    pub next_actions: Array2<f32>,
    pub terminals: Array1<f32>,
    pub obs_normalizer: Option<Normalizer>,
}

/// A sampled minibatch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub states: Array2<f32>,
    pub actions: Array2<f32>,
    pub rewards: Array1<f32>,
    pub next_states: Array2<f32>,
    pub next_actions: Array2<f32>,
    pub terminals: Array1<f32>,
}

impl TransitionBuffer {
    pub fn from_annotated(ann: &AnnotatedDataset) -> Result<Self> {
        Self::from_parts(&ann.dataset, &ann.rewards)
    }

    /// `rewards` holds one value per state row, trajectory by trajectory.
    pub fn from_parts(ds: &TrajectoryDataset, rewards: &[f32]) -> Result<Self> {
        if !ds.has_actions() {
            return Err(Error::MissingActions);
        }
        if rewards.len() != ds.num_transitions() {
            return Err(Error::format(format!(
                "{} rewards for {} rows",
                rewards.len(),
                ds.num_transitions()
            )));
        }
        let (d_s, d_a) = (ds.state_dim, ds.action_dim);
        let mut s = Vec::new();
        let mut a = Vec::new();
        let mut r = Vec::new();
        let mut s2 = Vec::new();
        let mut a2 = Vec::new();
        let mut done = Vec::new();
        let mut offset = 0;
        for traj in &ds.trajectories {
            let l = traj.len();
            let acts = traj.actions.as_ref().expect("checked above");
            let upto = if traj.terminated {
                l
            } else {
                l.saturating_sub(1)
            };
            for t in 0..upto {
                let last = t + 1 == l;
                let nt = if last { t } else { t + 1 };
                s.extend(traj.states.row(t).iter());
                a.extend(acts.row(t).iter());
                r.push(rewards[offset + t]);
                s2.extend(traj.states.row(nt).iter());
                a2.extend(acts.row(nt).iter());
                done.push(if last && traj.terminated { 1.0 } else { 0.0 });
            }
            offset += l;
        }
        let n = r.len();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        Ok(TransitionBuffer {
            states: Array2::from_shape_vec((n, d_s), s).expect("sized"),
            actions: Array2::from_shape_vec((n, d_a), a).expect("sized"),
            rewards: Array1::from(r),
            next_states: Array2::from_shape_vec((n, d_s), s2).expect("sized"),
            next_actions: Array2::from_shape_vec((n, d_a), a2).expect("sized"),
            terminals: Array1::from(done),
            obs_normalizer: ds.obs_normalizer.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn state_dim(&self) -> usize {
        self.states.ncols()
    }

    pub fn action_dim(&self) -> usize {
        self.actions.ncols()
    }

    pub fn gather(&self, idx: &[usize]) -> Batch {
        Batch {
            states: self.states.select(Axis(0), idx),
            actions: self.actions.select(Axis(0), idx),
            rewards: self.rewards.select(Axis(0), idx),
            next_states: self.next_states.select(Axis(0), idx),
            next_actions: self.next_actions.select(Axis(0), idx),
            terminals: self.terminals.select(Axis(0), idx),
        }
    }

    /// Uniform minibatch with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Batch {
        let idx: Vec<usize> = (0..batch_size)
            .map(|_| rng.random_range(0..self.len()))
            .collect();
        self.gather(&idx)
    }

    pub fn reward_range(&self) -> (f32, f32) {
        self.rewards
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &r| {
                (lo.min(r), hi.max(r))
            })
    }
}
