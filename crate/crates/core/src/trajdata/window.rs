use ndarray::{s, Array2};

use super::dataset::Trajectory;

/// A fixed-length slice `tau_{t:t+H}` of one trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    /// `[H, d_s]`
    pub states: Array2<f32>,
    /// `[H, d_a]`; all zeros when the trajectory has no actions or actions are masked.
    pub actions: Array2<f32>,
    /// `(trajectory index, start timestep)`
    pub origin: (usize, usize),
}

impl Segment {
    pub fn horizon(&self) -> usize {
        self.states.nrows()
    }

    /// Row-major `[H, d_s + d_a]` input layout for the diffusion model.
    pub fn joint(&self) -> Array2<f32> {
        ndarray::concatenate![ndarray::Axis(1), self.states, self.actions]
    }

    pub fn mask_actions(&mut self) {
        self.actions.fill(0.0);
    }
}

/// Window start offsets for a trajectory of length `len`.
pub fn window_starts(len: usize, horizon: usize, stride: usize) -> Vec<usize> {
    assert!(
        horizon >= 1 && stride >= 1,
        "horizon and stride must be positive"
    );
    if len <= horizon {
        return vec![0];
    }
    (0..=len - horizon).step_by(stride).collect()
}

/// The segment starting at `start`. Rows past the end repeat the final state
/// (terminal hold) with zero actions.
pub fn segment_at(
    traj: &Trajectory,
    traj_index: usize,
    start: usize,
    horizon: usize,
    action_dim: usize,
) -> Segment {
    let len = traj.len();
    assert!(
        start < len,
        "segment start {start} outside trajectory of length {len}"
    );
    let ds = traj.states.ncols();
    let mut states = Array2::zeros((horizon, ds));
    let mut actions = Array2::zeros((horizon, action_dim));
    let avail = (len - start).min(horizon);
    states
        .slice_mut(s![..avail, ..])
        .assign(&traj.states.slice(s![start..start + avail, ..]));
    if let Some(a) = &traj.actions {
        if a.ncols() == action_dim {
            actions
                .slice_mut(s![..avail, ..])
                .assign(&a.slice(s![start..start + avail, ..]));
        }
    }
    let last = traj.states.row(len - 1);
    for r in avail..horizon {
        states.row_mut(r).assign(&last);
    }
    Segment {
        states,
        actions,
        origin: (traj_index, start),
    }
}

/// Overlapping windows of length `horizon` starting at `0, stride, 2 stride, ..`
/// up to `L - H`. A trajectory shorter than `horizon` yields one padded window.
pub fn sliding_windows(traj: &Trajectory, horizon: usize, stride: usize) -> Vec<Segment> {
    sliding_windows_indexed(traj, 0, horizon, stride)
}

pub(crate) fn sliding_windows_indexed(
    traj: &Trajectory,
    traj_index: usize,
    horizon: usize,
    stride: usize,
) -> Vec<Segment> {
    let da = traj.actions.as_ref().map_or(0, |a| a.ncols());
    window_starts(traj.len(), horizon, stride)
        .into_iter()
        .map(|t| segment_at(traj, traj_index, t, horizon, da))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn ramp(len: usize) -> Trajectory {
        Trajectory {
            states: Array2::from_shape_fn((len, 2), |(t, j)| (t * 10 + j) as f32),
            actions: Some(Array2::from_shape_fn((len, 1), |(t, _)| t as f32 + 0.5)),
            terminated: false,
            source_label: None,
        }
    }

    #[test]
    fn window_counts() {
        let w = sliding_windows(&ramp(100), 32, 1);
        assert_eq!(w.len(), 69);
        assert_eq!(w[68].origin, (0, 68));
        assert_eq!(w[68].states.row(31)[0], 990.0);
        assert_eq!(sliding_windows(&ramp(32), 32, 1).len(), 1);
    }

    #[test]
    fn short_trajectory_terminal_hold() {
        let w = sliding_windows(&ramp(10), 32, 1);
        assert_eq!(w.len(), 1);
        let seg = &w[0];
        assert_eq!(seg.horizon(), 32);
        for r in 9..32 {
            assert_eq!(seg.states.row(r), ramp(10).states.row(9));
        }
        assert_eq!(seg.actions[[9, 0]], 9.5);
        assert!(seg.actions.slice(s![10.., ..]).iter().all(|&a| a == 0.0));
        assert_eq!(seg.joint().shape(), &[32, 3]);
    }

    proptest! {
        #[test]
        fn window_count_identity(len in 1usize..300, h in 1usize..64, stride in 1usize..10) {
            let n = window_starts(len, h, stride).len();
            if len >= h {
                prop_assert_eq!(n, (len - h) / stride + 1);
            } else {
                prop_assert_eq!(n, 1);
            }
        }
    }
}
