use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use super::dataset::TrajectoryDataset;
use crate::error::{Error, Result};
use crate::fsutil;

/// Per-dimension observation statistics, fit on the behavioral data and reused
/// verbatim for the expert episode and for policy evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalizer {
    pub const STD_FLOOR: f64 = 1e-6;

    /// Fits mean and (population) std over every state row, accumulating in f64.
    pub fn fit(dataset: &TrajectoryDataset) -> Result<Self> {
        let n = dataset.num_transitions();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let d = dataset.state_dim;
        let mut sum = vec![0.0f64; d];
        for t in &dataset.trajectories {
            for row in t.states.rows() {
                for (s, &x) in sum.iter_mut().zip(row) {
                    *s += x as f64;
                }
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let mut sq = vec![0.0f64; d];
        for t in &dataset.trajectories {
            for row in t.states.rows() {
                for ((s, &x), m) in sq.iter_mut().zip(row).zip(&mean) {
                    let c = x as f64 - m;
                    *s += c * c;
                }
            }
        }
        Ok(Normalizer {
            mean: mean.iter().map(|&m| m as f32).collect(),
            std: sq
                .iter()
                .map(|s| (s / n as f64).sqrt().max(Self::STD_FLOOR) as f32)
                .collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Stable identifier of the statistics (hash of their little-endian bytes).
    pub fn hash(&self) -> String {
        let mut bytes = Vec::with_capacity(8 * self.dim());
        for v in self.mean.iter().chain(&self.std) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fsutil::short_hash(&bytes)
    }

    pub fn normalize_row(&self, x: ArrayView1<'_, f32>) -> Array1<f32> {
        Array1::from_iter(
            x.iter()
                .zip(&self.mean)
                .zip(&self.std)
                .map(|((&x, &m), &s)| ((x as f64 - m as f64) / s as f64) as f32),
        )
    }

    pub fn normalize_slice(&self, x: &[f32]) -> Vec<f32> {
        self.normalize_row(ArrayView1::from(x)).to_vec()
    }

    pub fn normalize(&self, x: &Array2<f32>) -> Array2<f32> {
        let mut out = x.clone();
        for mut row in out.axis_iter_mut(Axis(0)) {
            for ((v, &m), &s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = ((*v as f64 - m as f64) / s as f64) as f32;
            }
        }
        out
    }

    pub fn denormalize(&self, x: &Array2<f32>) -> Array2<f32> {
        let mut out = x.clone();
        for mut row in out.axis_iter_mut(Axis(0)) {
            for ((v, &m), &s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v as f64 * s as f64 + m as f64) as f32;
            }
        }
        out
    }

    /// Normalizes the states of a raw dataset and attaches `self` to it.
    pub fn apply(&self, dataset: &TrajectoryDataset) -> Result<TrajectoryDataset> {
        if dataset.obs_normalizer.is_some() {
            return Err(Error::format("dataset is already normalized"));
        }
        if dataset.state_dim != self.dim() {
            return Err(Error::NormalizerMismatch {
                expected: format!("{} dims", self.dim()),
                got: format!("{} dims", dataset.state_dim),
            });
        }
        let mut out = dataset.clone();
        for t in &mut out.trajectories {
            t.states = self.normalize(&t.states);
        }
        out.obs_normalizer = Some(self.clone());
        Ok(out)
    }
}

/// Fits a normalizer on `dataset` and returns the normalized copy with it.
pub fn normalize_observations(
    dataset: &TrajectoryDataset,
) -> Result<(TrajectoryDataset, Normalizer)> {
    let norm = Normalizer::fit(dataset)?;
    let out = norm.apply(dataset)?;
    Ok((out, norm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajdata::{generate_toy_dataset, DatasetKind, EnvSpec, PolicyKind, Trajectory};
    use ndarray::array;

    fn tiny(states: Array2<f32>) -> TrajectoryDataset {
        let d = states.ncols();
        let t = Trajectory {
            states,
            actions: None,
            terminated: false,
            source_label: None,
        };
        TrajectoryDataset::new(DatasetKind::Behavioral, d, 0, vec![t]).unwrap()
    }

    #[test]
    fn constant_dimension_maps_to_zero() {
        let ds = tiny(array![[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]]);
        let (out, n) = normalize_observations(&ds).unwrap();
        assert_eq!(n.std[1], 1e-6);
        assert!(out.trajectories[0]
            .states
            .column(1)
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let ds = TrajectoryDataset::new(DatasetKind::Behavioral, 3, 0, vec![]).unwrap();
        assert!(matches!(
            normalize_observations(&ds),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn normalized_mean_and_round_trip() {
        let ds = generate_toy_dataset(EnvSpec::PointMass2d, PolicyKind::Medium, 1500, 4).unwrap();
        let (out, n) = normalize_observations(&ds).unwrap();
        for j in 0..ds.state_dim {
            let (mut s, mut c) = (0.0f64, 0usize);
            for t in &out.trajectories {
                for &v in t.states.column(j) {
                    s += v as f64;
                    c += 1;
                }
            }
            assert!((s / c as f64).abs() < 1e-6, "dim {j} mean {}", s / c as f64);
        }
        for (raw, normed) in ds.trajectories.iter().zip(&out.trajectories) {
            let back = n.denormalize(&normed.states);
            for (&a, &b) in raw.states.iter().zip(back.iter()) {
                assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn double_normalization_rejected() {
        let ds = tiny(array![[1.0], [2.0]]);
        let (out, n) = normalize_observations(&ds).unwrap();
        assert!(n.apply(&out).is_err());
        assert_eq!(n.hash(), Normalizer::fit(&ds).unwrap().hash());
    }
}
