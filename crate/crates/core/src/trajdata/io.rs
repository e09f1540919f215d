//! Portable dataset file: one UTF-8 JSON header line, then little-endian
//! float32 blocks (all states episode by episode, all actions, and optionally
//! one reward per state row).
//!
//! Source labels never enter this file. They go to a `<path>.labels.json`
//! sidecar that only evaluation code reads.

use std::fs;
use std::io::{BufReader, Cursor, Read};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::dataset::{DatasetKind, SourceLabel, Trajectory, TrajectoryDataset};
use super::normalize::Normalizer;
use crate::error::{Error, Result};
use crate::fsutil;

pub const DATASET_FORMAT: &str = "tge-dataset";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format: String,
    pub schema_version: u32,
    pub d_s: usize,
    pub d_a: usize,
    pub kind: DatasetKind,
    pub episode_lengths: Vec<usize>,
    /// Episodes that ended in a true terminal state; all others are truncations.
    #[serde(default)]
    pub episode_terminals: Vec<bool>,
    pub normalizer: Option<Normalizer>,
    /// Present on annotated datasets: describes the trailing reward block.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation: Option<serde_json::Value>,
}

/// Serializes a dataset, optionally followed by a reward block described by `annotation`.
pub fn encode_dataset(
    ds: &TrajectoryDataset,
    rewards: Option<(&serde_json::Value, &[f32])>,
) -> Result<Vec<u8>> {
    ds.validate()?;
    let header = DatasetHeader {
        format: DATASET_FORMAT.into(),
        schema_version: SCHEMA_VERSION,
        d_s: ds.state_dim,
        d_a: ds.action_dim,
        kind: ds.kind,
        episode_lengths: ds.episode_lengths(),
        episode_terminals: ds.trajectories.iter().map(|t| t.terminated).collect(),
        normalizer: ds.obs_normalizer.clone(),
        annotation: rewards.map(|(a, _)| a.clone()),
    };
    let n = ds.num_transitions();
    if let Some((_, r)) = rewards {
        if r.len() != n {
            return Err(Error::format(format!(
                "{} rewards for {n} transitions",
                r.len()
            )));
        }
    }
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.reserve(4 * n * (ds.state_dim + ds.action_dim + 1));
    for t in &ds.trajectories {
        fsutil::write_f32s(&mut out, t.states.iter().copied())?;
    }
    for t in &ds.trajectories {
        if let Some(a) = &t.actions {
            fsutil::write_f32s(&mut out, a.iter().copied())?;
        }
    }
    if let Some((_, r)) = rewards {
        fsutil::write_f32s(&mut out, r.iter().copied())?;
    }
    Ok(out)
}

/// Inverse of [`encode_dataset`]. Returns the annotation and rewards when present.
pub fn decode_dataset<R: Read>(
    r: R,
) -> Result<(TrajectoryDataset, Option<(serde_json::Value, Vec<f32>)>)> {
    let mut r = BufReader::new(r);
    let line = fsutil::read_header_line(&mut r)?;
    let h: DatasetHeader =
        serde_json::from_str(&line).map_err(|e| Error::format(format!("dataset header: {e}")))?;
    if h.format != DATASET_FORMAT || h.schema_version != SCHEMA_VERSION {
        return Err(Error::format(format!(
            "unsupported dataset format {} v{}",
            h.format, h.schema_version
        )));
    }
    if !h.episode_terminals.is_empty() && h.episode_terminals.len() != h.episode_lengths.len() {
        return Err(Error::format(
            "episode_terminals length differs from episode_lengths",
        ));
    }
    let mut states = Vec::with_capacity(h.episode_lengths.len());
    for &l in &h.episode_lengths {
        let v = fsutil::read_f32s(&mut r, l * h.d_s)?;
        states.push(Array2::from_shape_vec((l, h.d_s), v).expect("sized by header"));
    }
    let mut trajectories = Vec::with_capacity(states.len());
    for (i, s) in states.into_iter().enumerate() {
        let l = s.nrows();
        let actions = if h.d_a > 0 {
            let v = fsutil::read_f32s(&mut r, l * h.d_a)?;
            Some(Array2::from_shape_vec((l, h.d_a), v).expect("sized by header"))
        } else {
            None
        };
        trajectories.push(Trajectory {
            states: s,
            actions,
            terminated: h.episode_terminals.get(i).copied().unwrap_or(false),
            source_label: None,
        });
    }
    let n: usize = h.episode_lengths.iter().sum();
    let rewards = match h.annotation {
        Some(a) => Some((a, fsutil::read_f32s(&mut r, n)?)),
        None => None,
    };
    fsutil::expect_eof(&mut r)?;
    let ds = TrajectoryDataset {
        kind: h.kind,
        state_dim: h.d_s,
        action_dim: h.d_a,
        trajectories,
        obs_normalizer: h.normalizer,
    };
    ds.validate()?;
    Ok((ds, rewards))
}

pub fn labels_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".labels.json");
    PathBuf::from(s)
}

#[derive(Serialize, Deserialize)]
struct LabelsFile {
    labels: Vec<Option<SourceLabel>>,
}

/// Writes the dataset atomically. Source labels, if any, go to the sidecar.
pub fn write_dataset(path: &Path, ds: &TrajectoryDataset) -> Result<()> {
    write_dataset_with(path, ds, None)
}

pub(crate) fn write_dataset_with(
    path: &Path,
    ds: &TrajectoryDataset,
    rewards: Option<(&serde_json::Value, &[f32])>,
) -> Result<()> {
    fsutil::atomic_write(path, &encode_dataset(ds, rewards)?)?;
    let labels = ds.labels();
    if labels.iter().any(Option::is_some) {
        write_labels(path, &labels)?;
    }
    Ok(())
}

pub fn write_labels(dataset_path: &Path, labels: &[Option<SourceLabel>]) -> Result<()> {
    let f = LabelsFile {
        labels: labels.to_vec(),
    };
    fsutil::atomic_write(&labels_path(dataset_path), &serde_json::to_vec_pretty(&f)?)
}

/// Reads a dataset. Source labels are not loaded; see [`read_labels`].
pub fn read_dataset(path: &Path) -> Result<TrajectoryDataset> {
    let (ds, rewards) = decode_dataset(fs::File::open(path)?)?;
    if rewards.is_some() {
        log::debug!("{}: ignoring reward block", path.display());
    }
    Ok(ds)
}

pub(crate) fn read_dataset_with(
    path: &Path,
) -> Result<(TrajectoryDataset, Option<(serde_json::Value, Vec<f32>)>)> {
    decode_dataset(fs::File::open(path)?)
}

/// Per-trajectory labels from the evaluation sidecar.
pub fn read_labels(dataset_path: &Path) -> Result<Vec<Option<SourceLabel>>> {
    let p = labels_path(dataset_path);
    let bytes =
        fs::read(&p).map_err(|e| Error::format(format!("label sidecar {}: {e}", p.display())))?;
    let f: LabelsFile = serde_json::from_slice(&bytes)?;
    Ok(f.labels)
}

/// Decodes from an in-memory buffer.
pub fn decode_dataset_bytes(
    bytes: &[u8],
) -> Result<(TrajectoryDataset, Option<(serde_json::Value, Vec<f32>)>)> {
    decode_dataset(Cursor::new(bytes))
}
