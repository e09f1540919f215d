use ndarray::{Array1, Array2, Array3, ArrayView1, Axis};
use rayon::prelude::*;

use crate::diffusion::DiffusionModel;
use crate::error::{Error, Result};
use crate::trajdata::{segment_at, window_starts, DatasetKind, TrajectoryDataset};

/// Pre-projection norms at or below this are treated as a broken encoder.
pub const MIN_EMBEDDING_NORM: f64 = 1e-12;

/// Segments encoded per model call.
const ENCODE_CHUNK: usize = 256;

/// Unit-norm segment embeddings with back-pointers into the source dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    /// `[N, d_z]`, every row unit-norm.
    pub vectors: Array2<f32>,
    /// `(trajectory, start timestep)` per row, sorted.
    pub origins: Vec<(usize, usize)>,
    pub source_kind: DatasetKind,
    pub model_hash: String,
    pub horizon: usize,
    pub stride: usize,
}

impl EmbeddingSet {
    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f32> {
        self.vectors.row(i)
    }

    /// Row index of the window starting at `(trajectory, t)`.
    pub fn find(&self, origin: (usize, usize)) -> Option<usize> {
        self.origins.binary_search(&origin).ok()
    }

    /// Checks the set-level invariants: unit rows, unique sorted origins.
    pub fn validate(&self) -> Result<()> {
        if self.origins.len() != self.len() {
            return Err(Error::format(format!(
                "{} origins for {} embeddings",
                self.origins.len(),
                self.len()
            )));
        }
        if self.origins.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::format("embedding origins are not unique and sorted"));
        }
        for (i, row) in self.vectors.rows().into_iter().enumerate() {
            let n = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            if (n - 1.0).abs() > 1e-5 {
                return Err(Error::format(format!("embedding row {i} has norm {n}")));
            }
        }
        Ok(())
    }
}

/// Knobs of [`embed_dataset_with`]. The defaults are the pipeline's behavior.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbedOptions {
    pub stride: usize,
    /// Diffusion step fed to the encoder; 0 means clean input.
    pub encode_step: usize,
    /// Feed true actions for behavioral segments instead of zeros. Off by
    /// default so that rewards depend on states alone.
    pub keep_actions: bool,
}

impl Default for EmbedOptions {
    fn default() -> Self {
        EmbedOptions {
            stride: 1,
            encode_step: 0,
            keep_actions: false,
        }
    }
}

/// `z / ||z||`.
pub fn project_unit_sphere(z: ArrayView1<'_, f32>) -> Result<Array1<f32>> {
    let norm = z.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
    if norm <= MIN_EMBEDDING_NORM || !norm.is_finite() {
        return Err(Error::DegenerateEmbedding { norm, origin: None });
    }
    Ok(z.mapv(|v| (v as f64 / norm) as f32))
}

/// Embeds every window of `dataset` with the model's encoder at horizon `h`.
pub fn embed_dataset(
    model: &DiffusionModel,
    dataset: &TrajectoryDataset,
    h: usize,
    stride: usize,
) -> Result<EmbeddingSet> {
    if h != model.config.horizon {
        return Err(Error::config(format!(
            "embedding horizon {h} differs from the model horizon {}",
            model.config.horizon
        )));
    }
    embed_dataset_with(
        model,
        dataset,
        &EmbedOptions {
            stride,
            ..Default::default()
        },
    )
}

pub fn embed_dataset_with(
    model: &DiffusionModel,
    dataset: &TrajectoryDataset,
    opts: &EmbedOptions,
) -> Result<EmbeddingSet> {
    model.check_normalizer(dataset)?;
    if dataset.state_dim != model.state_dim {
        return Err(Error::Shape {
            layer: "embed_dataset".into(),
            expected: format!("state dim {}", model.state_dim),
            got: format!("state dim {}", dataset.state_dim),
        });
    }
    if opts.stride == 0 {
        return Err(Error::config("embedding stride must be at least 1"));
    }
    let h = model.config.horizon;
    let stride = match dataset.kind {
        DatasetKind::Expert => {
            if opts.stride != 1 {
                log::debug!(
                    "expert windows always use stride 1 (requested {})",
                    opts.stride
                );
            }
            1
        }
        DatasetKind::Behavioral => opts.stride,
    };
    let keep = opts.keep_actions
        && dataset.kind == DatasetKind::Behavioral
        && dataset.action_dim == model.action_dim;
    let origins: Vec<(usize, usize)> = dataset
        .trajectories
        .iter()
        .enumerate()
        .flat_map(|(i, t)| {
            window_starts(t.len(), h, stride)
                .into_iter()
                .map(move |s| (i, s))
        })
        .collect();
    let dz = model.config.d_z;
    let da = model.action_dim;
    let chunks: Vec<Result<Array2<f32>>> = origins
        .par_chunks(ENCODE_CHUNK)
        .map(|chunk| {
            let mut batch = Array3::<f32>::zeros((chunk.len(), h, model.transition_dim()));
            for (b, &(ti, start)) in chunk.iter().enumerate() {
                let mut seg = segment_at(&dataset.trajectories[ti], ti, start, h, da);
                if !keep {
                    seg.mask_actions();
                }
                batch.index_axis_mut(Axis(0), b).assign(&seg.joint());
            }
            let z = model.encode_batch(&batch, opts.encode_step)?;
            let mut out = Array2::<f32>::zeros((chunk.len(), dz));
            for (b, row) in z.rows().into_iter().enumerate() {
                let unit = project_unit_sphere(row).map_err(|e| match e {
                    Error::DegenerateEmbedding { norm, .. } => Error::DegenerateEmbedding {
                        norm,
                        origin: Some(chunk[b]),
                    },
                    other => other,
                })?;
                out.row_mut(b).assign(&unit);
            }
            Ok(out)
        })
        .collect();
    let mut vectors = Array2::<f32>::zeros((origins.len(), dz));
    let mut at = 0;
    for c in chunks {
        let c = c?;
        vectors
            .slice_mut(ndarray::s![at..at + c.nrows(), ..])
            .assign(&c);
        at += c.nrows();
    }
    Ok(EmbeddingSet {
        vectors,
        origins,
        source_kind: dataset.kind,
        model_hash: model.hash().to_string(),
        horizon: h,
        stride,
    })
}
