//! Embedding file: a JSON header line, the `[N, d_z]` float32 matrix and the
//! origin table as `2N` little-endian u32.

use std::fs;
use std::io::{BufReader, Cursor, Read};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::embed::{embed_dataset_with, EmbedOptions, EmbeddingSet};
use crate::diffusion::DiffusionModel;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::trajdata::{read_dataset, DatasetKind};

pub const EMBEDDING_FORMAT: &str = "tge-embeddings";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingHeader {
    pub format: String,
    pub schema_version: u32,
    pub n: usize,
    pub d_z: usize,
    pub source_kind: DatasetKind,
    pub model_hash: String,
    pub horizon: usize,
    pub stride: usize,
}

pub fn encode_embeddings(set: &EmbeddingSet) -> Result<Vec<u8>> {
    let header = EmbeddingHeader {
        format: EMBEDDING_FORMAT.into(),
        schema_version: 1,
        n: set.len(),
        d_z: set.dim(),
        source_kind: set.source_kind,
        model_hash: set.model_hash.clone(),
        horizon: set.horizon,
        stride: set.stride,
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    fsutil::write_f32s(&mut out, set.vectors.iter().copied())?;
    let mut table = Vec::with_capacity(2 * set.len());
    for &(t, s) in &set.origins {
        let t = u32::try_from(t).map_err(|_| Error::format("trajectory index exceeds u32"))?;
        let s = u32::try_from(s).map_err(|_| Error::format("timestep exceeds u32"))?;
        table.extend([t, s]);
    }
    fsutil::write_u32s(&mut out, table)?;
    Ok(out)
}

pub fn decode_embeddings<R: Read>(r: R) -> Result<EmbeddingSet> {
    let mut r = BufReader::new(r);
    let line = fsutil::read_header_line(&mut r)?;
    let h: EmbeddingHeader =
        serde_json::from_str(&line).map_err(|e| Error::format(format!("embedding header: {e}")))?;
    if h.format != EMBEDDING_FORMAT || h.schema_version != 1 {
        return Err(Error::format(format!(
            "unsupported embedding format {} v{}",
            h.format, h.schema_version
        )));
    }
    let v = fsutil::read_f32s(&mut r, h.n * h.d_z)?;
    let vectors = Array2::from_shape_vec((h.n, h.d_z), v).expect("sized by header");
    let table = fsutil::read_u32s(&mut r, 2 * h.n)?;
    fsutil::expect_eof(&mut r)?;
    let origins = table
        .chunks_exact(2)
        .map(|c| (c[0] as usize, c[1] as usize))
        .collect();
    let set = EmbeddingSet {
        vectors,
        origins,
        source_kind: h.source_kind,
        model_hash: h.model_hash,
        horizon: h.horizon,
        stride: h.stride,
    };
    set.validate()?;
    Ok(set)
}

pub fn write_embeddings(path: &Path, set: &EmbeddingSet) -> Result<()> {
    fsutil::atomic_write(path, &encode_embeddings(set)?)
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingSet> {
    decode_embeddings(fs::File::open(path)?)
}

pub fn decode_embeddings_bytes(bytes: &[u8]) -> Result<EmbeddingSet> {
    decode_embeddings(Cursor::new(bytes))
}

/// Sidecar next to an expert dataset file holding its embeddings under one model.
pub fn expert_cache_path(dataset_path: &Path, model_hash: &str) -> PathBuf {
    let mut s = dataset_path.as_os_str().to_owned();
    s.push(format!(".emb-{model_hash}.bin"));
    PathBuf::from(s)
}

/// Expert embeddings for the dataset at `dataset_path`, computed once per
/// model checkpoint and reused from the sidecar afterwards.
pub fn cached_expert_embeddings(
    model: &DiffusionModel,
    dataset_path: &Path,
    encode_step: usize,
) -> Result<EmbeddingSet> {
    let cache = expert_cache_path(dataset_path, model.hash());
    if encode_step == 0 && cache.exists() {
        match read_embeddings(&cache) {
            Ok(set) if set.model_hash == model.hash() && set.horizon == model.config.horizon => {
                log::info!("reusing expert embeddings from {}", cache.display());
                return Ok(set);
            }
            Ok(_) => log::warn!(
                "stale expert embedding cache {}; recomputing",
                cache.display()
            ),
            Err(e) => log::warn!(
                "unreadable expert embedding cache {}: {e}; recomputing",
                cache.display()
            ),
        }
    }
    let ds = read_dataset(dataset_path)?;
    if ds.kind != DatasetKind::Expert {
        return Err(Error::config(format!(
            "{} is not an expert dataset",
            dataset_path.display()
        )));
    }
    let opts = EmbedOptions {
        encode_step,
        ..Default::default()
    };
    let set = embed_dataset_with(model, &ds, &opts)?;
    if encode_step == 0 {
        write_embeddings(&cache, &set)?;
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::project_unit_sphere;
    use ndarray::Array1;

    fn sample_set() -> EmbeddingSet {
        let rows: Vec<Array1<f32>> = (0..5)
            .map(|i| {
                project_unit_sphere(
                    Array1::from(vec![i as f32 + 0.5, -1.0, 0.25 * i as f32]).view(),
                )
                .unwrap()
            })
            .collect();
        let mut vectors = Array2::zeros((5, 3));
        for (i, r) in rows.iter().enumerate() {
            vectors.row_mut(i).assign(r);
        }
        EmbeddingSet {
            vectors,
            origins: vec![(0, 0), (0, 1), (0, 2), (1, 0), (1, 1)],
            source_kind: DatasetKind::Behavioral,
            model_hash: "abc".into(),
            horizon: 4,
            stride: 1,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let set = sample_set();
        let bytes = encode_embeddings(&set).unwrap();
        let back = decode_embeddings_bytes(&bytes).unwrap();
        assert_eq!(back, set);
        assert_eq!(encode_embeddings(&back).unwrap(), bytes);
    }

    #[test]
    fn corrupt_files_rejected() {
        let bytes = encode_embeddings(&sample_set()).unwrap();
        assert!(decode_embeddings_bytes(&bytes[..bytes.len() - 2]).is_err());
        let mut extra = bytes.clone();
        extra.push(1);
        assert!(decode_embeddings_bytes(&extra).is_err());
        let mut dup = sample_set();
        dup.origins[1] = (0, 0);
        assert!(decode_embeddings_bytes(&encode_embeddings(&dup).unwrap()).is_err());
    }
}
