//! Segment embeddings: windowing, action masking, encoding at `k = 0`, and
//! projection to the unit sphere, with every row traceable to the
//! `(trajectory, timestep)` where its window starts.

mod embed;
mod io;

pub use embed::{
    embed_dataset, embed_dataset_with, project_unit_sphere, EmbedOptions, EmbeddingSet,
    MIN_EMBEDDING_NORM,
};
pub use io::{
    cached_expert_embeddings, decode_embeddings, decode_embeddings_bytes, encode_embeddings,
    expert_cache_path, read_embeddings, write_embeddings, EmbeddingHeader, EMBEDDING_FORMAT,
};
