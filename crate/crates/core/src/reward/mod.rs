//! Surrogate rewards from exact top-`m` expert neighbors in embedding space.
//!
//! `r(s_t) = 1/m sum f(||z_t - z_E|| / sigma)` over the `m` nearest expert
//! embeddings, with `f` logarithmic by default. The particle cross-entropy
//! estimator uses the same search but averages distances inside the log.

mod annotate;
mod entropy;
mod kernel;
mod knn;

pub use annotate::{
    annotate, normalize_rewards, raw_state_rewards, read_annotated, reward_for_state,
    reward_from_distances, reward_with_index, write_annotated, AnnotatedDataset, AnnotationInfo,
    NormalizationParams, RewardConfig, RewardNormalization,
};
pub use entropy::{hypersphere_volume, particle_cross_entropy, particle_cross_entropy_sets};
pub use kernel::{KernelKind, KernelSpec};
pub use knn::{knn, KnnIndex, Neighbor};
