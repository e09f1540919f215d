//! Toy environments, trajectory datasets, mixtures, windows and normalization.

mod dataset;
pub mod env;
mod io;
mod mix;
mod normalize;
mod window;

pub use dataset::{
    generate_expert_demo, generate_toy_dataset, DatasetKind, SourceLabel, Trajectory,
    TrajectoryDataset, Transition,
};
pub use env::{
    rollout, scripted_action, EnvSpec, Episode, PolicyKind, ReferenceReturns, ScriptedActor, ToyEnv,
};
pub use io::{
    decode_dataset, decode_dataset_bytes, encode_dataset, labels_path, read_dataset, read_labels,
    write_dataset, write_labels, DatasetHeader, DATASET_FORMAT, SCHEMA_VERSION,
};
pub(crate) use io::{read_dataset_with, write_dataset_with};
pub use mix::{
    generate_mixture, mix_datasets, mix_with_provenance, MixSource, MixtureSpec, Provenance,
};
pub use normalize::{normalize_observations, Normalizer};
pub use window::{segment_at, sliding_windows, window_starts, Segment};
