//! Synthetic unreliable partial-label data: label-noise transition
//! matrices, candidate-set generation, augmentations and the on-disk format.

mod augment;
mod format;
mod synth;
mod transition;

pub use augment::{mix, mixup_inputs, sample_beta, strong_augment, weak_augment, MixupDraw};
pub use format::{decode_dataset, read_dataset, write_dataset, MAGIC, VERSION};
pub use synth::{
    generate_candidate_set, make_dataset, split_sizes, Dataset, DatasetStats, FeatureMode, Split, SynthConfig,
};
pub use transition::{circulant_transition, corrupt_label, uniform_transition, TransitionMatrix};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("malformed dataset: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
