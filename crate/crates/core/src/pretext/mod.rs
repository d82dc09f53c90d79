//! Pretext samples: where does a zoomed-in patch sit inside its parent?
//!
//! A parent window `p_y` is drawn at level `y`, one of the `4^n` windows
//! that tile its footprint at level `x = y + n` is picked as the child
//! `p_x`, and the child's row-major index is the label. The inside/outside
//! pair task reuses the same draws and swaps children between two samples
//! half of the time.

mod augment;
mod dataset;
mod oracle;
mod sampler;

pub use augment::{augment, AugmentDraw};
pub use dataset::{
    build_dataset, DatasetInfo, DatasetSpec, PretextShard, PretextTask, DATASET_FILE, SHARD_MAGIC,
    SHARD_VERSION, TRAIN_SHARD, VAL_SHARD,
};
pub use oracle::{locate_oracle, locate_oracle_scored, OracleMatch, TIE_TOLERANCE};
pub use sampler::{
    level_distribution, sample_location, sample_location_with_source, sample_pair, PairSample,
    PretextSample, SampleSource, SamplerConfig, SourceDraw,
};
