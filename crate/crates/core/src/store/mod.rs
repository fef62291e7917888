//! On-disk feature artifacts.
//!
//! Every binary file starts with the same little-endian header:
//!
//! | offset | size | field                          |
//! |--------|------|--------------------------------|
//! | 0      | 4    | magic `SIFT`                   |
//! | 4      | 4    | u32 format version (1)         |
//! | 8      | 4    | u32 record-type tag            |
//! | 12     | 8    | u64 starting pool index        |
//! | 20     | 8    | u64 record count               |
//! | 28     | 4    | u32 dim                        |
//!
//! followed by a payload whose layout depends on the tag (see [`RecordKind`]).
//! A [`FeatureManifest`] (JSON) lists the shards that make up one store.

mod manifest;
mod shard;

pub use manifest::{
    validate_store, FeatureManifest, FeatureStore, Issue, KindCoverage, ShardEntry,
    ValidationReport, DEFAULT_MAX_TOKENS,
};
pub use shard::{
    read_embeddings, read_header, read_hidden_states, read_losses, read_scores, read_topk,
    write_embeddings, write_hidden_states, write_losses, write_scores, write_topk,
    EmbeddingShard, HiddenStateRecord, LossRecord, RecordKind, ShardHeader, FORMAT_VERSION,
    HEADER_LEN, MAGIC,
};
