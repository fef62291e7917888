//! Deterministic selection of instruction-tuning subsets from large data pools.
//!
//! The crate works on precomputed per-sample artifacts (pooled embeddings,
//! per-token hidden states, loss records) and turns them into ordered,
//! reproducible selections:
//!
//! - [`corpus`]: pool and query-set loading, exact-match deduplication.
//! - [`store`]: the binary shard format and the JSON feature manifest.
//! - [`pooling`]: position-weighted, uniform and last-token pooling.
//! - [`similarity`]: exact streamed cosine top-k.
//! - [`scorers`]: perplexity, IFD, length and random baselines.
//! - [`selection`]: round-robin and mean-max subset construction.
//! - [`flops`]: the selection + training compute model.
//!
//! Numeric code is generic over [`Scalar`]; the aliases at the crate root fix
//! the widths used by the on-disk formats.

pub mod corpus;
pub mod error;
pub mod flops;
pub mod matrix;
pub mod pooling;
pub mod scorers;
pub mod selection;
pub mod similarity;
pub mod store;

mod scalar;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use scalar::Scalar;

/// Embedding rows as stored in shards.
pub type Embeddings = Matrix<f32>;
/// Per-query ranked list at storage precision.
pub type TopK = similarity::TopKList<f32>;
/// Pool-level score table; scores are derived in double precision.
pub type ScoreTable = scorers::ScalarScoreTable<f64>;
/// Per-task max-over-queries scores at storage precision.
pub type TaskScores = selection::TaskScoreTable<f32>;
