//! Test-time iterative refinement of text-embedding queries.
//!
//! A query is encoded once, then re-encoded `T` more times with the pooled
//! embeddings of earlier passes injected back into the encoder input. The
//! last state is used for ranking; documents are always encoded once, with
//! no injected state.
//!
//! The numeric code is generic over [`Real`] (`f32` or `f64`); the aliases
//! below fix the scalar for the common cases.

pub mod backends;
pub mod error;
pub mod eval_metrics;
pub mod experiments;
pub mod matrix;
pub mod model;
pub mod retrieval;
pub mod rt_engine;
pub mod scalar;
pub mod toy_encoder;

pub use backends::{AdditiveBackend, AdditiveRefParams, EncoderBackend, RemoteBackend, RemoteConfig, ToyBackend};
pub use error::{Error, Result};
pub use model::{cosine_similarity, l2_normalize, Document, Embedding, Qrels, Query, RunList, ScoredDoc, StopReason, Trajectory};
pub use retrieval::{build_index, search, CorpusIndex};
pub use rt_engine::{refine, refine_batch, RefineConfig, StateWindow};
pub use scalar::Real;

pub type Embedding32 = Embedding<f32>;
pub type Embedding64 = Embedding<f64>;
pub type Trajectory32 = Trajectory<f32>;
pub type Trajectory64 = Trajectory<f64>;
pub type CorpusIndex32 = CorpusIndex<f32>;
pub type CorpusIndex64 = CorpusIndex<f64>;
pub type ToyBackend32 = ToyBackend<f32>;
pub type ToyBackend64 = ToyBackend<f64>;
pub type AdditiveBackend32 = AdditiveBackend<f32>;
pub type AdditiveBackend64 = AdditiveBackend<f64>;
