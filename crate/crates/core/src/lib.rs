//! Multiple Granularity Network for person re-identification.
//!
//! A ResNet trunk forks into a global branch and striped part branches.
//! Each branch emits max-pooled global and stripe features that are
//! reduced to 256 dimensions; the concatenation of all reduced features is
//! the retrieval embedding. Training combines per-feature softmax
//! classification with batch-hard triplet loss on the global features.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod infer;
pub mod loss;
pub mod model;
pub mod ops;
pub mod train;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use eval::{DistanceMatrix, RankingReport};
pub use infer::FeatureMatrix;
pub use loss::{LossConfig, LossReport};
pub use model::{build_model, EmbeddingBundle, FeatureId, Mgn, ModelConfig};
pub use train::{AblationVariant, TrainConfig};
