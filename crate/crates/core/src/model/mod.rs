//! The Multiple Granularity Network: shared ResNet trunk, per-branch
//! stripe pooling and reduction, and bias-free classifier heads.

mod config;
mod features;
mod head;
mod layers;
mod mgn;
mod params;
mod pretrained;

pub use config::{BackboneKind, BackboneSpec, BranchConfig, Landmark, ModelConfig};
pub use features::{BranchEmbedding, EmbeddingBundle, FeatureId, FeatureKind};
pub use head::{classifier_logits, ClassifierHead};
pub use mgn::{build_model, partition_stripes, Mgn};
pub use params::{Param, ParamKind, ParamStore};
pub use pretrained::{LoadReport, WeightMapping};
