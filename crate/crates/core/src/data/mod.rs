//! Dataset ingestion, synthetic data, augmentation and PK batch sampling.

mod image;
mod records;
mod sampler;
mod synthetic;

pub use self::image::{augment_train, load_image, stack_images, ImageTensor, Normalization};
pub use records::{
    load_market_layout, parse_filename, Dataset, DatasetMeta, Identity, ImageRecord, Split,
    SplitCounts, GALLERY_DIR, QUERY_DIR, TRAIN_DIR,
};
pub use sampler::{Batch, BatchIndices, PkSampler, SamplerConfig, SamplerState};
pub use synthetic::{generate_synthetic, SyntheticConfig, SyntheticSummary};
