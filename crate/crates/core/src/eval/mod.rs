//! Retrieval evaluation: distances, CMC/mAP under the Market-1501
//! protocol, multi-query pooling and k-reciprocal re-ranking.

mod distance;
mod metrics;
mod rerank;

pub use distance::{euclidean_distances, pairwise_distances, DistanceMatrix};
pub use metrics::{
    evaluate, group_queries, pool_multi_query, pool_query_rows, rank_gallery, ItemMeta, PoolMode, Protocol,
    QueryMode, RankingReport, CMC_RANKS,
};
pub use rerank::{rerank, RerankConfig};
