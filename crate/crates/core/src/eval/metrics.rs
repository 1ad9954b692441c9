use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::distance::DistanceMatrix;
use crate::data::{Identity, ImageRecord};
use crate::error::{Error, Result};

/// Ranks reported in the CMC table.
pub const CMC_RANKS: [usize; 3] = [1, 5, 10];

/// Identity and camera of a retrieval item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ItemMeta {
    pub identity: Identity,
    pub camera: u32,
}

impl From<&ImageRecord> for ItemMeta {
    fn from(r: &ImageRecord) -> Self {
        ItemMeta {
            identity: r.identity,
            camera: r.camera,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Avg,
    Max,
}

impl std::str::FromStr for PoolMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avg" | "mean" => Ok(PoolMode::Avg),
            "max" => Ok(PoolMode::Max),
            _ => Err(Error::Config(format!("unknown pooling `{s}` (expected avg or max)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode", content = "pool")]
pub enum QueryMode {
    Single,
    Multi(PoolMode),
}

/// What an evaluation measured, carried into the report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Protocol {
    pub dataset: String,
    pub query_mode: QueryMode,
    pub reranked: bool,
}

impl Protocol {
    pub fn single(dataset: &str) -> Self {
        Protocol {
            dataset: dataset.to_string(),
            query_mode: QueryMode::Single,
            reranked: false,
        }
    }

    /// Short label such as `SQ`, `MQ` or `SQ+RK`.
    pub fn label(&self) -> String {
        let mode = match self.query_mode {
            QueryMode::Single => "SQ",
            QueryMode::Multi(_) => "MQ",
        };
        if self.reranked {
            format!("{mode}+RK")
        } else {
            mode.to_string()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub protocol: Protocol,
    /// CMC rate at each rank of [`CMC_RANKS`].
    pub cmc: BTreeMap<usize, f64>,
    #[serde(rename = "mAP")]
    pub map: f64,
    /// Average precision per query; `None` for queries without any valid
    /// gallery match, which are left out of every average.
    pub average_precision: Vec<Option<f64>>,
    pub valid_queries: usize,
    pub dropped_queries: usize,
}

impl RankingReport {
    pub fn rank(&self, k: usize) -> f64 {
        self.cmc.get(&k).copied().unwrap_or(f64::NAN)
    }

    pub fn rank1(&self) -> f64 {
        self.rank(1)
    }

    /// One header line and one row, percentages with one decimal.
    pub fn table(&self) -> String {
        let mut head = format!("{:<24}", "Protocol");
        let mut row = format!("{:<24}", format!("{} {}", self.protocol.dataset, self.protocol.label()));
        for k in CMC_RANKS {
            head.push_str(&format!("{:>9}", format!("Rank-{k}")));
            row.push_str(&format!("{:>9.1}", 100.0 * self.rank(k)));
        }
        head.push_str(&format!("{:>9}", "mAP"));
        row.push_str(&format!("{:>9.1}", 100.0 * self.map));
        format!("{head}\n{row}\n")
    }
}

impl fmt::Display for RankingReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.table())
    }
}

/// Gallery indices sorted by distance, ties by index.
pub fn rank_gallery(row: &[f32]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
    order
}

/// Ranked list of one query after the protocol filter, as match flags.
fn filtered_matches(row: &[f32], query: ItemMeta, gallery: &[ItemMeta]) -> Vec<bool> {
    rank_gallery(row)
        .into_iter()
        .filter_map(|j| {
            let g = gallery[j];
            let same_view = g.identity == query.identity && g.camera == query.camera;
            if g.identity.is_junk() || same_view {
                None
            } else {
                Some(!query.identity.is_junk() && g.identity == query.identity)
            }
        })
        .collect()
}

/// Mean of precision at each correct hit.
fn average_precision(matches: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &m) in matches.iter().enumerate() {
        if m {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// CMC and mAP of a query-by-gallery distance matrix.
///
/// For each query, gallery items of junk identity and items sharing both
/// identity and camera with the query are removed before scoring. Queries
/// left without any correct match are dropped from all denominators.
pub fn evaluate(
    dist: &DistanceMatrix,
    query: &[ItemMeta],
    gallery: &[ItemMeta],
    protocol: &Protocol,
) -> Result<RankingReport> {
    if dist.rows != query.len() || dist.cols != gallery.len() {
        return Err(Error::Shape(format!(
            "{}x{} distances for {} queries and {} gallery items",
            dist.rows,
            dist.cols,
            query.len(),
            gallery.len()
        )));
    }
    let mut hits_at = vec![0usize; CMC_RANKS.len()];
    let mut aps = Vec::with_capacity(query.len());
    for (i, &q) in query.iter().enumerate() {
        let matches = filtered_matches(dist.row(i), q, gallery);
        let ap = average_precision(&matches);
        if ap.is_some() {
            let first = matches.iter().position(|&m| m).expect("has a match");
            for (slot, &k) in hits_at.iter_mut().zip(&CMC_RANKS) {
                if first < k {
                    *slot += 1;
                }
            }
        }
        aps.push(ap);
    }
    let valid = aps.iter().flatten().count();
    let dropped = aps.len() - valid;
    if dropped > 0 {
        log::warn!("{dropped} queries have no valid gallery match and were skipped");
    }
    let denom = valid.max(1) as f64;
    Ok(RankingReport {
        protocol: protocol.clone(),
        cmc: CMC_RANKS
            .iter()
            .zip(&hits_at)
            .map(|(&k, &h)| (k, h as f64 / denom))
            .collect(),
        map: aps.iter().flatten().sum::<f64>() / denom,
        average_precision: aps,
        valid_queries: valid,
        dropped_queries: dropped,
    })
}

/// Element-wise mean or max of equally long feature vectors.
pub fn pool_multi_query(features: &[&[f32]], mode: PoolMode) -> Result<Vec<f32>> {
    let Some(first) = features.first() else {
        return Err(Error::Input("cannot pool an empty feature set".into()));
    };
    if features.iter().any(|f| f.len() != first.len()) {
        return Err(Error::Shape("pooled features differ in length".into()));
    }
    let mut out = first.to_vec();
    for f in &features[1..] {
        for (o, v) in out.iter_mut().zip(*f) {
            match mode {
                PoolMode::Avg => *o += v,
                PoolMode::Max => *o = o.max(*v),
            }
        }
    }
    if mode == PoolMode::Avg {
        let n = features.len() as f32;
        out.iter_mut().for_each(|o| *o /= n);
    }
    Ok(out)
}

/// Groups query rows by `(identity, camera)` in order of first appearance.
pub fn group_queries(query: &[ItemMeta]) -> Vec<(ItemMeta, Vec<usize>)> {
    let mut groups: Vec<(ItemMeta, Vec<usize>)> = Vec::new();
    let mut index: BTreeMap<ItemMeta, usize> = BTreeMap::new();
    for (i, &m) in query.iter().enumerate() {
        match index.get(&m) {
            Some(&g) => groups[g].1.push(i),
            None => {
                index.insert(m, groups.len());
                groups.push((m, vec![i]));
            }
        }
    }
    groups
}

/// Multi-query features: one pooled row per `(identity, camera)` group.
pub fn pool_query_rows(data: &[f32], dim: usize, query: &[ItemMeta], mode: PoolMode) -> Result<(Vec<f32>, Vec<ItemMeta>)> {
    let mut pooled = Vec::new();
    let mut metas = Vec::new();
    for (meta, rows) in group_queries(query) {
        let feats: Vec<&[f32]> = rows.iter().map(|&r| &data[r * dim..(r + 1) * dim]).collect();
        pooled.extend(pool_multi_query(&feats, mode)?);
        metas.push(meta);
    }
    Ok((pooled, metas))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(id: i64, cam: u32) -> ItemMeta {
        ItemMeta {
            identity: Identity::from(id),
            camera: cam,
        }
    }

    fn eval1(row: Vec<f32>, q: ItemMeta, gallery: &[ItemMeta]) -> RankingReport {
        let d = DistanceMatrix::new(1, row.len(), row).unwrap();
        evaluate(&d, &[q], gallery, &Protocol::single("toy")).unwrap()
    }

    #[test]
    fn single_positive_first() {
        let r = eval1(vec![0.1, 0.5, 0.9], meta(1, 1), &[meta(1, 2), meta(2, 2), meta(3, 3)]);
        assert_eq!(r.map, 1.0);
        assert_eq!(r.rank1(), 1.0);
    }

    #[test]
    fn two_positives_at_ranks_one_and_three() {
        let r = eval1(
            vec![0.1, 0.2, 0.3, 0.4],
            meta(1, 1),
            &[meta(1, 2), meta(2, 2), meta(1, 3), meta(3, 3)],
        );
        assert!((r.map - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn same_camera_and_junk_are_removed() {
        // ranked: same-view match, junk, distractor, valid match
        let gallery = [meta(1, 1), meta(-1, 2), meta(2, 2), meta(1, 4)];
        let r = eval1(vec![0.0, 0.1, 0.2, 0.3], meta(1, 1), &gallery);
        assert!((r.map - 0.5).abs() < 1e-12);
        assert_eq!(r.rank1(), 0.0);
        assert_eq!(r.rank(5), 1.0);
    }

    #[test]
    fn query_without_positive_is_dropped() {
        let d = DistanceMatrix::new(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let r = evaluate(&d, &[meta(1, 1), meta(9, 1)], &[meta(1, 2), meta(2, 2)], &Protocol::single("t")).unwrap();
        assert_eq!((r.valid_queries, r.dropped_queries), (1, 1));
        assert_eq!(r.map, 1.0);
        assert_eq!(r.average_precision[1], None);
    }

    #[test]
    fn ties_break_by_gallery_index() {
        assert_eq!(rank_gallery(&[0.5, 0.2, 0.5, 0.2]), vec![1, 3, 0, 2]);
    }

    #[test]
    fn pooling_examples() {
        assert_eq!(pool_multi_query(&[&[1.0, 0.0], &[0.0, 2.0]], PoolMode::Max).unwrap(), vec![1.0, 2.0]);
        assert_eq!(pool_multi_query(&[&[1.0, 0.0], &[0.0, 2.0]], PoolMode::Avg).unwrap(), vec![0.5, 1.0]);
        assert_eq!(pool_multi_query(&[&[3.0, -1.0]], PoolMode::Avg).unwrap(), vec![3.0, -1.0]);
        assert!(pool_multi_query(&[], PoolMode::Max).is_err());
    }

    #[test]
    fn groups_follow_first_appearance() {
        let q = [meta(2, 1), meta(1, 1), meta(2, 1), meta(2, 3)];
        let g = group_queries(&q);
        assert_eq!(g.iter().map(|(_, r)| r.clone()).collect::<Vec<_>>(), vec![vec![0, 2], vec![1], vec![3]]);
    }
}
