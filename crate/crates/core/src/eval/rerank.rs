//! k-reciprocal re-ranking.
//!
//! Queries and gallery are pooled into one set of `Q + G` items. Each item
//! gets a sparse neighborhood vector over its (expanded) k-reciprocal
//! neighbors, weighted by `exp(-d)`, averaged over its `k2` nearest
//! neighbors. The Jaccard distance between neighborhood vectors is blended
//! with the original distance: `λ·d + (1 − λ)·d_J`.
//!
//! Distances are squared and each item's row is divided by the largest
//! squared distance to that item. Only the top `k1 + 1` ranks of every
//! item are kept, so memory grows linearly with the number of items.

use serde::{Deserialize, Serialize};

use super::distance::DistanceMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RerankConfig {
    pub k1: usize,
    pub k2: usize,
    pub lambda: f64,
}

impl Default for RerankConfig {
    fn default() -> Self {
        RerankConfig {
            k1: 20,
            k2: 6,
            lambda: 0.3,
        }
    }
}

/// The joint `(Q + G) × (Q + G)` distance matrix, normalized, read on demand.
struct Joint<'a> {
    qg: &'a DistanceMatrix,
    qq: &'a DistanceMatrix,
    gg: &'a DistanceMatrix,
    q: usize,
    /// Largest squared distance in each column of the joint matrix.
    col_max: Vec<f64>,
}

impl<'a> Joint<'a> {
    fn new(qg: &'a DistanceMatrix, qq: &'a DistanceMatrix, gg: &'a DistanceMatrix) -> Self {
        let q = qg.rows;
        let mut joint = Joint {
            qg,
            qq,
            gg,
            q,
            col_max: Vec::new(),
        };
        let n = joint.len();
        joint.col_max = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                let v = joint.raw_sq(i, j);
                if v > joint.col_max[j] {
                    joint.col_max[j] = v;
                }
            }
        }
        joint
    }

    fn len(&self) -> usize {
        self.q + self.gg.rows
    }

    fn raw_sq(&self, i: usize, j: usize) -> f64 {
        let q = self.q;
        let d = match (i < q, j < q) {
            (true, true) => self.qq.get(i, j),
            (true, false) => self.qg.get(i, j - q),
            (false, true) => self.qg.get(j, i - q),
            (false, false) => self.gg.get(i - q, j - q),
        } as f64;
        d * d
    }

    /// Normalized distance from item `i` to item `j`: the joint squared
    /// distance matrix divided column-wise by its maxima, then transposed.
    fn dist(&self, i: usize, j: usize) -> f64 {
        let m = self.col_max[i];
        if m > 0.0 {
            self.raw_sq(j, i) / m
        } else {
            0.0
        }
    }

    /// The `k` nearest items to `i` (itself normally first), ties by index.
    fn top_k(&self, i: usize, k: usize) -> Vec<usize> {
        let n = self.len();
        let row: Vec<f64> = (0..n).map(|j| self.dist(i, j)).collect();
        let mut order: Vec<usize> = (0..n).collect();
        let cmp = |a: &usize, b: &usize| row[*a].total_cmp(&row[*b]).then(a.cmp(b));
        if k < n {
            order.select_nth_unstable_by(k, cmp);
            order.truncate(k);
        }
        order.sort_by(cmp);
        order
    }
}

/// Members of `ranks[i][..=k]` that also have `i` in their own top `k + 1`.
fn k_reciprocal(ranks: &[Vec<usize>], i: usize, k: usize) -> Vec<usize> {
    ranks[i][..=k]
        .iter()
        .copied()
        .filter(|&c| ranks[c][..=k].contains(&i))
        .collect()
}

/// Sparse row: sorted `(column, value)` pairs.
type SparseRow = Vec<(usize, f64)>;

/// Re-ranked query-by-gallery distances.
pub fn rerank(
    dist_qg: &DistanceMatrix,
    dist_qq: &DistanceMatrix,
    dist_gg: &DistanceMatrix,
    config: &RerankConfig,
) -> Result<DistanceMatrix> {
    let (q, g) = (dist_qg.rows, dist_qg.cols);
    if (dist_qq.rows, dist_qq.cols) != (q, q) || (dist_gg.rows, dist_gg.cols) != (g, g) {
        return Err(Error::Shape(format!(
            "inconsistent re-ranking inputs: qg {}x{}, qq {}x{}, gg {}x{}",
            q, g, dist_qq.rows, dist_qq.cols, dist_gg.rows, dist_gg.cols
        )));
    }
    let RerankConfig { k1, k2, lambda } = *config;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Input(format!("lambda must be in [0, 1], got {lambda}")));
    }
    if k1 == 0 || k2 == 0 || k1 > g || k2 > g {
        return Err(Error::Input(format!(
            "k1={k1} and k2={k2} must be between 1 and the gallery size {g}"
        )));
    }
    let joint = Joint::new(dist_qg, dist_qq, dist_gg);
    let n = joint.len();
    let half = (k1 as f64 / 2.0).round_ties_even() as usize;
    let keep = (k1 + 1).max(k2).min(n);
    let ranks: Vec<Vec<usize>> = (0..n).map(|i| joint.top_k(i, keep)).collect();

    // neighborhood vectors
    let mut v: Vec<SparseRow> = Vec::with_capacity(n);
    for i in 0..n {
        let base = k_reciprocal(&ranks, i, k1);
        let mut expanded = base.clone();
        for &c in &base {
            let cand = k_reciprocal(&ranks, c, half);
            let overlap = cand.iter().filter(|x| base.contains(x)).count();
            if overlap as f64 > 2.0 / 3.0 * cand.len() as f64 {
                expanded.extend(cand);
            }
        }
        expanded.sort_unstable();
        expanded.dedup();
        let weights: Vec<f64> = expanded.iter().map(|&j| (-joint.dist(i, j)).exp()).collect();
        let total: f64 = weights.iter().sum();
        v.push(expanded.into_iter().zip(weights).map(|(j, w)| (j, w / total)).collect());
    }

    // local query expansion
    if k2 != 1 {
        let mut dense = vec![0.0f64; n];
        let mut expanded = Vec::with_capacity(n);
        for rank in &ranks {
            let mut touched = Vec::new();
            for &nb in &rank[..k2] {
                for &(j, w) in &v[nb] {
                    if dense[j] == 0.0 {
                        touched.push(j);
                    }
                    dense[j] += w;
                }
            }
            touched.sort_unstable();
            let row: SparseRow = touched
                .iter()
                .map(|&j| {
                    let w = dense[j] / k2 as f64;
                    dense[j] = 0.0;
                    (j, w)
                })
                .collect();
            expanded.push(row);
        }
        v = expanded;
    }

    // inverted index over gallery rows only: only they are scored
    let mut inverted: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (r, row) in v.iter().enumerate().skip(q) {
        for &(j, w) in row {
            inverted[j].push((r - q, w));
        }
    }

    let mut out = Vec::with_capacity(q * g);
    let mut overlap = vec![0.0f64; g];
    for i in 0..q {
        overlap.iter_mut().for_each(|x| *x = 0.0);
        for &(j, w) in &v[i] {
            for &(r, wr) in &inverted[j] {
                overlap[r] += w.min(wr);
            }
        }
        for (c, &m) in overlap.iter().enumerate() {
            let jaccard = 1.0 - m / (2.0 - m);
            let d = lambda * joint.dist(i, q + c) + (1.0 - lambda) * jaccard;
            out.push(d.max(0.0) as f32);
        }
    }
    DistanceMatrix::new(q, g, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::distance::euclidean_distances;
    use crate::eval::metrics::rank_gallery;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<f32> {
        (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn lambda_one_keeps_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (qf, gf) = (random_points(&mut rng, 5, 4), random_points(&mut rng, 30, 4));
        let qg = euclidean_distances(&qf, &gf, 4).unwrap();
        let qq = euclidean_distances(&qf, &qf, 4).unwrap();
        let gg = euclidean_distances(&gf, &gf, 4).unwrap();
        let cfg = RerankConfig {
            k1: 6,
            k2: 3,
            lambda: 1.0,
        };
        let out = rerank(&qg, &qq, &gg, &cfg).unwrap();
        for i in 0..5 {
            assert_eq!(rank_gallery(out.row(i)), rank_gallery(qg.row(i)));
        }
    }

    #[test]
    fn k_larger_than_gallery_is_input_error() {
        let qg = DistanceMatrix::new(1, 2, vec![0.1, 0.2]).unwrap();
        let qq = DistanceMatrix::new(1, 1, vec![0.0]).unwrap();
        let gg = DistanceMatrix::new(2, 2, vec![0.0, 0.3, 0.3, 0.0]).unwrap();
        let cfg = RerankConfig { k1: 3, k2: 1, lambda: 0.3 };
        assert!(matches!(rerank(&qg, &qq, &gg, &cfg), Err(Error::Input(_))));
    }

    // Frozen values from an independent numpy port of the reference
    // implementation (float64, stable argsort) on 2 queries and 5 gallery
    // points in the plane.
    #[test]
    fn matches_reference_values() {
        let q = [0.0f32, 0.0, 3.0, 1.0];
        let g = [0.1f32, 0.2, 2.9, 1.1, 1.5, 0.4, 0.3, -0.2, 3.2, 0.7];
        let qg = euclidean_distances(&q, &g, 2).unwrap();
        let qq = euclidean_distances(&q, &q, 2).unwrap();
        let gg = euclidean_distances(&g, &g, 2).unwrap();
        let cases: [((usize, usize, f64), [[f32; 5]; 2]); 3] = [
            (
                (2, 1, 0.3),
                [
                    [0.004903210, 0.96896553, 0.76738119, 0.012204035, 1.0],
                    [0.97149998, 0.0045918296, 0.77829999, 0.96189996, 0.013085552],
                ],
            ),
            (
                (3, 2, 0.3),
                [
                    [0.0013979496, 0.96896553, 0.18893762, 0.0088372799, 1.0],
                    [0.97149998, 0.00060000003, 0.77829999, 0.96189996, 0.010493531],
                ],
            ),
            (
                (4, 2, 0.5),
                [
                    [0.0023299162, 0.90977168, 0.26290607, 0.051637389, 1.0],
                    [0.91399580, 0.0010000000, 0.55398625, 0.88378155, 0.13161258],
                ],
            ),
        ];
        for ((k1, k2, lambda), want) in cases {
            let out = rerank(&qg, &qq, &gg, &RerankConfig { k1, k2, lambda }).unwrap();
            for (i, row) in want.iter().enumerate() {
                for (j, &w) in row.iter().enumerate() {
                    let got = out.get(i, j);
                    assert!((got - w).abs() < 1e-5, "k1={k1} k2={k2} ({i},{j}): {got} vs {w}");
                }
            }
        }
    }
}
