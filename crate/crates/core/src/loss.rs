//! Supervisory signals and their routing onto branch features.
//!
//! Softmax identity classification goes on the raw branch globals and the
//! reduced stripes; batch-hard triplet goes on the reduced branch globals
//! only. Without triplet, softmax moves to the reduced globals instead.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{classifier_logits, ClassifierHead, EmbeddingBundle, FeatureId, FeatureKind, ModelConfig};
use crate::ops::safe_sqrt;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub margin: f64,
    pub enable_triplet: bool,
    pub softmax_weight: f64,
    pub triplet_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin: 1.2,
            enable_triplet: true,
            softmax_weight: 1.0,
            triplet_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.enable_triplet && !(self.margin > 0.0) {
            return Err(Error::Config(format!("triplet margin must be > 0, got {}", self.margin)));
        }
        for (name, w) in [("softmax_weight", self.softmax_weight), ("triplet_weight", self.triplet_weight)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }

    pub fn weight(&self, kind: LossKind) -> f64 {
        match kind {
            LossKind::Softmax => self.softmax_weight,
            LossKind::Triplet => self.triplet_weight,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Softmax,
    Triplet,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Softmax => "softmax",
            LossKind::Triplet => "triplet",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTerm {
    pub kind: LossKind,
    pub feature: FeatureId,
    pub value: f64,
    pub weight: f64,
    /// Batch classification accuracy, softmax terms only.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub terms: Vec<LossTerm>,
}

impl LossReport {
    pub fn count(&self, kind: LossKind) -> usize {
        self.terms.iter().filter(|t| t.kind == kind).count()
    }

    pub fn get(&self, kind: LossKind, feature: &FeatureId) -> Option<&LossTerm> {
        self.terms.iter().find(|t| t.kind == kind && &t.feature == feature)
    }

    pub fn features(&self, kind: LossKind) -> BTreeSet<FeatureId> {
        self.terms
            .iter()
            .filter(|t| t.kind == kind)
            .map(|t| t.feature.clone())
            .collect()
    }

    /// Mean batch accuracy over the softmax terms.
    pub fn accuracy(&self) -> Option<f64> {
        let accs: Vec<f64> = self.terms.iter().filter_map(|t| t.accuracy).collect();
        (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
    }
}

/// Result of routing: the differentiable total and its scalar breakdown.
#[derive(Debug, Clone)]
pub struct RoutedLoss {
    pub total: Tensor,
    pub report: LossReport,
}

fn check_labels(labels: &[usize], n: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Input(format!("{} labels for a batch of {n}", labels.len())));
    }
    Ok(())
}

fn label_tensor(labels: &[usize], device: &candle_core::Device) -> Result<Tensor> {
    let v: Vec<u32> = labels.iter().map(|&l| l as u32).collect();
    Ok(Tensor::from_vec(v, labels.len(), device)?)
}

/// Mean over the batch of `-log softmax(W f)[label]`.
pub fn softmax_loss(features: &Tensor, labels: &[usize], head: &ClassifierHead) -> Result<Tensor> {
    let logits = classifier_logits(head, features)?;
    cross_entropy(&logits, labels)
}

/// Mean negative log-likelihood of `labels` under softmax of `[N, C]` logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (n, c) = logits.dims2()?;
    check_labels(labels, n)?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Input(format!("label {bad} out of range for {c} classes")));
    }
    let shift = logits.max_keepdim(1)?.detach();
    let shifted = logits.broadcast_sub(&shift)?;
    let lse = shifted.exp()?.sum_keepdim(1)?.log()?;
    let target = shifted.gather(&label_tensor(labels, logits.device())?.unsqueeze(1)?, 1)?;
    Ok((lse - target)?.mean_all()?)
}

/// Fraction of rows whose arg-max logit is the label.
fn batch_accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let pred = logits.argmax(1)?.to_vec1::<u32>()?;
    let hits = pred.iter().zip(labels).filter(|(p, l)| **p as usize == **l).count();
    Ok(hits as f64 / labels.len().max(1) as f64)
}

/// `[N, N]` Euclidean distances computed from explicit differences, so the
/// gradient is exact and zero (not NaN) on coincident points.
pub fn pairwise_euclidean(features: &Tensor) -> Result<Tensor> {
    let diff = features.unsqueeze(1)?.broadcast_sub(&features.unsqueeze(0)?)?;
    safe_sqrt(&diff.sqr()?.sum(D::Minus1)?)
}

/// Hardest positive and hardest negative column per anchor; ties go to the
/// lowest index.
pub fn mine_batch_hard(dist: &[Vec<f64>], labels: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let n = labels.len();
    let mut pos = Vec::with_capacity(n);
    let mut neg = Vec::with_capacity(n);
    for i in 0..n {
        let (mut p, mut pd) = (usize::MAX, f64::NEG_INFINITY);
        let (mut q, mut qd) = (usize::MAX, f64::INFINITY);
        for j in 0..n {
            let d = dist[i][j];
            if labels[j] == labels[i] {
                if j != i && d > pd {
                    p = j;
                    pd = d;
                }
            } else if d < qd {
                q = j;
                qd = d;
            }
        }
        pos.push(p);
        neg.push(q);
    }
    (pos, neg)
}

fn check_pk(labels: &[usize]) -> Result<()> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    if counts.len() < 2 {
        return Err(Error::Input("triplet batch needs at least 2 identities".into()));
    }
    if let Some((id, _)) = counts.iter().find(|(_, &c)| c < 2) {
        return Err(Error::Input(format!("identity {id} has fewer than 2 images in the triplet batch")));
    }
    Ok(())
}

/// Sum over anchors of `[margin + max_pos d - min_neg d]_+`.
pub fn batch_hard_triplet(features: &Tensor, labels: &[usize], margin: f64) -> Result<Tensor> {
    let (n, _) = features.dims2()?;
    check_labels(labels, n)?;
    check_pk(labels)?;
    let dist = pairwise_euclidean(features)?;
    let values = dist.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let (pos, neg) = mine_batch_hard(&values, labels);
    let dev = features.device();
    let pos = label_tensor(&pos, dev)?.unsqueeze(1)?;
    let neg = label_tensor(&neg, dev)?.unsqueeze(1)?;
    let d_pos = dist.gather(&pos, 1)?;
    let d_neg = dist.gather(&neg, 1)?;
    Ok(((d_pos - d_neg)? + margin)?.relu()?.sum_all()?)
}

/// Softmax-supervised features of a branch layout `(name, num_parts)`.
fn softmax_ids(branches: &[(String, usize)], config: &LossConfig) -> Vec<FeatureId> {
    let global = if config.enable_triplet {
        FeatureKind::GlobalRaw
    } else {
        FeatureKind::GlobalReduced
    };
    let mut out: Vec<FeatureId> = branches.iter().map(|(b, _)| FeatureId::new(b, global)).collect();
    for (b, parts) in branches {
        if *parts > 1 {
            out.extend((1..=*parts).map(|i| FeatureId::new(b, FeatureKind::Part(i))));
        }
    }
    out
}

fn triplet_ids(branches: &[(String, usize)], config: &LossConfig) -> Vec<FeatureId> {
    if !config.enable_triplet {
        return Vec::new();
    }
    branches
        .iter()
        .map(|(b, _)| FeatureId::new(b, FeatureKind::GlobalReduced))
        .collect()
}

fn layout(model: &ModelConfig) -> Vec<(String, usize)> {
    model.branches.iter().map(|b| (b.name.clone(), b.num_parts)).collect()
}

/// Features that carry a softmax head under this configuration.
pub fn softmax_targets(model: &ModelConfig, config: &LossConfig) -> Vec<FeatureId> {
    softmax_ids(&layout(model), config)
}

/// Features that receive batch-hard triplet under this configuration.
pub fn triplet_targets(model: &ModelConfig, config: &LossConfig) -> Vec<FeatureId> {
    triplet_ids(&layout(model), config)
}

/// Applies every routed loss to a batch and sums them with their weights.
pub fn route_losses(
    bundle: &EmbeddingBundle,
    labels: &[usize],
    heads: &BTreeMap<FeatureId, ClassifierHead>,
    config: &LossConfig,
) -> Result<RoutedLoss> {
    config.validate()?;
    let branches: Vec<(String, usize)> = bundle
        .branches
        .iter()
        .map(|b| (b.name.clone(), b.parts.len().max(1)))
        .collect();
    let feature = |id: &FeatureId| {
        bundle
            .get(id)
            .ok_or_else(|| Error::Config(format!("bundle has no feature {id}")))
    };

    let mut terms = Vec::new();
    let mut total: Option<Tensor> = None;
    let mut add = |t: Tensor, kind: LossKind, id: FeatureId, accuracy: Option<f64>| -> Result<()> {
        let weight = config.weight(kind);
        let value = t.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let weighted = (t * weight)?;
        total = Some(match total.take() {
            Some(acc) => (acc + weighted)?,
            None => weighted,
        });
        terms.push(LossTerm {
            kind,
            feature: id,
            value,
            weight,
            accuracy,
        });
        Ok(())
    };

    for id in softmax_ids(&branches, config) {
        let head = heads
            .get(&id)
            .ok_or_else(|| Error::Config(format!("no classifier head for {id}")))?;
        let logits = classifier_logits(head, feature(&id)?)?;
        let acc = batch_accuracy(&logits, labels)?;
        add(cross_entropy(&logits, labels)?, LossKind::Softmax, id, Some(acc))?;
    }
    for id in triplet_ids(&branches, config) {
        let t = batch_hard_triplet(feature(&id)?, labels, config.margin)?;
        add(t, LossKind::Triplet, id, None)?;
    }

    let total = total.ok_or_else(|| Error::Config("no loss terms routed".into()))?;
    // Reported total is the weighted sum of the reported scalars, so it
    // matches the breakdown exactly.
    let report = LossReport {
        total: terms.iter().map(|t| t.value * t.weight).sum(),
        terms,
    };
    Ok(RoutedLoss { total, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BranchConfig, BranchEmbedding};
    use candle_core::{Device, Var};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t2(v: Vec<f64>, n: usize, d: usize) -> Tensor {
        Tensor::from_vec(v, (n, d), &Device::Cpu).unwrap()
    }

    fn scalar(t: &Tensor) -> f64 {
        t.to_scalar::<f64>().unwrap()
    }

    fn naive_triplet(f: &[Vec<f64>], labels: &[usize], margin: f64) -> f64 {
        let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let n = f.len();
        (0..n)
            .map(|i| {
                let hp = (0..n)
                    .filter(|&j| j != i && labels[j] == labels[i])
                    .map(|j| d(&f[i], &f[j]))
                    .fold(f64::NEG_INFINITY, f64::max);
                let hn = (0..n)
                    .filter(|&j| labels[j] != labels[i])
                    .map(|j| d(&f[i], &f[j]))
                    .fold(f64::INFINITY, f64::min);
                (margin + hp - hn).max(0.0)
            })
            .sum()
    }

    fn pk_labels(p: usize, k: usize) -> Vec<usize> {
        (0..p * k).map(|i| i / k).collect()
    }

    #[test]
    fn zero_features_give_log_c() {
        let head = ClassifierHead::from_tensor(&t2(vec![0.3; 5 * 4], 5, 4)).unwrap();
        let loss = softmax_loss(&t2(vec![0.0; 12], 3, 4), &[0, 4, 2], &head).unwrap();
        assert!((scalar(&loss) - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_class_loss_is_zero() {
        let head = ClassifierHead::from_tensor(&t2(vec![1.0, -2.0], 1, 2)).unwrap();
        let loss = softmax_loss(&t2(vec![3.0, 1.0, -4.0, 2.0], 2, 2), &[0, 0], &head).unwrap();
        assert_eq!(scalar(&loss), 0.0);
    }

    #[test]
    fn label_out_of_range_is_input_error() {
        let head = ClassifierHead::from_tensor(&t2(vec![1.0; 6], 3, 2)).unwrap();
        let err = softmax_loss(&t2(vec![1.0; 4], 2, 2), &[0, 3], &head).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn logit_shift_leaves_cross_entropy_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits: Vec<f64> = (0..20).map(|_| rng.random_range(-3.0..3.0)).collect();
        let labels = [0, 3, 1, 4];
        let base = scalar(&cross_entropy(&t2(logits.clone(), 4, 5), &labels).unwrap());
        let shifted: Vec<f64> = logits.iter().enumerate().map(|(i, v)| v + 7.5 * (i / 5) as f64).collect();
        let moved = scalar(&cross_entropy(&t2(shifted, 4, 5), &labels).unwrap());
        assert!((base - moved).abs() < 1e-12);
    }

    #[test]
    fn identical_features_give_margin_per_anchor() {
        let f = t2(vec![0.7; 4 * 3], 4, 3);
        let loss = batch_hard_triplet(&f, &pk_labels(2, 2), 1.2).unwrap();
        assert_eq!(scalar(&loss), 4.8);
    }

    #[test]
    fn separated_identities_have_zero_loss() {
        let f = t2(vec![0.0, 0.0, 0.1, 0.0, 10.0, 0.0, 10.0, 0.1], 4, 2);
        assert_eq!(scalar(&batch_hard_triplet(&f, &pk_labels(2, 2), 1.2).unwrap()), 0.0);
    }

    #[test]
    fn triplet_rejects_non_pk_batches() {
        let f = t2(vec![0.0; 8], 4, 2);
        assert!(matches!(batch_hard_triplet(&f, &[0, 0, 0, 0], 1.0), Err(Error::Input(_))));
        assert!(matches!(batch_hard_triplet(&f, &[0, 0, 0, 1], 1.0), Err(Error::Input(_))));
    }

    #[test]
    fn triplet_gradient_is_finite_on_duplicates() {
        let v = Var::from_tensor(&t2(vec![1.0; 8], 4, 2)).unwrap();
        let loss = batch_hard_triplet(v.as_tensor(), &pk_labels(2, 2), 1.0).unwrap();
        let g = loss.backward().unwrap().get(v.as_tensor()).unwrap().flatten_all().unwrap();
        assert!(g.to_vec1::<f64>().unwrap().iter().all(|x| x.is_finite()));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn triplet_matches_loop_and_is_invariant(
            seed in any::<u64>(),
            p in 2usize..5,
            k in 2usize..5,
            d in 1usize..9,
            shift in -5.0f64..5.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = p * k;
            let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
            let labels = pk_labels(p, k);
            let got = scalar(&batch_hard_triplet(&t2(rows.concat(), n, d), &labels, 0.5).unwrap());
            prop_assert!((got - naive_triplet(&rows, &labels, 0.5)).abs() < 1e-9);

            let moved: Vec<f64> = rows.concat().iter().map(|x| x + shift).collect();
            let translated = scalar(&batch_hard_triplet(&t2(moved, n, d), &labels, 0.5).unwrap());
            prop_assert!((got - translated).abs() < 1e-9);

            let mut perm: Vec<usize> = (0..n).collect();
            perm.reverse();
            perm.rotate_left(seed as usize % n);
            let rows_p: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
            let labels_p: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
            let permuted = scalar(&batch_hard_triplet(&t2(rows_p.concat(), n, d), &labels_p, 0.5).unwrap());
            prop_assert!((got - permuted).abs() < 1e-9);
        }
    }

    fn layout_counts(branches: Vec<BranchConfig>, triplet: bool) -> (usize, usize) {
        let model = ModelConfig::canonical().with_branches(branches);
        let cfg = LossConfig {
            enable_triplet: triplet,
            ..LossConfig::default()
        };
        (softmax_targets(&model, &cfg).len(), triplet_targets(&model, &cfg).len())
    }

    #[test]
    fn routing_counts() {
        let canon = || vec![BranchConfig::global(), BranchConfig::part(2), BranchConfig::part(3)];
        assert_eq!(layout_counts(canon(), true), (8, 3));
        assert_eq!(layout_counts(canon(), false), (8, 0));
        assert_eq!(layout_counts(vec![BranchConfig::global()], false), (1, 0));
        let model = ModelConfig::canonical();
        let no_tp = LossConfig {
            enable_triplet: false,
            ..LossConfig::default()
        };
        assert!(softmax_targets(&model, &no_tp).iter().all(FeatureId::is_reduced));
    }

    #[test]
    fn route_sums_weighted_terms_and_requires_heads() {
        let dev = Device::Cpu;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut rand = |n: usize, d: usize| {
            Tensor::from_vec((0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>(), (n, d), &dev).unwrap()
        };
        let bundle = EmbeddingBundle {
            branches: vec![BranchEmbedding {
                name: "global".into(),
                z_g: rand(4, 6),
                f_g: rand(4, 3),
                parts: vec![],
                map: Tensor::zeros((4, 1, 1, 6), DType::F64, &dev).unwrap(),
            }],
        };
        let labels = pk_labels(2, 2);
        let cfg = LossConfig {
            softmax_weight: 0.5,
            triplet_weight: 2.0,
            ..LossConfig::default()
        };
        let err = route_losses(&bundle, &labels, &BTreeMap::new(), &cfg).unwrap_err();
        assert!(err.is_config());

        let mut heads = BTreeMap::new();
        heads.insert(
            FeatureId::new("global", FeatureKind::GlobalRaw),
            ClassifierHead::from_tensor(&rand(2, 6)).unwrap(),
        );
        let a = route_losses(&bundle, &labels, &heads, &cfg).unwrap();
        assert_eq!(a.report.terms.len(), 2);
        let want: f64 = a.report.terms.iter().map(|t| t.value * t.weight).sum();
        assert!((scalar(&a.total) - want).abs() < 1e-12);
        let b = route_losses(&bundle, &labels, &heads, &cfg).unwrap();
        assert_eq!(a.report, b.report);
    }
}
