use candle_core::Tensor;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identity-balanced batch shape: `p` identities × `k` images each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub p: usize,
    pub k: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { p: 16, k: 4, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    pub fn validate(&self) -> Result<()> {
        if self.p < 2 || self.k < 2 {
            return Err(Error::Config(format!(
                "sampler needs P >= 2 and K >= 2 for triplet mining, got P={} K={}",
                self.p, self.k
            )));
        }
        Ok(())
    }
}

/// Record positions and labels chosen for one batch, grouped by identity
/// (`k` consecutive entries per identity).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchIndices {
    pub records: Vec<usize>,
    pub labels: Vec<usize>,
}

/// A PK-structured minibatch ready for the network.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[N, 3, H, W]`
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub cameras: Vec<u32>,
}

/// Serializable sampler position, stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerState {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    batch_in_epoch: usize,
    epoch: usize,
}

/// PK sampler.
///
/// An epoch is `ceil(C / P)` batches over a fresh permutation of the
/// identities, so every identity appears at least once per epoch. The last
/// batch of an epoch is topped up with other identities when `C` is not a
/// multiple of `P`. Identities with fewer than `K` images are sampled with
/// replacement.
#[derive(Debug, Clone)]
pub struct PkSampler {
    config: SamplerConfig,
    groups: Vec<Vec<usize>>,
    state: SamplerState,
}

impl PkSampler {
    /// `labels[i]` is the dense identity label of training record `i`.
    pub fn new(config: SamplerConfig, labels: &[usize]) -> Result<Self> {
        config.validate()?;
        if labels.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        let num_ids = labels.iter().max().map_or(0, |m| m + 1);
        let mut groups = vec![Vec::new(); num_ids];
        for (i, &l) in labels.iter().enumerate() {
            groups[l].push(i);
        }
        if groups.iter().any(Vec::is_empty) {
            return Err(Error::Data("identity labels are not contiguous".into()));
        }
        if num_ids < config.p {
            return Err(Error::Config(format!(
                "dataset has {num_ids} identities but P={}",
                config.p
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut order: Vec<usize> = (0..num_ids).collect();
        order.shuffle(&mut rng);
        Ok(PkSampler {
            config,
            groups,
            state: SamplerState {
                rng,
                order,
                batch_in_epoch: 0,
                epoch: 0,
            },
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn num_identities(&self) -> usize {
        self.groups.len()
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.groups.len().div_ceil(self.config.p)
    }

    /// Number of completed epochs.
    pub fn epoch(&self) -> usize {
        self.state.epoch
    }

    pub fn state(&self) -> &SamplerState {
        &self.state
    }

    pub fn restore(&mut self, state: SamplerState) -> Result<()> {
        if state.order.len() != self.groups.len() {
            return Err(Error::Config(format!(
                "sampler state covers {} identities, dataset has {}",
                state.order.len(),
                self.groups.len()
            )));
        }
        self.state = state;
        Ok(())
    }

    fn epoch_identities(&mut self) -> Vec<usize> {
        let p = self.config.p;
        let start = self.state.batch_in_epoch * p;
        let end = (start + p).min(self.state.order.len());
        let mut ids = self.state.order[start..end].to_vec();
        if ids.len() < p {
            let mut rest: Vec<usize> = self.state.order[..start].to_vec();
            rest.shuffle(&mut self.state.rng);
            ids.extend(rest.into_iter().take(p - ids.len()));
        }
        self.state.batch_in_epoch += 1;
        if self.state.batch_in_epoch == self.batches_per_epoch() {
            self.state.batch_in_epoch = 0;
            self.state.epoch += 1;
            self.state.order.shuffle(&mut self.state.rng);
        }
        ids
    }

    pub fn next_indices(&mut self) -> BatchIndices {
        let k = self.config.k;
        let ids = self.epoch_identities();
        let mut records = Vec::with_capacity(ids.len() * k);
        let mut labels = Vec::with_capacity(ids.len() * k);
        for id in ids {
            let group = &self.groups[id];
            if group.len() >= k {
                for i in index::sample(&mut self.state.rng, group.len(), k) {
                    records.push(group[i]);
                }
            } else {
                for _ in 0..k {
                    records.push(group[self.state.rng.random_range(0..group.len())]);
                }
            }
            labels.extend(std::iter::repeat_n(id, k));
        }
        BatchIndices { records, labels }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{BTreeMap, BTreeSet};

    fn labels(counts: &[usize]) -> Vec<usize> {
        counts
            .iter()
            .enumerate()
            .flat_map(|(id, &n)| std::iter::repeat_n(id, n))
            .collect()
    }

    fn check_pk(b: &BatchIndices, labels: &[usize], p: usize, k: usize) {
        assert_eq!(b.records.len(), p * k);
        let mut per_id: BTreeMap<usize, usize> = BTreeMap::new();
        for (&r, &l) in b.records.iter().zip(&b.labels) {
            assert_eq!(labels[r], l);
            *per_id.entry(l).or_default() += 1;
        }
        assert_eq!(per_id.len(), p);
        assert!(per_id.values().all(|&c| c == k));
    }

    #[test]
    fn canonical_batch_shape() {
        let labels = labels(&[6; 20]);
        let mut s = PkSampler::new(SamplerConfig { p: 16, k: 4, seed: 1 }, &labels).unwrap();
        let b = s.next_indices();
        assert_eq!(b.records.len(), 64);
        check_pk(&b, &labels, 16, 4);
    }

    #[test]
    fn two_identity_dataset() {
        let labels = labels(&[3, 5]);
        let mut s = PkSampler::new(SamplerConfig { p: 2, k: 2, seed: 0 }, &labels).unwrap();
        let b = s.next_indices();
        let ids: BTreeSet<_> = b.labels.iter().copied().collect();
        assert_eq!(ids, BTreeSet::from([0, 1]));
    }

    #[test]
    fn single_image_identity_is_repeated() {
        let labels = labels(&[1, 4]);
        let mut s = PkSampler::new(SamplerConfig { p: 2, k: 4, seed: 9 }, &labels).unwrap();
        let b = s.next_indices();
        let picked: Vec<usize> = b
            .records
            .iter()
            .zip(&b.labels)
            .filter(|(_, &l)| l == 0)
            .map(|(&r, _)| r)
            .collect();
        assert_eq!(picked, vec![0, 0, 0, 0]);
        // the 4-image identity gets distinct images
        let other: BTreeSet<usize> = b.records.iter().copied().filter(|&r| r != 0).collect();
        assert_eq!(other.len(), 4);
    }

    #[test]
    fn too_few_identities_is_config_error() {
        let err = PkSampler::new(SamplerConfig { p: 4, k: 2, seed: 0 }, &labels(&[2, 2, 2])).unwrap_err();
        assert!(err.is_config());
        let err = PkSampler::new(SamplerConfig { p: 1, k: 2, seed: 0 }, &labels(&[2, 2])).unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn state_round_trips() {
        let labels = labels(&[3; 7]);
        let mut a = PkSampler::new(SamplerConfig { p: 3, k: 2, seed: 4 }, &labels).unwrap();
        a.next_indices();
        let saved = serde_json::to_string(a.state()).unwrap();
        let mut b = PkSampler::new(SamplerConfig { p: 3, k: 2, seed: 99 }, &labels).unwrap();
        b.restore(serde_json::from_str(&saved).unwrap()).unwrap();
        for _ in 0..10 {
            assert_eq!(a.next_indices(), b.next_indices());
        }
    }

    proptest::proptest! {
        #[test]
        fn every_batch_is_pk_and_epochs_cover_all(
            seed in 0u64..1000,
            counts in proptest::collection::vec(1usize..7, 2..12),
            p in 2usize..5,
            k in 2usize..5,
        ) {
            proptest::prop_assume!(counts.len() >= p);
            let labels = labels(&counts);
            let mut s = PkSampler::new(SamplerConfig { p, k, seed }, &labels).unwrap();
            for _ in 0..3 {
                let mut seen = BTreeSet::new();
                for _ in 0..s.batches_per_epoch() {
                    let b = s.next_indices();
                    check_pk(&b, &labels, p, k);
                    seen.extend(b.labels);
                }
                proptest::prop_assert_eq!(seen.len(), counts.len());
            }
        }
    }
}
