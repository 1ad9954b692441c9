//! Seeded inputs shared by the benchmarks.

use candle_core::{Device, Tensor};
use mgn_core::data::Identity;
use mgn_core::eval::ItemMeta;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `rows × dim` features drawn around `ids` cluster centers, with the
/// metadata of each row. Cameras cycle through 1..=6.
pub fn clustered_features(rows: usize, dim: usize, ids: usize, seed: u64) -> (Vec<f32>, Vec<ItemMeta>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f32>> = (0..ids)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let mut data = Vec::with_capacity(rows * dim);
    let mut meta = Vec::with_capacity(rows);
    for r in 0..rows {
        let id = r % ids;
        data.extend(centers[id].iter().map(|c| c + rng.random_range(-0.5..0.5)));
        meta.push(ItemMeta {
            identity: Identity::Person(id as u32 + 1),
            camera: (r % 6) as u32 + 1,
        });
    }
    (data, meta)
}

/// A PK-structured `[P·K, dim]` f32 feature batch and its labels.
pub fn pk_batch(p: usize, k: usize, dim: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f32> = (0..p * k * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let labels = (0..p * k).map(|i| i / k).collect();
    (Tensor::from_vec(data, (p * k, dim), &Device::Cpu).expect("shape matches"), labels)
}
