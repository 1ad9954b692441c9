use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::infer::FeatureMatrix;

/// Dense `[rows × cols]` matrix of nonnegative distances, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl DistanceMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} distances for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Input("distances must be finite and nonnegative".into()));
        }
        Ok(DistanceMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged distance rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut data = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                data[j * self.rows + i] = self.get(i, j);
            }
        }
        DistanceMatrix {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    /// Every entry multiplied by `factor` (> 0).
    pub fn scaled(&self, factor: f32) -> Self {
        DistanceMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }
}

/// Euclidean distances between the rows of `a` (`[M, D]`) and `b`
/// (`[N, D]`), via `‖a‖² + ‖b‖² − 2a·b` in 64-bit, clamped at zero.
pub fn euclidean_distances(a: &[f32], b: &[f32], dim: usize) -> Result<DistanceMatrix> {
    if dim == 0 || a.len() % dim != 0 || b.len() % dim != 0 {
        return Err(Error::Shape(format!(
            "feature buffers of {} and {} values are not multiples of D={dim}",
            a.len(),
            b.len()
        )));
    }
    let (m, n) = (a.len() / dim, b.len() / dim);
    if m == 0 || n == 0 {
        return DistanceMatrix::new(m, n, Vec::new());
    }
    let dev = Device::Cpu;
    let ta = Tensor::from_slice(a, (m, dim), &dev)?.to_dtype(DType::F64)?;
    let tb = Tensor::from_slice(b, (n, dim), &dev)?.to_dtype(DType::F64)?;
    let aa = ta.sqr()?.sum_keepdim(1)?;
    let bb = tb.sqr()?.sum_keepdim(1)?.t()?;
    let dot = ta.matmul(&tb.t()?)?;
    let norms = aa.broadcast_add(&bb)?;
    let sq = (&norms - (dot * 2.0)?)?.to_vec2::<f64>()?;
    let norms = norms.to_vec2::<f64>()?;
    let mut data = Vec::with_capacity(m * n);
    for (srow, nrow) in sq.iter().zip(&norms) {
        for (&s, &scale) in srow.iter().zip(nrow) {
            // below rounding noise of the expansion: coincident points
            let s = if s <= 1e-12 * scale { 0.0 } else { s };
            data.push(s.sqrt() as f32);
        }
    }
    DistanceMatrix::new(m, n, data)
}

/// Distances between every row of `a` and every row of `b`.
pub fn pairwise_distances(a: &FeatureMatrix, b: &FeatureMatrix) -> Result<DistanceMatrix> {
    if a.dim != b.dim {
        return Err(Error::Shape(format!(
            "feature dimensions differ: {} vs {}",
            a.dim, b.dim
        )));
    }
    euclidean_distances(&a.data, &b.data, a.dim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn trivial_cases() {
        let d = euclidean_distances(&[0.3, -1.2, 4.0], &[0.3, -1.2, 4.0], 3).unwrap();
        assert_eq!(d.data, vec![0.0]);
        let d = euclidean_distances(&[1.0, 0.0], &[0.0, 1.0], 2).unwrap();
        assert!((d.get(0, 0) - 2f32.sqrt()).abs() < 1e-7);
    }

    #[test]
    fn matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dim = 7;
        let a: Vec<f32> = (0..10 * dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        let b: Vec<f32> = (0..10 * dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        let d = euclidean_distances(&a, &b, dim).unwrap();
        for i in 0..10 {
            for j in 0..10 {
                let want: f64 = (0..dim)
                    .map(|k| (a[i * dim + k] as f64 - b[j * dim + k] as f64).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!((d.get(i, j) as f64 - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_error() {
        assert!(euclidean_distances(&[1.0, 2.0, 3.0], &[1.0, 2.0], 2).is_err());
    }
}
