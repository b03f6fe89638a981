use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A finite set of latent vectors; the quantization target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub entries: Array2<f32>,
    pub usage_counts: Vec<u64>,
}

impl Codebook {
    pub fn new(entries: Array2<f32>) -> Result<Self> {
        if entries.nrows() == 0 || entries.ncols() == 0 {
            return Err(Error::InvalidConfig("codebook must be non-empty".into()));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig(
                "codebook entries must be finite".into(),
            ));
        }
        let k = entries.nrows();
        Ok(Self {
            entries,
            usage_counts: vec![0; k],
        })
    }

    pub fn size(&self) -> usize {
        self.entries.nrows()
    }

    pub fn dim(&self) -> usize {
        self.entries.ncols()
    }

    pub fn utilization(&self) -> f64 {
        self.usage_counts.iter().filter(|&&c| c > 0).count() as f64 / self.size() as f64
    }

    /// Smallest pairwise ℓ2 distance between entries.
    pub fn min_pairwise_distance(&self) -> f64 {
        let k = self.size();
        let mut best = f64::INFINITY;
        for a in 0..k {
            for b in a + 1..k {
                best = best.min(squared_distance(self.entries.row(a), self.entries.row(b)).sqrt());
            }
        }
        best
    }
}

fn squared_distance(a: ArrayView1<'_, f32>, b: ArrayView1<'_, f32>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Index of the nearest entry to `z`; ties go to the lowest index.
pub fn nearest(entries: ArrayView2<'_, f32>, z: ArrayView1<'_, f32>) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, e) in entries.rows().into_iter().enumerate() {
        let d = squared_distance(z, e);
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

/// Nearest-entry assignment for each row of `z`: returns the indices and the
/// selected entries.
pub fn quantize(codebook: &Codebook, z: ArrayView2<'_, f32>) -> Result<(Vec<usize>, Array2<f32>)> {
    if z.ncols() != codebook.dim() {
        return Err(Error::DimensionMismatch(z.ncols(), codebook.dim()));
    }
    let indices: Vec<usize> = z
        .rows()
        .into_iter()
        .map(|row| nearest(codebook.entries.view(), row))
        .collect();
    let mut q = Array2::zeros((indices.len(), codebook.dim()));
    for (t, &k) in indices.iter().enumerate() {
        q.row_mut(t).assign(&codebook.entries.row(k));
    }
    Ok((indices, q))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn exact_match_and_tie_rule() {
        let mut e = Array2::zeros((8, 2));
        for k in 0..8 {
            e[[k, 0]] = k as f32;
        }
        let cb = Codebook::new(e).unwrap();
        let (idx, q) = quantize(&cb, array![[7.0f32, 0.0]].view()).unwrap();
        assert_eq!(idx, vec![7]);
        assert_eq!(q.row(0).to_vec(), vec![7.0, 0.0]);

        // equidistant from entries 2 and 5 only
        let e = array![
            [9.0f32, 9.0],
            [9.0, -9.0],
            [-1.0, 0.0],
            [-9.0, 9.0],
            [-9.0, -9.0],
            [1.0, 0.0]
        ];
        let cb = Codebook::new(e).unwrap();
        let (idx, _) = quantize(&cb, array![[0.0f32, 0.0]].view()).unwrap();
        assert_eq!(idx, vec![2]);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let cb = Codebook::new(Array2::zeros((2, 3))).unwrap();
        assert!(quantize(&cb, Array2::zeros((1, 2)).view()).is_err());
    }
}
