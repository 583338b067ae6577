//! Pseudo-anomaly synthesis in embedding space.
//!
//! A sampled subset of agents gets its feature pushed by `alpha · ‖x‖` along a
//! uniformly random direction, so the displacement is proportional to the
//! row's own magnitude.

use std::collections::BTreeSet;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionConfig {
    pub alpha: f64,
    pub fraction: f64,
    pub min_corrupted: usize,
    pub seed: u64,
    /// Draw a fresh subset and fresh noise every epoch instead of fixing
    /// one draw per graph for the whole run.
    pub resample_per_epoch: bool,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        CorruptionConfig {
            alpha: 1.0,
            fraction: 0.2,
            min_corrupted: 1,
            seed: 0,
            resample_per_epoch: true,
        }
    }
}

impl CorruptionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "alpha must be > 0, got {}",
                self.alpha
            )));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::Config(format!(
                "corruption fraction must be in (0, 1], got {}",
                self.fraction
            )));
        }
        if self.min_corrupted < 1 {
            return Err(Error::Config("min_corrupted must be at least 1".into()));
        }
        Ok(())
    }

    pub fn subset_size(&self, n: usize) -> usize {
        self.min_corrupted
            .max((self.fraction * n as f64).ceil() as usize)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorruptedBatch {
    pub features: EmbeddingMatrix,
    pub labels: Vec<u8>,
    pub corrupted_indices: BTreeSet<usize>,
}

pub fn sample_corruption_set<R: Rng + ?Sized>(
    n: usize,
    cfg: &CorruptionConfig,
    rng: &mut R,
) -> Result<BTreeSet<usize>> {
    cfg.validate()?;
    if n < 2 {
        return Err(Error::Config(format!(
            "corruption needs at least 2 agents, got {n}"
        )));
    }
    let size = cfg.subset_size(n);
    if size >= n {
        return Err(Error::Config(format!(
            "corrupting {size} of {n} agents would leave no normal agent"
        )));
    }
    Ok(index::sample(rng, n, size).into_iter().collect())
}

/// Corrupt `indices` with isotropic Gaussian directions.
pub fn corrupt<R: Rng + ?Sized>(
    features: &EmbeddingMatrix,
    indices: &BTreeSet<usize>,
    alpha: f64,
    rng: &mut R,
) -> Result<CorruptedBatch> {
    let d = features.d();
    corrupt_with(features, indices, alpha, |_| {
        (0..d).map(|_| StandardNormal.sample(&mut *rng)).collect()
    })
}

/// Corrupt `indices`, taking each row's raw (unnormalized) direction from
/// `direction`. Rows are visited in ascending index order.
pub fn corrupt_with(
    features: &EmbeddingMatrix,
    indices: &BTreeSet<usize>,
    alpha: f64,
    mut direction: impl FnMut(usize) -> Vec<f64>,
) -> Result<CorruptedBatch> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!("alpha must be > 0, got {alpha}")));
    }
    let n = features.n();
    if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
        return Err(Error::Data(format!(
            "corruption index {bad} out of range for {n} agents"
        )));
    }
    let mut out = features.clone();
    let mut labels = vec![0u8; n];
    for &i in indices {
        let x = features.row(i);
        let norm = x.dot(&x).sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroNorm {
                what: "corruption target",
                row: i,
            });
        }
        let eps = direction(i);
        if eps.len() != features.d() {
            return Err(Error::Dimension(format!(
                "direction has {} entries, features have {}",
                eps.len(),
                features.d()
            )));
        }
        let eps_norm = eps.iter().map(|v| v * v).sum::<f64>().sqrt();
        if eps_norm == 0.0 {
            return Err(Error::ZeroNorm {
                what: "corruption direction",
                row: i,
            });
        }
        let scale = alpha * norm / eps_norm;
        let row: Vec<f64> = x.iter().zip(&eps).map(|(xv, e)| xv + scale * e).collect();
        out.set_row(i, &row)?;
        labels[i] = 1;
    }
    Ok(CorruptedBatch {
        features: out,
        labels,
        corrupted_indices: indices.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn cfg() -> CorruptionConfig {
        CorruptionConfig::default()
    }

    #[test]
    fn subset_sizes() {
        let mut r = rng::stream(1, "t", &[]);
        assert_eq!(sample_corruption_set(10, &cfg(), &mut r).unwrap().len(), 2);
        assert_eq!(sample_corruption_set(3, &cfg(), &mut r).unwrap().len(), 1);
        let all = CorruptionConfig {
            fraction: 1.0,
            ..cfg()
        };
        assert!(sample_corruption_set(5, &all, &mut r).is_err());
        assert!(sample_corruption_set(1, &cfg(), &mut r).is_err());
    }

    #[test]
    fn sampling_is_seeded() {
        let draw =
            |seed| sample_corruption_set(10, &cfg(), &mut rng::stream(seed, "t", &[])).unwrap();
        assert_eq!(draw(5), draw(5));
        let distinct: BTreeSet<_> = (0..20).map(draw).collect();
        assert!(distinct.len() > 10);
    }

    #[test]
    fn fixed_direction_example() {
        let x = EmbeddingMatrix::from_rows(&[vec![3.0, 4.0], vec![1.0, 1.0]], 2).unwrap();
        let idx: BTreeSet<_> = [0].into_iter().collect();
        let b = corrupt_with(&x, &idx, 0.5, |_| vec![7.0, 0.0]).unwrap();
        assert_eq!(b.features.row(0).to_vec(), vec![5.5, 4.0]);
        assert_eq!(b.features.row(1), x.row(1));
        assert_eq!(b.labels, vec![1, 0]);
    }

    #[test]
    fn tiny_alpha_barely_moves() {
        let x = EmbeddingMatrix::from_rows(&[vec![3.0, 4.0], vec![1.0, 1.0]], 2).unwrap();
        let idx: BTreeSet<_> = [0].into_iter().collect();
        let b = corrupt(&x, &idx, 1e-12, &mut rng::stream(0, "t", &[])).unwrap();
        let diff = &b.features.row(0) - &x.row(0);
        assert!(diff.dot(&diff).sqrt() <= 1e-11 * 5.0);
    }

    #[test]
    fn zero_rows_and_bad_alpha_rejected() {
        let x = EmbeddingMatrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]], 2).unwrap();
        let idx: BTreeSet<_> = [0].into_iter().collect();
        let mut r = rng::stream(0, "t", &[]);
        assert!(matches!(
            corrupt(&x, &idx, 1.0, &mut r),
            Err(Error::ZeroNorm { row: 0, .. })
        ));
        let idx1: BTreeSet<_> = [1].into_iter().collect();
        assert!(corrupt(&x, &idx1, 0.0, &mut r).is_err());
        let oob: BTreeSet<_> = [2].into_iter().collect();
        assert!(corrupt(&x, &oob, 1.0, &mut r).is_err());
    }
}
