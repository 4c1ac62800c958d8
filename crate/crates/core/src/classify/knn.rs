//! Soft-voting k-nearest-neighbor ablation.

use super::{check_dim, NormMode, TrainingSet};
use crate::error::{Error, Result};
use crate::manifest::Label;
use crate::num::Scalar;

/// Stores normalized training vectors. Neighbors at equal distance are
/// ordered by record id.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftKnn<T> {
    pub vectors: Vec<Vec<T>>,
    pub labels: Vec<Label>,
    pub ids: Vec<String>,
    pub k: usize,
    pub epsilon: f64,
    pub normalization: NormMode,
}

impl<T: Scalar> SoftKnn<T> {
    /// `k` defaults to `ceil(sqrt(len))`, where `len` counts both classes.
    pub fn fit(data: &TrainingSet<T>, k: Option<usize>, epsilon: f64, norm: NormMode) -> Result<Self> {
        let total = data.len();
        let k = k.unwrap_or_else(|| (total as f64).sqrt().ceil() as usize);
        if k == 0 || k > total {
            return Err(Error::Config(format!("k must lie in [1, {total}], got {k}")));
        }
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
        }
        // Keep the store sorted by id so tie order never depends on input order.
        let mut order: Vec<usize> = (0..total).collect();
        order.sort_by(|&a, &b| data.ids[a].cmp(&data.ids[b]));
        let normalized = data.normalized(norm);
        Ok(SoftKnn {
            vectors: order.iter().map(|&i| normalized[i].clone()).collect(),
            labels: order.iter().map(|&i| data.labels[i]).collect(),
            ids: order.iter().map(|&i| data.ids[i].clone()).collect(),
            k,
            epsilon,
            normalization: norm,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    /// Indices of the `k` nearest stored vectors with their distances.
    pub fn neighbors(&self, x: &[T]) -> Result<Vec<(usize, f64)>> {
        check_dim(self.feature_dim(), x.len())?;
        let x = self.normalization.apply(x);
        let mut dist: Vec<(usize, f64)> = self
            .vectors
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let d2: f64 = v.iter().zip(&x).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum();
                (i, d2.sqrt())
            })
            .collect();
        // Stable sort over the id-ordered store breaks ties by id.
        dist.sort_by(|a, b| a.1.total_cmp(&b.1));
        dist.truncate(self.k);
        Ok(dist)
    }

    pub fn score(&self, x: &[T]) -> Result<T> {
        let (mut fake, mut all) = (0.0, 0.0);
        for (i, d) in self.neighbors(x)? {
            let w = 1.0 / (d + self.epsilon);
            all += w;
            if self.labels[i] == Label::Fake {
                fake += w;
            }
        }
        Ok(T::of(fake / all))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn data() -> TrainingSet<f64> {
        TrainingSet::with_ids(
            vec![vec![0.0], vec![1.0], vec![2.0], vec![3.0]],
            vec![Label::Real, Label::Fake, Label::Real, Label::Fake],
            vec!["d".into(), "c".into(), "b".into(), "a".into()],
        )
        .unwrap()
    }

    #[test]
    fn nearest_fake_scores_one() {
        let m = SoftKnn::fit(&data(), Some(1), 1e-12, NormMode::None).unwrap();
        assert_eq!(m.score(&[1.0]).unwrap(), 1.0);
        assert_eq!(m.score(&[0.1]).unwrap(), 0.0);
    }

    #[test]
    fn ties_break_by_id() {
        let m = SoftKnn::fit(&data(), Some(1), 1e-12, NormMode::None).unwrap();
        // 1.5 is equidistant from ids "c" (fake) and "b" (real); "b" sorts first.
        let nn = m.neighbors(&[1.5]).unwrap();
        assert_eq!(m.ids[nn[0].0], "b");
        assert_eq!(m.score(&[1.5]).unwrap(), 0.0);
    }

    #[test]
    fn default_k_and_bounds() {
        let m = SoftKnn::fit(&data(), None, 1e-12, NormMode::None).unwrap();
        assert_eq!(m.k, 2);
        assert!(SoftKnn::fit(&data(), Some(0), 1e-12, NormMode::None).is_err());
        assert!(SoftKnn::fit(&data(), Some(5), 1e-12, NormMode::None).is_err());
    }
}
