//! Gaussian ablations: Mahalanobis distance with a shrunk pooled covariance,
//! and diagonal Gaussian naive Bayes.

use std::fmt;

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};

use super::{check_dim, margin_to_score, NormMode, TrainingSet};
use crate::error::{Error, Result};
use crate::manifest::Label;
use crate::num::Scalar;

/// Covariance shrinkage toward the diagonal: `(1 - l) S + l diag(S)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Shrinkage {
    /// Ledoit-Wolf style intensity estimated from the data.
    #[default]
    Auto,
    Fixed(f64),
}

impl Serialize for Shrinkage {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Shrinkage::Auto => s.serialize_str("auto"),
            Shrinkage::Fixed(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for Shrinkage {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = Shrinkage;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("\"auto\" or a number in [0, 1]")
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Shrinkage, E> {
                if v == "auto" {
                    Ok(Shrinkage::Auto)
                } else {
                    v.parse::<f64>().map(Shrinkage::Fixed).map_err(|_| E::custom(format!("bad shrinkage {v:?}")))
                }
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<Shrinkage, E> {
                Ok(Shrinkage::Fixed(v))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Shrinkage, E> {
                Ok(Shrinkage::Fixed(v as f64))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Shrinkage, E> {
                Ok(Shrinkage::Fixed(v as f64))
            }
        }
        d.deserialize_any(V)
    }
}

fn class_means(rows: &[Vec<f64>], labels: &[Label], dim: usize) -> [(Vec<f64>, usize); 2] {
    let mut out = [(vec![0.0; dim], 0usize), (vec![0.0; dim], 0usize)];
    for (r, l) in rows.iter().zip(labels) {
        let slot = &mut out[(*l == Label::Fake) as usize];
        slot.1 += 1;
        for (m, v) in slot.0.iter_mut().zip(r) {
            *m += v;
        }
    }
    for (m, n) in out.iter_mut() {
        m.iter_mut().for_each(|v| *v /= *n as f64);
    }
    out
}

fn to_f64<T: Scalar>(rows: Vec<Vec<T>>) -> Vec<Vec<f64>> {
    rows.into_iter().map(|r| r.into_iter().map(Scalar::as_f64).collect()).collect()
}

/// Lower Cholesky factor of a row-major SPD matrix, or `None` if a pivot
/// is not strictly positive.
pub(crate) fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > 0.0 && s.is_finite()) {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Squared norm of `L^-1 v` by forward substitution.
fn whitened_norm_sq(l: &[f64], n: usize, v: &[f64]) -> f64 {
    let mut z = vec![0.0; n];
    let mut acc = 0.0;
    for i in 0..n {
        let mut s = v[i];
        for k in 0..i {
            s -= l[i * n + k] * z[k];
        }
        z[i] = s / l[i * n + i];
        acc += z[i] * z[i];
    }
    acc
}

/// Mahalanobis classifier: `score = sigmoid((d2_real - d2_fake) / 2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mahalanobis<T> {
    pub mean_real: Vec<T>,
    pub mean_fake: Vec<T>,
    /// Row-major lower Cholesky factor of the shrunk covariance.
    pub cholesky: Vec<T>,
    pub shrinkage: f64,
    pub normalization: NormMode,
}

impl<T: Scalar> Mahalanobis<T> {
    pub fn fit(data: &TrainingSet<T>, shrinkage: Shrinkage, norm: NormMode) -> Result<Self> {
        let d = data.dim();
        let rows = to_f64(data.normalized(norm));
        let n = rows.len();
        let [(mr, _), (mf, _)] = class_means(&rows, &data.labels, d);
        let centered: Vec<Vec<f64>> = rows
            .iter()
            .zip(&data.labels)
            .map(|(r, l)| {
                let m = if *l == Label::Fake { &mf } else { &mr };
                r.iter().zip(m).map(|(a, b)| a - b).collect()
            })
            .collect();
        let denom = n.saturating_sub(2).max(1) as f64;
        let mut s = vec![0.0; d * d];
        for z in &centered {
            for i in 0..d {
                let zi = z[i];
                if zi == 0.0 {
                    continue;
                }
                for j in 0..=i {
                    s[i * d + j] += zi * z[j];
                }
            }
        }
        for i in 0..d {
            for j in 0..=i {
                s[i * d + j] /= denom;
                s[j * d + i] = s[i * d + j];
            }
        }
        let lambda = match shrinkage {
            Shrinkage::Fixed(v) if (0.0..=1.0).contains(&v) => v,
            Shrinkage::Fixed(v) => return Err(Error::Config(format!("shrinkage must lie in [0, 1], got {v}"))),
            Shrinkage::Auto => auto_shrinkage(&centered, d),
        };
        if lambda == 0.0 && n <= d {
            return Err(Error::SingularCovariance(format!("no shrinkage with {n} samples in dimension {d}")));
        }
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    s[i * d + j] *= 1.0 - lambda;
                }
            }
        }
        let l = cholesky(&s, d).ok_or_else(|| {
            Error::SingularCovariance(format!("covariance not positive definite (shrinkage {lambda})"))
        })?;
        Ok(Mahalanobis {
            mean_real: mr.into_iter().map(T::of).collect(),
            mean_fake: mf.into_iter().map(T::of).collect(),
            cholesky: l.into_iter().map(T::of).collect(),
            shrinkage: lambda,
            normalization: norm,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.mean_real.len()
    }

    /// Squared distances to the real and fake means.
    pub fn distances(&self, x: &[T]) -> Result<(f64, f64)> {
        let d = self.feature_dim();
        check_dim(d, x.len())?;
        let x: Vec<f64> = self.normalization.apply(x).into_iter().map(Scalar::as_f64).collect();
        let l: Vec<f64> = self.cholesky.iter().map(|v| v.as_f64()).collect();
        let diff = |m: &[T]| -> Vec<f64> { x.iter().zip(m).map(|(a, b)| a - b.as_f64()).collect() };
        Ok((whitened_norm_sq(&l, d, &diff(&self.mean_real)), whitened_norm_sq(&l, d, &diff(&self.mean_fake))))
    }

    pub fn score(&self, x: &[T]) -> Result<T> {
        let (dr, df) = self.distances(x)?;
        Ok(margin_to_score(T::of(0.5 * (dr - df))))
    }
}

/// Schafer-Strimmer estimate of the optimal shrinkage toward the diagonal,
/// computed from class-centered samples and clipped to `[0, 1]`.
fn auto_shrinkage(centered: &[Vec<f64>], d: usize) -> f64 {
    let n = centered.len() as f64;
    if n < 3.0 || d < 2 {
        return 1.0;
    }
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..d {
        for j in 0..i {
            let (mut sum, mut sum_sq) = (0.0, 0.0);
            for z in centered {
                let w = z[i] * z[j];
                sum += w;
                sum_sq += w * w;
            }
            let mean = sum / n;
            let s_ij = sum / (n - 1.0);
            let var = n / (n - 1.0).powi(3) * (sum_sq - n * mean * mean).max(0.0);
            num += var;
            den += s_ij * s_ij;
        }
    }
    if den <= 0.0 {
        1.0
    } else {
        (num / den).clamp(0.0, 1.0)
    }
}

/// Diagonal Gaussian per class with equal priors.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianNb<T> {
    pub mean_real: Vec<T>,
    pub var_real: Vec<T>,
    pub mean_fake: Vec<T>,
    pub var_fake: Vec<T>,
    pub variance_floor: f64,
    pub normalization: NormMode,
}

impl<T: Scalar> GaussianNb<T> {
    /// Maximum-likelihood means and variances; each variance is raised to
    /// at least `variance_floor`.
    pub fn fit(data: &TrainingSet<T>, variance_floor: f64, norm: NormMode) -> Result<Self> {
        if !(variance_floor.is_finite() && variance_floor > 0.0) {
            return Err(Error::Config(format!("variance floor must be positive, got {variance_floor}")));
        }
        let d = data.dim();
        let rows = to_f64(data.normalized(norm));
        let [(mr, nr), (mf, nf)] = class_means(&rows, &data.labels, d);
        let mut vr = vec![0.0; d];
        let mut vf = vec![0.0; d];
        for (r, l) in rows.iter().zip(&data.labels) {
            let (v, m) = if *l == Label::Fake { (&mut vf, &mf) } else { (&mut vr, &mr) };
            for ((vj, x), mj) in v.iter_mut().zip(r).zip(m) {
                *vj += (x - mj) * (x - mj);
            }
        }
        let finish = |v: Vec<f64>, n: usize| -> Vec<T> {
            v.into_iter().map(|s| T::of((s / n as f64).max(variance_floor))).collect()
        };
        Ok(GaussianNb {
            mean_real: mr.into_iter().map(T::of).collect(),
            var_real: finish(vr, nr),
            mean_fake: mf.into_iter().map(T::of).collect(),
            var_fake: finish(vf, nf),
            variance_floor,
            normalization: norm,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.mean_real.len()
    }

    /// Class-conditional log density of a normalized input.
    pub fn log_likelihood(&self, x: &[T], class: Label) -> Result<f64> {
        check_dim(self.feature_dim(), x.len())?;
        let (mean, var) = match class {
            Label::Real => (&self.mean_real, &self.var_real),
            Label::Fake => (&self.mean_fake, &self.var_fake),
        };
        let x = self.normalization.apply(x);
        Ok(x.iter()
            .zip(mean)
            .zip(var)
            .map(|((x, m), v)| {
                let (x, m, v) = (x.as_f64(), m.as_f64(), v.as_f64());
                -0.5 * (2.0 * std::f64::consts::PI * v).ln() - (x - m) * (x - m) / (2.0 * v)
            })
            .sum())
    }

    /// Posterior probability of the fake class.
    pub fn score(&self, x: &[T]) -> Result<T> {
        let margin = self.log_likelihood(x, Label::Fake)? - self.log_likelihood(x, Label::Real)?;
        Ok(margin_to_score(T::of(margin)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_reconstructs() {
        let a = [4.0, 2.0, 0.4, 2.0, 5.0, 1.0, 0.4, 1.0, 3.0];
        let l = cholesky(&a, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let s: f64 = (0..3).map(|k| l[i * 3 + k] * l[j * 3 + k]).sum();
                assert!((s - a[i * 3 + j]).abs() < 1e-12);
            }
        }
        assert!(cholesky(&[1.0, 2.0, 2.0, 1.0], 2).is_none());
    }

    #[test]
    fn gnb_symmetric_query_is_half() {
        let data = TrainingSet::new(
            vec![vec![-1.0f64], vec![-1.1], vec![1.0], vec![1.1]],
            vec![Label::Real, Label::Real, Label::Fake, Label::Fake],
        )
        .unwrap();
        let m = GaussianNb::fit(&data, 1e-9, NormMode::None).unwrap();
        assert_eq!(m.score(&[0.0]).unwrap(), 0.5);
        assert!(m.score(&[0.5]).unwrap() > 0.5);
    }

    #[test]
    fn gnb_variance_floor_applies() {
        let data = TrainingSet::new(
            vec![vec![1.0f64], vec![1.0], vec![2.0], vec![3.0]],
            vec![Label::Real, Label::Real, Label::Fake, Label::Fake],
        )
        .unwrap();
        let m = GaussianNb::fit(&data, 1e-9, NormMode::None).unwrap();
        assert_eq!(m.var_real, vec![1e-9]);
        assert_eq!(m.var_fake, vec![0.25]);
    }

    #[test]
    fn unshrunk_needs_more_samples_than_dims() {
        let data = TrainingSet::new(vec![vec![1.0f64, 0.0, 0.3], vec![0.0, 1.0, 0.2]], vec![Label::Real, Label::Fake])
            .unwrap();
        let err = Mahalanobis::fit(&data, Shrinkage::Fixed(0.0), NormMode::None).unwrap_err();
        assert!(matches!(err, Error::SingularCovariance(_)));
    }

    #[test]
    fn shrinkage_serde() {
        assert_eq!(serde_json::to_string(&Shrinkage::Auto).unwrap(), "\"auto\"");
        assert_eq!(serde_json::from_str::<Shrinkage>("0.25").unwrap(), Shrinkage::Fixed(0.25));
        assert_eq!(serde_json::from_str::<Shrinkage>("\"auto\"").unwrap(), Shrinkage::Auto);
    }
}
