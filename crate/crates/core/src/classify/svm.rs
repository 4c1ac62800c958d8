//! L2-regularized hinge-loss SVM solved by dual coordinate descent.
//!
//! The bias is learned as the weight of a constant feature equal to one,
//! so it is regularized together with `w`:
//!
//! ```text
//! P(w, b) = 1/2 (|w|^2 + b^2) + c * sum_i max(0, 1 - y_i (w . x_i + b))
//! D(a)    = sum_i a_i - 1/2 |sum_i a_i y_i [x_i, 1]|^2,   0 <= a_i <= c
//! ```

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{LinearModel, NormMode, SolverReport, TrainingSet};
use crate::error::{Error, Result};
use crate::num::{axpy, dot, Scalar};

/// Augmented training problem `(x_i, 1)` with labels in `{-1, +1}`.
#[derive(Debug, Clone)]
pub struct SvmProblem<T> {
    pub rows: Vec<Vec<T>>,
    pub signs: Vec<T>,
    pub c: T,
}

impl<T: Scalar> SvmProblem<T> {
    pub fn new(data: &TrainingSet<T>, c: f64, norm: NormMode) -> Result<Self> {
        if !(c.is_finite() && c > 0.0) {
            return Err(Error::Config(format!("regularization c must be positive, got {c}")));
        }
        let rows = data
            .normalized(norm)
            .into_iter()
            .map(|mut r| {
                r.push(T::one());
                r
            })
            .collect();
        Ok(SvmProblem { rows, signs: data.signs(), c: T::of(c) })
    }

    /// Augmented dimension (features plus the bias column).
    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    /// `sum_i a_i y_i x_i`, accumulated in f64.
    pub fn weights_from_dual(&self, alpha: &[f64]) -> Vec<f64> {
        let mut w = vec![0.0; self.dim()];
        for ((row, &y), &a) in self.rows.iter().zip(&self.signs).zip(alpha) {
            if a != 0.0 {
                let ay = a * y.as_f64();
                for (wj, &xj) in w.iter_mut().zip(row) {
                    *wj += ay * xj.as_f64();
                }
            }
        }
        w
    }

    pub fn primal(&self, w: &[f64]) -> f64 {
        let c = self.c.as_f64();
        let reg = 0.5 * w.iter().map(|v| v * v).sum::<f64>();
        let loss: f64 = self
            .rows
            .iter()
            .zip(&self.signs)
            .map(|(row, &y)| {
                let m: f64 = row.iter().zip(w).map(|(&x, &wj)| x.as_f64() * wj).sum();
                (1.0 - y.as_f64() * m).max(0.0)
            })
            .sum();
        reg + c * loss
    }

    pub fn dual(&self, alpha: &[f64]) -> f64 {
        let w = self.weights_from_dual(alpha);
        alpha.iter().sum::<f64>() - 0.5 * w.iter().map(|v| v * v).sum::<f64>()
    }

    /// Runs coordinate descent until `P - D <= tol * P` or `max_epochs`
    /// passes. Returns the dual variables, augmented weights and report.
    pub fn solve(&self, tol: f64, seed: u64, max_epochs: usize) -> Result<(Vec<f64>, Vec<f64>, SolverReport)> {
        if !(tol.is_finite() && tol > 0.0) {
            return Err(Error::Config(format!("solver tolerance must be positive, got {tol}")));
        }
        let n = self.rows.len();
        let c = self.c;
        let qd: Vec<T> = self.rows.iter().map(|r| dot(r, r)).collect();
        let mut alpha = vec![T::zero(); n];
        let mut w = vec![T::zero(); self.dim()];
        let mut index: Vec<usize> = (0..n).collect();
        let mut active = n;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let mut pg_max_old = T::infinity();
        let mut pg_min_old = T::neg_infinity();
        let mut eps_pg = T::of(1.0);

        let mut report = SolverReport {
            iterations: 0,
            objective: f64::NAN,
            duality_gap: None,
            gradient_norm: None,
            converged: false,
        };
        let mut w64 = vec![0.0; self.dim()];

        for epoch in 1..=max_epochs {
            index[..active].shuffle(&mut rng);
            let mut pg_max_new = T::neg_infinity();
            let mut pg_min_new = T::infinity();
            let mut s = 0;
            while s < active {
                let i = index[s];
                let y = self.signs[i];
                let g = y * dot(&w, &self.rows[i]) - T::one();
                let mut pg = T::zero();
                if alpha[i] == T::zero() {
                    if g > pg_max_old {
                        active -= 1;
                        index.swap(s, active);
                        continue;
                    } else if g < T::zero() {
                        pg = g;
                    }
                } else if alpha[i] == c {
                    if g < pg_min_old {
                        active -= 1;
                        index.swap(s, active);
                        continue;
                    } else if g > T::zero() {
                        pg = g;
                    }
                } else {
                    pg = g;
                }
                pg_max_new = pg_max_new.max(pg);
                pg_min_new = pg_min_new.min(pg);
                if pg != T::zero() {
                    let old = alpha[i];
                    alpha[i] = (old - g / qd[i]).max(T::zero()).min(c);
                    axpy((alpha[i] - old) * y, &self.rows[i], &mut w);
                }
                s += 1;
            }
            report.iterations = epoch;

            // Rebuild w from alpha to keep accumulated rounding out of the gap.
            let alpha64: Vec<f64> = alpha.iter().map(|a| a.as_f64()).collect();
            w64 = self.weights_from_dual(&alpha64);
            for (wt, &wf) in w.iter_mut().zip(&w64) {
                *wt = T::of(wf);
            }
            let p = self.primal(&w64);
            let d = alpha64.iter().sum::<f64>() - 0.5 * w64.iter().map(|v| v * v).sum::<f64>();
            let gap = p - d;
            report.objective = p;
            report.duality_gap = Some(gap);
            if gap <= tol * p {
                report.converged = true;
                break;
            }

            if active == 0 || pg_max_new - pg_min_new <= eps_pg {
                if active == n {
                    eps_pg = eps_pg * T::of(0.1);
                } else {
                    active = n;
                    pg_max_old = T::infinity();
                    pg_min_old = T::neg_infinity();
                    continue;
                }
            }
            pg_max_old = if pg_max_new > T::zero() { pg_max_new } else { T::infinity() };
            pg_min_old = if pg_min_new < T::zero() { pg_min_new } else { T::neg_infinity() };
        }
        if !report.converged {
            log::warn!("svm stopped after {} epochs with gap {:?}", report.iterations, report.duality_gap);
        }
        let alpha64 = alpha.iter().map(|a| a.as_f64()).collect();
        Ok((alpha64, w64, report))
    }
}

/// Trains the detector. Deterministic for fixed inputs and `seed`.
pub fn train_svm<T: Scalar>(
    data: &TrainingSet<T>,
    c: f64,
    norm: NormMode,
    tol: f64,
    seed: u64,
    max_epochs: usize,
) -> Result<LinearModel<T>> {
    let problem = SvmProblem::new(data, c, norm)?;
    let (_, w, report) = problem.solve(tol, seed, max_epochs)?;
    let (weights, bias) = w.split_at(w.len() - 1);
    Ok(LinearModel {
        weights: weights.iter().map(|&v| T::of(v)).collect(),
        bias: T::of(bias[0]),
        normalization: norm,
        regularization_c: c,
        solver_report: report,
    })
}
