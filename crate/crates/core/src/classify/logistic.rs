//! L2-regularized logistic regression fitted with L-BFGS.
//!
//! `f(w, b) = 1/2 (|w|^2 + b^2) + c * sum_i log(1 + exp(-y_i (w . x_i + b)))`

use std::collections::VecDeque;

use super::{LinearModel, NormMode, SolverReport, TrainingSet};
use crate::error::{Error, Result};
use crate::num::{sigmoid, softplus, Scalar};

const MEMORY: usize = 10;

/// Augmented problem; parameters are `[w..., b]` in f64.
#[derive(Debug, Clone)]
pub struct LogisticProblem {
    rows: Vec<Vec<f64>>,
    signs: Vec<f64>,
    c: f64,
}

impl LogisticProblem {
    pub fn new<T: Scalar>(data: &TrainingSet<T>, c: f64, norm: NormMode) -> Result<Self> {
        if !(c.is_finite() && c > 0.0) {
            return Err(Error::Config(format!("regularization c must be positive, got {c}")));
        }
        let rows = data
            .normalized(norm)
            .into_iter()
            .map(|r| r.iter().map(|v| v.as_f64()).chain(std::iter::once(1.0)).collect())
            .collect();
        let signs = data.signs().iter().map(|s| s.as_f64()).collect();
        Ok(LogisticProblem { rows, signs, c })
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    fn margins(&self, w: &[f64]) -> Vec<f64> {
        self.rows.iter().map(|r| r.iter().zip(w).map(|(a, b)| a * b).sum()).collect()
    }

    pub fn objective(&self, w: &[f64]) -> f64 {
        let loss: f64 = self.margins(w).iter().zip(&self.signs).map(|(m, y)| softplus(-y * m)).sum();
        0.5 * w.iter().map(|v| v * v).sum::<f64>() + self.c * loss
    }

    pub fn gradient(&self, w: &[f64]) -> Vec<f64> {
        let mut g = w.to_vec();
        for ((row, m), y) in self.rows.iter().zip(self.margins(w)).zip(&self.signs) {
            let coef = -self.c * y * sigmoid(-y * m);
            for (gj, xj) in g.iter_mut().zip(row) {
                *gj += coef * xj;
            }
        }
        g
    }

    /// Minimizes until the gradient norm is at most `tol`.
    pub fn solve(&self, tol: f64, max_iter: usize) -> Result<(Vec<f64>, SolverReport)> {
        if !(tol.is_finite() && tol > 0.0) {
            return Err(Error::Config(format!("solver tolerance must be positive, got {tol}")));
        }
        let mut w = vec![0.0; self.dim()];
        let mut f = self.objective(&w);
        let mut g = self.gradient(&w);
        let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(MEMORY);
        let mut report = SolverReport {
            iterations: 0,
            objective: f,
            duality_gap: None,
            gradient_norm: Some(norm(&g)),
            converged: false,
        };
        for it in 1..=max_iter {
            if norm(&g) <= tol {
                report.converged = true;
                break;
            }
            let mut d = two_loop(&g, &history);
            let mut slope = dotf(&g, &d);
            if slope >= 0.0 {
                history.clear();
                d = g.iter().map(|v| -v).collect();
                slope = -dotf(&g, &g);
            }
            // Backtracking line search with the Armijo condition.
            let mut step = 1.0;
            let (w_new, f_new) = loop {
                let cand: Vec<f64> = w.iter().zip(&d).map(|(a, b)| a + step * b).collect();
                let fc = self.objective(&cand);
                if fc <= f + 1e-4 * step * slope || step < 1e-20 {
                    break (cand, fc);
                }
                step *= 0.5;
            };
            let g_new = self.gradient(&w_new);
            let s: Vec<f64> = w_new.iter().zip(&w).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
            let sy = dotf(&s, &y);
            if sy > 1e-300 {
                if history.len() == MEMORY {
                    history.pop_front();
                }
                history.push_back((s, y, 1.0 / sy));
            }
            let stalled = f_new >= f && step < 1e-20;
            w = w_new;
            f = f_new;
            g = g_new;
            report.iterations = it;
            if stalled {
                break;
            }
        }
        report.objective = f;
        report.gradient_norm = Some(norm(&g));
        report.converged = norm(&g) <= tol;
        if !report.converged {
            log::warn!("logistic regression stopped with gradient norm {:?}", report.gradient_norm);
        }
        Ok((w, report))
    }
}

fn dotf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dotf(a, a).sqrt()
}

fn two_loop(g: &[f64], history: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * dotf(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        let gamma = dotf(s, y) / dotf(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dotf(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

pub fn train_logistic<T: Scalar>(
    data: &TrainingSet<T>,
    c: f64,
    norm: NormMode,
    tol: f64,
    max_iter: usize,
) -> Result<LinearModel<T>> {
    let problem = LogisticProblem::new(data, c, norm)?;
    let (w, report) = problem.solve(tol, max_iter)?;
    let (weights, bias) = w.split_at(w.len() - 1);
    Ok(LinearModel {
        weights: weights.iter().map(|&v| T::of(v)).collect(),
        bias: T::of(bias[0]),
        normalization: norm,
        regularization_c: c,
        solver_report: report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::Label;

    fn data() -> TrainingSet<f64> {
        TrainingSet::new(
            vec![vec![0.0, 1.0], vec![0.3, 0.8], vec![1.0, 0.1], vec![0.7, 0.2], vec![0.5, 0.5]],
            vec![Label::Real, Label::Real, Label::Fake, Label::Fake, Label::Fake],
        )
        .unwrap()
    }

    #[test]
    fn converges_to_tolerance() {
        let m = train_logistic(&data(), 5.0, NormMode::None, 1e-8, 1000).unwrap();
        assert!(m.solver_report.converged);
        assert!(m.solver_report.gradient_norm.unwrap() <= 1e-8);
        assert!(m.score(&[1.0, 0.0]).unwrap() > 0.5);
        assert!(m.score(&[0.0, 1.0]).unwrap() < 0.5);
    }

    #[test]
    fn gradient_vanishes_at_solution() {
        let p = LogisticProblem::new(&data(), 1.0, NormMode::L2Unit).unwrap();
        let (w, _) = p.solve(1e-10, 1000).unwrap();
        assert!(norm(&p.gradient(&w)) <= 1e-10);
    }
}
