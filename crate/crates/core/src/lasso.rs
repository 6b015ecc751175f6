//! Weighted L1-penalized least squares and post-LASSO refitting.
//!
//! The solver minimises
//!
//! ```text
//! (1/n) Σ_r (y_r - b0 - f_r'ζ)² + (λ/n) Σ_j ω_j |ζ_j|
//! ```
//!
//! with an unpenalized intercept `b0`, by cyclic coordinate descent on the
//! centred problem. Gradients are kept up to date through covariance
//! updates: a Gram column `F̃'F̃_k` is computed the first time coordinate
//! `k` moves and cached for the lifetime of the solver, so repeated solves
//! on the same design (different weights, penalty levels or responses) are
//! cheap once the support has stabilised.

use nalgebra::{DMatrix, DVector};

use crate::data::FeatureMatrix;
use crate::error::{Error, Result};
use crate::numerics::solve_normal_equations;

/// Coefficients smaller than this are set to exactly zero after a solve.
const ZERO_THRESHOLD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LassoOptions {
    /// Convergence tolerance on the largest coefficient change in a full
    /// sweep; also the tolerance of the KKT certificate.
    pub tol: f64,
    /// Maximum number of coordinate sweeps.
    pub max_iter: usize,
    /// Record the objective after every sweep.
    pub record_history: bool,
}

impl Default for LassoOptions {
    fn default() -> Self {
        Self {
            tol: 1e-7,
            max_iter: 10_000,
            record_history: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LassoFit {
    /// One entry per feature column; the intercept column (if any) is 0.
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    /// Indices of the non-zero coefficients, increasing.
    pub selected: Vec<usize>,
    pub residuals: DVector<f64>,
    pub objective_value: f64,
    /// Penalty level used; zero for post-LASSO fits.
    pub lambda: f64,
    pub n_iterations: usize,
    pub converged: bool,
    /// Post-LASSO only: the selected columns were collinear and the
    /// minimum-norm least-squares solution was used.
    pub rank_deficient: bool,
    pub objective_history: Vec<f64>,
}

impl LassoFit {
    /// Fitted values `b0 + F ζ` for new rows.
    pub fn predict(&self, features: &DMatrix<f64>) -> DVector<f64> {
        predict(features, self.intercept, &self.coefficients)
    }
}

pub(crate) fn predict(features: &DMatrix<f64>, intercept: f64, coefficients: &[f64]) -> DVector<f64> {
    let mut out = DVector::from_element(features.nrows(), intercept);
    for (j, &b) in coefficients.iter().enumerate() {
        if b != 0.0 {
            out.axpy(b, &features.column(j), 1.0);
        }
    }
    out
}

/// A response vector prepared for repeated solves against one design.
#[derive(Debug, Clone)]
pub struct PreparedResponse {
    y: DVector<f64>,
    mean: f64,
    /// `F̃'ỹ` for every column.
    cross: Vec<f64>,
    centered_sq: f64,
}

impl PreparedResponse {
    pub fn values(&self) -> &DVector<f64> {
        &self.y
    }
}

/// Coordinate-descent solver bound to one design matrix.
#[derive(Debug)]
pub struct LassoSolver<'a> {
    x: &'a DMatrix<f64>,
    means: Vec<f64>,
    /// Centred squared column norms, the diagonal of the Gram matrix.
    sq_norms: Vec<f64>,
    penalized: Vec<bool>,
    gram: Vec<Option<Vec<f64>>>,
}

impl<'a> LassoSolver<'a> {
    pub fn new(features: &'a FeatureMatrix) -> Result<Self> {
        let x = features.values();
        let (n, p) = x.shape();
        if n == 0 {
            return Err(Error::InvalidInput("design has no rows".into()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("design contains non-finite values".into()));
        }
        let intercept = features.intercept_column();
        let mut means = Vec::with_capacity(p);
        let mut sq_norms = Vec::with_capacity(p);
        let mut penalized = Vec::with_capacity(p);
        for j in 0..p {
            let col = x.column(j);
            let mean = col.sum() / n as f64;
            let raw_sq = col.norm_squared();
            let centered_sq: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum();
            let is_intercept = Some(j) == intercept;
            if !is_intercept && centered_sq <= 1e-14 * raw_sq.max(f64::MIN_POSITIVE) {
                return Err(Error::InvalidInput(format!(
                    "column `{}` has zero variance",
                    features.column_names()[j]
                )));
            }
            means.push(mean);
            sq_norms.push(if is_intercept { 0.0 } else { centered_sq });
            penalized.push(!is_intercept);
        }
        Ok(Self {
            x,
            means,
            sq_norms,
            penalized,
            gram: vec![None; p],
        })
    }

    pub fn design(&self) -> &'a DMatrix<f64> {
        self.x
    }

    pub fn n_rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_penalized(&self) -> usize {
        self.penalized.iter().filter(|&&b| b).count()
    }

    pub fn n_cols(&self) -> usize {
        self.x.ncols()
    }

    pub fn prepare(&self, y: &DVector<f64>) -> Result<PreparedResponse> {
        let n = self.x.nrows();
        if y.len() != n {
            return Err(Error::InvalidInput(format!(
                "response has {} entries, design has {n} rows",
                y.len()
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("response contains non-finite values".into()));
        }
        let mean = y.sum() / n as f64;
        let raw = self.x.tr_mul(y);
        let cross = (0..self.x.ncols())
            .map(|j| if self.penalized[j] { raw[j] - n as f64 * self.means[j] * mean } else { 0.0 })
            .collect();
        let centered_sq = y.iter().map(|v| (v - mean) * (v - mean)).sum();
        Ok(PreparedResponse {
            y: y.clone(),
            mean,
            cross,
            centered_sq,
        })
    }

    fn gram_column(&mut self, k: usize) -> &[f64] {
        if self.gram[k].is_none() {
            let n = self.x.nrows() as f64;
            let raw = self.x.tr_mul(&self.x.column(k));
            let mk = self.means[k];
            let col = (0..self.x.ncols())
                .map(|j| if self.penalized[j] { raw[j] - n * self.means[j] * mk } else { 0.0 })
                .collect();
            self.gram[k] = Some(col);
        }
        self.gram[k].as_deref().expect("gram column just computed")
    }

    /// Solves the weighted LASSO. `weights` has one entry per column; the
    /// entry of the intercept column is ignored.
    pub fn solve(
        &mut self,
        response: &PreparedResponse,
        lambda: f64,
        weights: &[f64],
        options: &LassoOptions,
        warm_start: Option<&[f64]>,
    ) -> Result<LassoFit> {
        let p = self.x.ncols();
        let n = self.x.nrows() as f64;
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidInput(format!("penalty level must be finite and >= 0, got {lambda}")));
        }
        if weights.len() != p {
            return Err(Error::InvalidInput(format!("{} weights for {p} columns", weights.len())));
        }
        if let Some((j, w)) = weights
            .iter()
            .enumerate()
            .find(|&(j, w)| self.penalized[j] && !(w.is_finite() && *w >= 0.0))
        {
            return Err(Error::InvalidInput(format!("weight {j} must be finite and >= 0, got {w}")));
        }

        let thresholds: Vec<f64> = (0..p)
            .map(|j| if self.penalized[j] { 0.5 * lambda * weights[j] } else { 0.0 })
            .collect();
        let mut coef = vec![0.0; p];
        let mut grad = response.cross.clone();
        if let Some(start) = warm_start {
            if start.len() != p {
                return Err(Error::InvalidInput("warm start has wrong length".into()));
            }
            for k in 0..p {
                if self.penalized[k] && start[k] != 0.0 {
                    coef[k] = start[k];
                    let col = self.gram_column(k).to_vec();
                    for (g, c) in grad.iter_mut().zip(&col) {
                        *g -= c * start[k];
                    }
                }
            }
        }

        let objective = |coef: &[f64], grad: &[f64]| -> f64 {
            let mut quad = response.centered_sq;
            let mut pen = 0.0;
            for j in 0..p {
                if coef[j] != 0.0 {
                    quad -= coef[j] * (response.cross[j] + grad[j]);
                    pen += weights[j] * coef[j].abs();
                }
            }
            quad.max(0.0) / n + lambda * pen / n
        };

        let all: Vec<usize> = (0..p).filter(|&j| self.penalized[j]).collect();
        let mut history = Vec::new();
        let mut iterations = 0;
        let mut converged = false;
        while iterations < options.max_iter {
            let delta = self.sweep(&all, &mut coef, &mut grad, &thresholds);
            iterations += 1;
            if options.record_history {
                history.push(objective(&coef, &grad));
            }
            if delta < options.tol && self.kkt_violation_from_grad(&coef, &grad, lambda, weights) <= options.tol {
                converged = true;
                break;
            }
            let active: Vec<usize> = all.iter().copied().filter(|&j| coef[j] != 0.0).collect();
            while iterations < options.max_iter {
                let delta = self.sweep(&active, &mut coef, &mut grad, &thresholds);
                iterations += 1;
                if options.record_history {
                    history.push(objective(&coef, &grad));
                }
                if delta < options.tol {
                    break;
                }
            }
        }

        for c in coef.iter_mut() {
            if c.abs() < ZERO_THRESHOLD {
                *c = 0.0;
            }
        }
        let mut fit = self.finish(response, coef, lambda, weights);
        fit.n_iterations = iterations;
        fit.converged = converged;
        fit.objective_history = history;
        Ok(fit)
    }

    fn sweep(&mut self, coords: &[usize], coef: &mut [f64], grad: &mut [f64], thresholds: &[f64]) -> f64 {
        let mut max_delta = 0.0_f64;
        for &j in coords {
            let gjj = self.sq_norms[j];
            let old = coef[j];
            let z = grad[j] + gjj * old;
            let new = soft_threshold(z, thresholds[j]) / gjj;
            if new != old {
                let diff = new - old;
                let col = self.gram_column(j);
                for (g, c) in grad.iter_mut().zip(col) {
                    *g -= c * diff;
                }
                coef[j] = new;
                max_delta = max_delta.max(diff.abs());
            }
        }
        max_delta
    }

    fn kkt_violation_from_grad(&self, coef: &[f64], grad: &[f64], lambda: f64, weights: &[f64]) -> f64 {
        let n = self.x.nrows() as f64;
        (0..coef.len())
            .filter(|&j| self.penalized[j])
            .map(|j| kkt_term(2.0 * grad[j] / n, lambda * weights[j] / n, coef[j]))
            .fold(0.0, f64::max)
    }

    fn finish(&self, response: &PreparedResponse, coef: Vec<f64>, lambda: f64, weights: &[f64]) -> LassoFit {
        let n = self.x.nrows() as f64;
        let intercept = response.mean - coef.iter().zip(&self.means).map(|(b, m)| b * m).sum::<f64>();
        let fitted = predict(self.x, intercept, &coef);
        let residuals = &response.y - fitted;
        let penalty: f64 = coef
            .iter()
            .enumerate()
            .filter(|&(j, _)| self.penalized[j])
            .map(|(j, b)| weights[j] * b.abs())
            .sum();
        let objective_value = residuals.norm_squared() / n + lambda * penalty / n;
        let selected = coef.iter().enumerate().filter(|(_, b)| **b != 0.0).map(|(j, _)| j).collect();
        LassoFit {
            coefficients: coef,
            intercept,
            selected,
            residuals,
            objective_value,
            lambda,
            n_iterations: 0,
            converged: true,
            rank_deficient: false,
            objective_history: Vec::new(),
        }
    }

    /// Least squares on the intercept plus the `selected` columns.
    pub fn post_lasso(&mut self, response: &PreparedResponse, selected: &[usize]) -> Result<LassoFit> {
        let p = self.x.ncols();
        let mut support: Vec<usize> = selected.iter().copied().filter(|&j| j < p && self.penalized[j]).collect();
        if support.len() != selected.len() && selected.iter().any(|&j| j >= p) {
            return Err(Error::InvalidInput("selected index out of range".into()));
        }
        support.sort_unstable();
        support.dedup();

        let s = support.len();
        let mut gram = DMatrix::zeros(s, s);
        for (b, &k) in support.iter().enumerate() {
            let col = self.gram_column(k);
            for (a, &j) in support.iter().enumerate() {
                gram[(a, b)] = col[j];
            }
        }
        let rhs = DVector::from_iterator(s, support.iter().map(|&j| response.cross[j]));
        let solution = solve_normal_equations(&gram, &rhs, self.x.nrows());

        let mut coef = vec![0.0; p];
        for (a, &j) in support.iter().enumerate() {
            coef[j] = solution.coefficients[a];
        }
        let zero_weights = vec![0.0; p];
        let mut fit = self.finish(response, coef, 0.0, &zero_weights);
        fit.rank_deficient = solution.rank_deficient;
        Ok(fit)
    }

    /// Largest violation of the weighted-LASSO optimality conditions, computed
    /// from scratch from the fit's residuals.
    pub fn kkt_violation(&self, fit: &LassoFit, weights: &[f64]) -> f64 {
        kkt_violation(self.x, &self.penalized, fit, weights)
    }
}

fn kkt_term(grad_scaled: f64, pen_scaled: f64, coef: f64) -> f64 {
    if coef != 0.0 {
        (grad_scaled - pen_scaled * coef.signum()).abs()
    } else {
        (grad_scaled.abs() - pen_scaled).max(0.0)
    }
}

fn kkt_violation(x: &DMatrix<f64>, penalized: &[bool], fit: &LassoFit, weights: &[f64]) -> f64 {
    let n = x.nrows() as f64;
    let grad = x.tr_mul(&fit.residuals);
    (0..x.ncols())
        .filter(|&j| penalized[j])
        .map(|j| kkt_term(2.0 * grad[j] / n, fit.lambda * weights[j] / n, fit.coefficients[j]))
        .fold(0.0, f64::max)
}

#[inline]
pub fn soft_threshold(z: f64, threshold: f64) -> f64 {
    if z > threshold {
        z - threshold
    } else if z < -threshold {
        z + threshold
    } else {
        0.0
    }
}

/// Weighted LASSO with an unpenalized intercept.
pub fn solve_weighted_lasso(
    features: &FeatureMatrix,
    response: &DVector<f64>,
    lambda: f64,
    weights: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<LassoFit> {
    let mut solver = LassoSolver::new(features)?;
    let prepared = solver.prepare(response)?;
    let options = LassoOptions {
        tol,
        max_iter,
        record_history: false,
    };
    solver.solve(&prepared, lambda, weights, &options, None)
}

/// OLS refit on the intercept plus the `selected` columns.
pub fn post_lasso(features: &FeatureMatrix, response: &DVector<f64>, selected: &[usize]) -> Result<LassoFit> {
    let mut solver = LassoSolver::new(features)?;
    let prepared = solver.prepare(response)?;
    solver.post_lasso(&prepared, selected)
}

/// KKT violation of `fit` for the given features and weights.
pub fn kkt_certificate(features: &FeatureMatrix, fit: &LassoFit, weights: &[f64]) -> f64 {
    let intercept = features.intercept_column();
    let penalized: Vec<bool> = (0..features.n_cols()).map(|j| Some(j) != intercept).collect();
    kkt_violation(features.values(), &penalized, fit, weights)
}
