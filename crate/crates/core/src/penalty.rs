//! Regressor-specific penalty loadings for LASSO under two-way clustering.
//!
//! Scores `v_it,j = f_it,j * V_it` are split into unit, time and idiosyncratic
//! parts. The two-way loading combines a cluster-by-unit sum, a Bartlett
//! long-run sum over time and a within-unit HAC term, the latter subtracted
//! from the other two so that it is counted once.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{FeatureMatrix, PanelLayout};
use crate::dml::andrews_rule;
use crate::error::{Error, Result};
use crate::lasso::{LassoFit, LassoOptions, LassoSolver, PreparedResponse};
use crate::numerics::{bartlett_weight, normal_quantile, sample_variance};

/// Scores for a rectangular (sub-)panel: one row per cell in unit-major
/// order over `layout.times`, one column per regressor.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelScores {
    layout: PanelLayout,
    values: DMatrix<f64>,
}

impl PanelScores {
    pub fn new(layout: PanelLayout, values: DMatrix<f64>) -> Result<Self> {
        if layout.n_units == 0 || layout.times.is_empty() {
            return Err(Error::InvalidInput("score panel is empty".into()));
        }
        if values.nrows() != layout.n_rows() {
            return Err(Error::InvalidInput(format!(
                "{} score rows for a {} x {} panel",
                values.nrows(),
                layout.n_units,
                layout.n_periods()
            )));
        }
        if layout.times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput("period positions must be strictly increasing".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("scores contain non-finite values".into()));
        }
        Ok(Self { layout, values })
    }

    /// `v_r,j = f_r,j * residual_r`.
    pub fn from_residuals(features: &DMatrix<f64>, residuals: &DVector<f64>, layout: PanelLayout) -> Result<Self> {
        if features.nrows() != residuals.len() {
            return Err(Error::InvalidInput("feature and residual lengths differ".into()));
        }
        let mut values = features.clone();
        for mut col in values.column_iter_mut() {
            col.component_mul_assign(residuals);
        }
        Self::new(layout, values)
    }

    pub fn layout(&self) -> &PanelLayout {
        &self.layout
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn n_units(&self) -> usize {
        self.layout.n_units
    }

    pub fn n_periods(&self) -> usize {
        self.layout.n_periods()
    }

    pub fn n_cols(&self) -> usize {
        self.values.ncols()
    }

    /// Column `j` as an `N x T` matrix.
    pub fn column_panel(&self, j: usize) -> DMatrix<f64> {
        let t = self.n_periods();
        DMatrix::from_fn(self.n_units(), t, |i, s| self.values[(i * t + s, j)])
    }
}

/// `v = a + g + e` with `a` the unit means, `g` the period means and `e`
/// the remainder, for every column.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentDecomposition {
    pub layout: PanelLayout,
    /// `N x p`.
    pub a: DMatrix<f64>,
    /// `T x p`.
    pub g: DMatrix<f64>,
    /// `NT x p`, unit-major rows.
    pub e: DMatrix<f64>,
}

impl ComponentDecomposition {
    /// Wraps externally known components, e.g. the true ones of a simulation.
    pub fn new(layout: PanelLayout, a: DMatrix<f64>, g: DMatrix<f64>, e: DMatrix<f64>) -> Result<Self> {
        let p = a.ncols();
        if a.nrows() != layout.n_units
            || g.nrows() != layout.n_periods()
            || e.nrows() != layout.n_rows()
            || g.ncols() != p
            || e.ncols() != p
        {
            return Err(Error::InvalidInput("component shapes do not match the panel".into()));
        }
        Ok(Self { layout, a, g, e })
    }

    pub fn n_cols(&self) -> usize {
        self.a.ncols()
    }

    /// `a_i + g_t + e_it` for every cell and column.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let t = self.layout.n_periods();
        DMatrix::from_fn(self.e.nrows(), self.e.ncols(), |r, j| {
            self.a[(r / t, j)] + self.g[(r % t, j)] + self.e[(r, j)]
        })
    }
}

pub fn decompose(scores: &PanelScores) -> ComponentDecomposition {
    let (n, t, p) = (scores.n_units(), scores.n_periods(), scores.n_cols());
    let v = &scores.values;
    let mut a = DMatrix::zeros(n, p);
    let mut g = DMatrix::zeros(t, p);
    for j in 0..p {
        for i in 0..n {
            for s in 0..t {
                let x = v[(i * t + s, j)];
                a[(i, j)] += x;
                g[(s, j)] += x;
            }
        }
    }
    a /= t as f64;
    g /= n as f64;
    let e = DMatrix::from_fn(n * t, p, |r, j| v[(r, j)] - a[(r / t, j)] - g[(r % t, j)]);
    ComponentDecomposition {
        layout: scores.layout.clone(),
        a,
        g,
        e,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyVariant {
    TwoWay,
    Cluster,
    Heteroskedastic,
    Initial,
}

impl PenaltyVariant {
    /// Whether the penalty level scales with `sqrt(NT)` instead of `sqrt(N) T`.
    pub fn degenerate_level(self) -> bool {
        matches!(self, PenaltyVariant::Heteroskedastic | PenaltyVariant::Initial)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthRule {
    /// Andrews rule on the period means of each column's scores.
    #[default]
    Andrews,
    Fixed(usize),
}

/// Squared loading pieces of one regressor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightComponents {
    pub a: f64,
    pub g: f64,
    pub e: f64,
}

impl WeightComponents {
    pub fn combined(&self) -> f64 {
        (self.a - self.e).max(0.0) + (self.g - self.e).max(0.0) + self.e
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyPlan {
    pub variant: PenaltyVariant,
    /// `ω_j >= 0`, one per column. Zero marks a degenerate column.
    pub weights: Vec<f64>,
    /// Two-way variant only.
    pub components: Vec<WeightComponents>,
    pub lambda: Option<f64>,
    pub c_lambda: Option<f64>,
    pub gamma: Option<f64>,
    /// Bartlett bandwidth used per column; empty when no lag window applies.
    pub bandwidths: Vec<usize>,
    pub degenerate_columns: Vec<usize>,
    pub diagnostics: Vec<String>,
}

impl PenaltyPlan {
    fn from_weights(variant: PenaltyVariant, weights: Vec<f64>) -> Self {
        let degenerate_columns: Vec<usize> = weights
            .iter()
            .enumerate()
            .filter(|(_, w)| **w == 0.0)
            .map(|(j, _)| j)
            .collect();
        let diagnostics = if degenerate_columns.is_empty() {
            Vec::new()
        } else {
            vec![format!(
                "{} column(s) with all-zero scores get the smallest positive weight",
                degenerate_columns.len()
            )]
        };
        Self {
            variant,
            weights,
            components: Vec::new(),
            lambda: None,
            c_lambda: None,
            gamma: None,
            bandwidths: Vec::new(),
            degenerate_columns,
            diagnostics,
        }
    }

    /// Weights to hand to the solver: zero weights replaced by the smallest
    /// positive weight (or 1 if none is positive).
    pub fn solver_weights(&self) -> Vec<f64> {
        let floor = self
            .weights
            .iter()
            .copied()
            .filter(|w| *w > 0.0)
            .fold(f64::INFINITY, f64::min);
        let floor = if floor.is_finite() { floor } else { 1.0 };
        self.weights.iter().map(|&w| if w > 0.0 { w } else { floor }).collect()
    }

    /// Fills in `lambda` for a panel of `n_units x n_periods` and `p` penalized regressors.
    pub fn with_level(mut self, n_units: usize, n_periods: usize, p: usize, c_lambda: f64, gamma: f64) -> Result<Self> {
        let lambda = penalty_level(n_units, n_periods, p, c_lambda, gamma, self.variant.degenerate_level())?;
        self.lambda = Some(lambda);
        self.c_lambda = Some(c_lambda);
        self.gamma = Some(gamma);
        Ok(self)
    }
}

/// Pairs `(a, b)` of period positions with `a <= b` and a positive Bartlett
/// weight, with the weight doubled for `a < b`.
fn lag_pairs(times: &[usize], bandwidth: usize) -> Vec<(usize, usize, f64)> {
    let mut pairs = Vec::new();
    for a in 0..times.len() {
        pairs.push((a, a, 1.0));
        for b in a + 1..times.len() {
            let w = bartlett_weight(times[b] - times[a], bandwidth);
            if w == 0.0 {
                break;
            }
            pairs.push((a, b, 2.0 * w));
        }
    }
    pairs
}

fn resolve_bandwidth(rule: BandwidthRule, panel: &DMatrix<f64>) -> Result<usize> {
    match rule {
        BandwidthRule::Fixed(0) => Err(Error::Domain("bandwidth must be >= 1".into())),
        BandwidthRule::Fixed(m) => Ok(m),
        BandwidthRule::Andrews if panel.ncols() < 3 => Ok(1),
        BandwidthRule::Andrews => {
            let n = panel.nrows() as f64;
            let means: Vec<f64> = panel.column_iter().map(|c| c.sum() / n).collect();
            Ok(andrews_rule(&means)?.bandwidth)
        }
    }
}

fn feasible_components(panel: &DMatrix<f64>, times: &[usize], bandwidth: usize) -> WeightComponents {
    let (n, t) = panel.shape();
    let denom = n as f64 * (t * t) as f64;
    let row_sums: Vec<f64> = panel.row_iter().map(|r| r.sum()).collect();
    let col_sums: Vec<f64> = panel.column_iter().map(|c| c.sum()).collect();
    let a = row_sums.iter().map(|s| s * s).sum::<f64>() / denom;

    let pairs = lag_pairs(times, bandwidth);
    let g = pairs.iter().map(|&(x, y, w)| w * col_sums[x] * col_sums[y]).sum::<f64>() / denom;

    let e_mat = DMatrix::from_fn(n, t, |i, s| {
        panel[(i, s)] - row_sums[i] / t as f64 - col_sums[s] / n as f64
    });
    let mut e = 0.0;
    for &(x, y, w) in &pairs {
        e += w * e_mat.column(x).dot(&e_mat.column(y));
    }
    WeightComponents { a, g, e: e / denom }
}

/// Two-way loadings from residual scores. `lambda` is left unset.
pub fn feasible_weights(scores: &PanelScores, bandwidth: BandwidthRule) -> Result<PenaltyPlan> {
    let times = &scores.layout.times;
    let mut components = Vec::with_capacity(scores.n_cols());
    let mut bandwidths = Vec::with_capacity(scores.n_cols());
    for j in 0..scores.n_cols() {
        let panel = scores.column_panel(j);
        let m = resolve_bandwidth(bandwidth, &panel)?;
        components.push(feasible_components(&panel, times, m));
        bandwidths.push(m);
    }
    let weights = components.iter().map(|c| c.combined().max(0.0).sqrt()).collect();
    let mut plan = PenaltyPlan::from_weights(PenaltyVariant::TwoWay, weights);
    let t = scores.n_periods();
    if bandwidths.iter().any(|&m| m >= t) {
        plan.diagnostics.push(format!("bandwidth >= T = {t}; lag window covers every pair"));
    }
    plan.components = components;
    plan.bandwidths = bandwidths;
    Ok(plan)
}

/// Heteroskedastic (`(1/NT) Σ v²`) or cluster-by-unit (`(1/NT²) Σ_i (Σ_t v)²`) loadings.
pub fn baseline_weights(scores: &PanelScores, variant: PenaltyVariant) -> Result<PenaltyPlan> {
    let (n, t) = (scores.n_units() as f64, scores.n_periods() as f64);
    let weights = match variant {
        PenaltyVariant::Heteroskedastic => scores
            .values
            .column_iter()
            .map(|c| (c.norm_squared() / (n * t)).sqrt())
            .collect(),
        PenaltyVariant::Cluster => (0..scores.n_cols())
            .map(|j| {
                let panel = scores.column_panel(j);
                (panel.row_iter().map(|r| r.sum().powi(2)).sum::<f64>() / (n * t * t)).sqrt()
            })
            .collect(),
        other => {
            return Err(Error::Config(format!("{other:?} is not a baseline weight variant")));
        }
    };
    Ok(PenaltyPlan::from_weights(variant, weights))
}

/// `2 C_λ sqrt(N) T Φ⁻¹(1 - γ/2p)`, or with `sqrt(NT)` in place of
/// `sqrt(N) T` when `degenerate` is set.
pub fn penalty_level(n_units: usize, n_periods: usize, p: usize, c_lambda: f64, gamma: f64, degenerate: bool) -> Result<f64> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::Domain(format!("gamma must lie in (0, 1), got {gamma}")));
    }
    if p == 0 {
        return Err(Error::Domain("penalty level needs at least one regressor".into()));
    }
    if !(c_lambda > 1.0) {
        return Err(Error::Domain(format!("c_lambda must exceed 1, got {c_lambda}")));
    }
    let tail = gamma / (2.0 * p as f64);
    let q = normal_quantile(1.0 - tail)?;
    let (n, t) = (n_units as f64, n_periods as f64);
    let scale = if degenerate { (n * t).sqrt() } else { n.sqrt() * t };
    Ok(2.0 * c_lambda * scale * q)
}

/// `0.1 / log(max(N, T))`.
pub fn default_gamma(n_units: usize, n_periods: usize) -> f64 {
    0.1 / (n_units.max(n_periods) as f64).ln()
}

/// Starting loadings `sqrt(var(f_j) var(y))` with sample variances.
pub fn initial_weights(features: &DMatrix<f64>, response: &DVector<f64>) -> Vec<f64> {
    let vy = sample_variance(response.iter().copied());
    features
        .column_iter()
        .map(|c| (sample_variance(c.iter().copied()) * vy).max(0.0).sqrt())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfeasibleWeights {
    pub weights: Vec<f64>,
    /// Trailing periods left out of the block sums because `h` does not divide `T`.
    pub truncated_periods: usize,
}

/// Loadings from known components, with time effects summed over
/// non-overlapping blocks of length `block_length`.
pub fn infeasible_weights(components: &ComponentDecomposition, block_length: usize) -> Result<InfeasibleWeights> {
    let n = components.layout.n_units;
    let t = components.layout.n_periods();
    if block_length == 0 || block_length > t {
        return Err(Error::Domain(format!("block length must lie in 1..={t}, got {block_length}")));
    }
    let blocks = t / block_length;
    let (nf, tf) = (n as f64, t as f64);
    let weights = (0..components.n_cols())
        .map(|j| {
            let wa = components.a.column(j).norm_squared() / nf;
            let wg = (0..blocks)
                .map(|b| {
                    let s: f64 = (b * block_length..(b + 1) * block_length).map(|s| components.g[(s, j)]).sum();
                    s * s
                })
                .sum::<f64>()
                * nf
                / (tf * tf);
            let we = (0..n)
                .map(|i| {
                    let s: f64 = (0..t).map(|s| components.e[(i * t + s, j)]).sum();
                    s * s
                })
                .sum::<f64>()
                / (nf * tf * tf);
            (wa + wg + we).sqrt()
        })
        .collect();
    Ok(InfeasibleWeights {
        weights,
        truncated_periods: t - blocks * block_length,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyConfig {
    pub c_lambda: f64,
    /// `None` selects `0.1 / log(max(N, T))` for the panel at hand.
    pub gamma: Option<f64>,
    pub bandwidth: BandwidthRule,
    pub max_refinements: usize,
    pub min_refinements: usize,
    /// Return the post-LASSO refit rather than the penalized fit.
    pub post: bool,
    pub lasso: LassoOptions,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            c_lambda: 2.0,
            gamma: None,
            bandwidth: BandwidthRule::Andrews,
            max_refinements: 10,
            min_refinements: 2,
            post: true,
            lasso: LassoOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RefinedLasso {
    /// Post-LASSO fit when `post` is set, otherwise the penalized fit.
    pub fit: LassoFit,
    /// Penalized fit of the last round.
    pub lasso: LassoFit,
    pub plan: PenaltyPlan,
    pub refinements: usize,
    /// The selected set repeated between the last two rounds.
    pub stabilized: bool,
}

/// Two-way cluster-LASSO with iterated feasible loadings.
pub fn iterate_two_way_lasso(
    features: &FeatureMatrix,
    layout: &PanelLayout,
    response: &DVector<f64>,
    config: &PenaltyConfig,
) -> Result<(LassoFit, PenaltyPlan)> {
    let mut solver = LassoSolver::new(features)?;
    let prepared = solver.prepare(response)?;
    let out = refine_lasso(&mut solver, &prepared, layout, PenaltyVariant::TwoWay, config)?;
    Ok((out.fit, out.plan))
}

/// Iterated LASSO for any loading variant. Starts from variance-product
/// loadings with the `sqrt(NT)` level, then alternates between loadings
/// computed from post-LASSO residual scores and refits until the selected
/// set stops changing (after at least `min_refinements` rounds) or
/// `max_refinements` is reached. `Initial` stops after the first fit.
pub fn refine_lasso(
    solver: &mut LassoSolver<'_>,
    response: &PreparedResponse,
    layout: &PanelLayout,
    variant: PenaltyVariant,
    config: &PenaltyConfig,
) -> Result<RefinedLasso> {
    let x = solver.design();
    if layout.n_rows() != x.nrows() {
        return Err(Error::InvalidInput(format!(
            "panel shape {} x {} does not match {} design rows",
            layout.n_units,
            layout.n_periods(),
            x.nrows()
        )));
    }
    let (n, t) = (layout.n_units, layout.n_periods());
    let p = solver.n_penalized();
    let gamma = config.gamma.unwrap_or_else(|| default_gamma(n, t));

    if p == 0 {
        let fit = solver.post_lasso(response, &[])?;
        let plan = PenaltyPlan::from_weights(variant, vec![0.0; x.ncols()]);
        return Ok(RefinedLasso {
            lasso: fit.clone(),
            fit,
            plan,
            refinements: 0,
            stabilized: true,
        });
    }

    let plan0 = PenaltyPlan::from_weights(PenaltyVariant::Initial, initial_weights(x, response.values()))
        .with_level(n, t, p, config.c_lambda, gamma)?;
    let mut lasso = solver.solve(response, plan0.lambda.unwrap_or(0.0), &plan0.solver_weights(), &config.lasso, None)?;
    let mut post = solver.post_lasso(response, &lasso.selected)?;
    let mut plan = plan0;
    let mut refinements = 0;
    let mut stabilized = false;

    if variant != PenaltyVariant::Initial {
        while refinements < config.max_refinements {
            let scores = PanelScores::from_residuals(x, &post.residuals, layout.clone())?;
            let next = match variant {
                PenaltyVariant::TwoWay => feasible_weights(&scores, config.bandwidth)?,
                other => baseline_weights(&scores, other)?,
            }
            .with_level(n, t, p, config.c_lambda, gamma)?;
            let refit = solver.solve(
                response,
                next.lambda.unwrap_or(0.0),
                &next.solver_weights(),
                &config.lasso,
                Some(&lasso.coefficients),
            )?;
            refinements += 1;
            stabilized = refit.selected == lasso.selected;
            post = solver.post_lasso(response, &refit.selected)?;
            lasso = refit;
            plan = next;
            if stabilized && refinements >= config.min_refinements {
                break;
            }
        }
    }

    Ok(RefinedLasso {
        fit: if config.post { post } else { lasso.clone() },
        lasso,
        plan,
        refinements,
        stabilized,
    })
}
