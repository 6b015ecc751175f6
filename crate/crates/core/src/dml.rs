//! Debiased estimation of a scalar coefficient in the partially linear IV
//! model `Y = D θ + g(f) + U`, `E[(Z - E[Z|f]) U] = 0`.
//!
//! Nuisance projections of `Z`, `Y` and `D` on the dictionary are fitted
//! either on the full panel or, with cross-fitting, on each auxiliary
//! sample and evaluated on the matching main sample. The score is
//! `ψ = (Z - f'ζ)(Y - f'β - (D - f'π) θ)`, linear in `θ`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crossfit::CrossFitPlan;
use crate::data::{FeatureMatrix, PanelDataset, PanelLayout};
use crate::error::{Error, Result};
use crate::lasso::{predict, LassoSolver};
use crate::numerics::{bartlett_weight, Z_975};
use crate::penalty::{refine_lasso, BandwidthRule, PenaltyConfig, PenaltyVariant};

const MAX_ABS_RHO: f64 = 0.97;
const IDENTIFICATION_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AndrewsBandwidth {
    pub bandwidth: usize,
    pub rho: f64,
    /// The series had no variation; `bandwidth` is 1.
    pub degenerate: bool,
}

/// `1.8171 (ρ²/(1-ρ²)²)^{1/3} T^{1/3} + 1`, before flooring.
pub fn andrews_formula(rho: f64, n_periods: usize) -> f64 {
    let r2 = rho * rho;
    1.8171 * (r2 / ((1.0 - r2) * (1.0 - r2))).cbrt() * (n_periods as f64).cbrt() + 1.0
}

/// Min-MSE Bartlett bandwidth from the no-intercept AR(1) coefficient of a series.
pub fn andrews_rule(series: &[f64]) -> Result<AndrewsBandwidth> {
    let t = series.len();
    if t < 3 {
        return Err(Error::Domain(format!("bandwidth rule needs at least 3 periods, got {t}")));
    }
    let num: f64 = series.windows(2).map(|w| w[1] * w[0]).sum();
    let den: f64 = series[..t - 1].iter().map(|v| v * v).sum();
    let scale: f64 = series.iter().map(|v| v * v).sum();
    if !(den > 0.0) || den <= 1e-28 * scale || !num.is_finite() {
        return Ok(AndrewsBandwidth {
            bandwidth: 1,
            rho: 0.0,
            degenerate: true,
        });
    }
    let rho = (num / den).clamp(-MAX_ABS_RHO, MAX_ABS_RHO);
    let bandwidth = (andrews_formula(rho, t).floor() as usize).max(1);
    Ok(AndrewsBandwidth {
        bandwidth,
        rho,
        degenerate: false,
    })
}

/// Andrews rule on the cross-sectional averages of an `N x T` score matrix.
pub fn andrews_bandwidth(scores: &DMatrix<f64>) -> Result<usize> {
    andrews_rule(&cross_sectional_means(scores)).map(|b| b.bandwidth)
}

fn cross_sectional_means(scores: &DMatrix<f64>) -> Vec<f64> {
    let n = scores.nrows().max(1) as f64;
    scores.column_iter().map(|c| c.sum() / n).collect()
}

/// `ψ = z_res (y_res - d_res θ)`.
pub fn orthogonal_score(z_res: &DVector<f64>, y_res: &DVector<f64>, d_res: &DVector<f64>, theta: f64) -> DVector<f64> {
    z_res.component_mul(&(y_res - d_res * theta))
}

/// `(ψ^a, ψ^b)` with `ψ(θ) = ψ^a θ + ψ^b`.
pub fn score_parts(z_res: &DVector<f64>, y_res: &DVector<f64>, d_res: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    (-z_res.component_mul(d_res), z_res.component_mul(y_res))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FirstStage {
    Pols,
    HLasso,
    CLasso,
    TwLasso,
}

impl FirstStage {
    pub const ALL: [FirstStage; 4] = [FirstStage::Pols, FirstStage::HLasso, FirstStage::CLasso, FirstStage::TwLasso];

    pub fn label(self) -> &'static str {
        match self {
            FirstStage::Pols => "POLS",
            FirstStage::HLasso => "H LASSO",
            FirstStage::CLasso => "C LASSO",
            FirstStage::TwLasso => "TW LASSO",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            FirstStage::Pols => "pols",
            FirstStage::HLasso => "h_lasso",
            FirstStage::CLasso => "c_lasso",
            FirstStage::TwLasso => "tw_lasso",
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let norm = text.trim().to_ascii_lowercase().replace([' ', '-'], "_");
        match norm.as_str() {
            "pols" => Ok(FirstStage::Pols),
            "h" | "h_lasso" => Ok(FirstStage::HLasso),
            "c" | "c_lasso" => Ok(FirstStage::CLasso),
            "tw" | "tw_lasso" => Ok(FirstStage::TwLasso),
            _ => Err(Error::Config(format!(
                "unknown first stage `{text}` (expected pols, h_lasso, c_lasso or tw_lasso)"
            ))),
        }
    }

    pub fn is_lasso(self) -> bool {
        self != FirstStage::Pols
    }

    pub fn penalty_variant(self) -> Option<PenaltyVariant> {
        match self {
            FirstStage::Pols => None,
            FirstStage::HLasso => Some(PenaltyVariant::Heteroskedastic),
            FirstStage::CLasso => Some(PenaltyVariant::Cluster),
            FirstStage::TwLasso => Some(PenaltyVariant::TwoWay),
        }
    }
}

/// A fitted linear projection of one variable on the dictionary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquationFit {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub n_selected: usize,
    pub refinements: usize,
}

impl EquationFit {
    pub fn residuals(&self, features: &DMatrix<f64>, target: &DVector<f64>) -> DVector<f64> {
        target - predict(features, self.intercept, &self.coefficients)
    }
}

/// Projections of the instrument (`zeta`), outcome (`beta`) and treatment (`pi`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceFit {
    pub zeta: EquationFit,
    pub beta: EquationFit,
    pub pi: EquationFit,
}

pub struct NuisanceTargets<'a> {
    pub instrument: &'a DVector<f64>,
    pub outcome: &'a DVector<f64>,
    pub treatment: &'a DVector<f64>,
    /// The instrument is the treatment itself; its projection is reused.
    pub instrument_is_treatment: bool,
}

pub trait NuisanceEstimator: Sync {
    fn label(&self) -> String;

    fn fit(&self, features: &FeatureMatrix, layout: &PanelLayout, targets: &NuisanceTargets<'_>) -> Result<NuisanceFit>;
}

/// Pooled OLS or one of the iterated LASSO variants, always refitted by OLS
/// on the selected support.
#[derive(Debug, Clone, Copy)]
pub struct StandardFirstStage {
    pub method: FirstStage,
    pub penalty: PenaltyConfig,
}

impl StandardFirstStage {
    pub fn new(method: FirstStage, penalty: PenaltyConfig) -> Self {
        Self { method, penalty }
    }
}

impl NuisanceEstimator for StandardFirstStage {
    fn label(&self) -> String {
        self.method.label().to_string()
    }

    fn fit(&self, features: &FeatureMatrix, layout: &PanelLayout, targets: &NuisanceTargets<'_>) -> Result<NuisanceFit> {
        let mut solver = LassoSolver::new(features)?;
        let all: Vec<usize> = (0..features.n_cols()).filter(|&j| Some(j) != features.intercept_column()).collect();
        let mut fit_one = |target: &DVector<f64>| -> Result<EquationFit> {
            let prepared = solver.prepare(target)?;
            let (fit, refinements) = match self.method.penalty_variant() {
                None => (solver.post_lasso(&prepared, &all)?, 0),
                Some(variant) => {
                    let out = refine_lasso(&mut solver, &prepared, layout, variant, &self.penalty)?;
                    (out.fit, out.refinements)
                }
            };
            Ok(EquationFit {
                n_selected: fit.selected.len(),
                coefficients: fit.coefficients,
                intercept: fit.intercept,
                refinements,
            })
        };
        let pi = fit_one(targets.treatment)?;
        let beta = fit_one(targets.outcome)?;
        let zeta = if targets.instrument_is_treatment {
            pi.clone()
        } else {
            fit_one(targets.instrument)?
        };
        Ok(NuisanceFit { zeta, beta, pi })
    }
}

/// Returns the same nuisance coefficients for every sample.
#[derive(Debug, Clone)]
pub struct FixedNuisance(pub NuisanceFit);

impl NuisanceEstimator for FixedNuisance {
    fn label(&self) -> String {
        "fixed".to_string()
    }

    fn fit(&self, features: &FeatureMatrix, _: &PanelLayout, _: &NuisanceTargets<'_>) -> Result<NuisanceFit> {
        for eq in [&self.0.zeta, &self.0.beta, &self.0.pi] {
            if eq.coefficients.len() != features.n_cols() {
                return Err(Error::InvalidInput("fixed nuisance has the wrong number of coefficients".into()));
            }
        }
        Ok(self.0.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DmlConfig {
    pub penalty: PenaltyConfig,
    /// Bandwidth of the variance lag windows.
    pub variance_bandwidth: BandwidthRule,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponents {
    pub omega_a: f64,
    pub omega_dk: f64,
    pub omega_nw: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceEstimate {
    pub a_hat: f64,
    pub components: VarianceComponents,
    pub var_chs: f64,
    pub var_dka: f64,
}

impl VarianceEstimate {
    fn new(a_hat: f64, components: VarianceComponents) -> Self {
        let a2 = a_hat * a_hat;
        Self {
            a_hat,
            components,
            var_chs: (components.omega_a + components.omega_dk - components.omega_nw) / a2,
            var_dka: (components.omega_a + components.omega_dk) / a2,
        }
    }
}

/// Unscaled sums `(Σ_i (Σ_t ψ)², Σ_tr k S_t S_r, Σ_i Σ_tr k ψ_it ψ_ir)` for an
/// `N x T` block of scores on consecutive periods.
fn raw_sums(scores: &DMatrix<f64>, bandwidth: usize) -> (f64, f64, f64) {
    let t = scores.ncols();
    let arellano = scores.row_iter().map(|r| r.sum().powi(2)).sum();
    let sums: Vec<f64> = scores.column_iter().map(|c| c.sum()).collect();
    let mut dk = 0.0;
    let mut nw = 0.0;
    for lag in 0..bandwidth.min(t) {
        let w = bartlett_weight(lag, bandwidth) * if lag == 0 { 1.0 } else { 2.0 };
        for s in 0..t - lag {
            dk += w * sums[s] * sums[s + lag];
            nw += w * scores.column(s).dot(&scores.column(s + lag));
        }
    }
    (arellano, dk, nw)
}

/// Full-sample variance pieces, each scaled by `1/(N T²)`.
pub fn variance_components_fullsample(scores: &DMatrix<f64>, bandwidth: usize) -> Result<VarianceComponents> {
    if bandwidth == 0 {
        return Err(Error::Domain("bandwidth must be >= 1".into()));
    }
    let (n, t) = scores.shape();
    let scale = n as f64 * (t * t) as f64;
    let (a, dk, nw) = raw_sums(scores, bandwidth);
    Ok(VarianceComponents {
        omega_a: a / scale,
        omega_dk: dk / scale,
        omega_nw: nw / scale,
    })
}

/// CHS and DKA variances from full-sample `N x T` scores and `ψ^a`.
pub fn variance_fullsample(scores: &DMatrix<f64>, psi_a: &DMatrix<f64>, bandwidth: usize) -> Result<VarianceEstimate> {
    if scores.shape() != psi_a.shape() {
        return Err(Error::InvalidInput("score and psi_a shapes differ".into()));
    }
    let a_hat = psi_a.mean();
    let components = variance_components_fullsample(scores, bandwidth)?;
    Ok(VarianceEstimate::new(a_hat, components))
}

/// Main-sample scores of one fold.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldScores {
    pub k: usize,
    pub l: usize,
    /// `N_k x T_l`.
    pub scores: DMatrix<f64>,
    /// `N_k x T_l`.
    pub psi_a: DMatrix<f64>,
}

/// Cross-fit variances. `bandwidths[l]` is the lag window of time fold `l`.
pub fn variance_crossfit(
    folds: &[FoldScores],
    n_unit_folds: usize,
    n_time_folds: usize,
    bandwidths: &[usize],
) -> Result<VarianceEstimate> {
    if folds.len() != n_unit_folds * n_time_folds || folds.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{} fold score blocks for a {n_unit_folds} x {n_time_folds} plan",
            folds.len()
        )));
    }
    if bandwidths.len() != n_time_folds {
        return Err(Error::InvalidInput("one bandwidth per time fold is required".into()));
    }
    if bandwidths.contains(&0) {
        return Err(Error::Domain("bandwidth must be >= 1".into()));
    }
    let ratio = n_unit_folds as f64 / n_time_folds as f64;
    let count = folds.len() as f64;
    let mut a_hat = 0.0;
    let mut sums = VarianceComponents {
        omega_a: 0.0,
        omega_dk: 0.0,
        omega_nw: 0.0,
    };
    for fold in folds {
        let (n, t) = fold.scores.shape();
        let scale = n as f64 * (t * t) as f64;
        let (a, dk, nw) = raw_sums(&fold.scores, bandwidths[fold.l]);
        sums.omega_a += a / scale;
        sums.omega_dk += ratio * dk / scale;
        sums.omega_nw += ratio * nw / scale;
        a_hat += fold.psi_a.mean();
    }
    let components = VarianceComponents {
        omega_a: sums.omega_a / count,
        omega_dk: sums.omega_dk / count,
        omega_nw: sums.omega_nw / count,
    };
    Ok(VarianceEstimate::new(a_hat / count, components))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SelectedCounts {
    /// Mean over folds of the selected-set size per equation.
    pub instrument: f64,
    pub outcome: f64,
    pub treatment: f64,
    /// Largest selected set in any equation and fold.
    pub max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmlEstimate {
    pub theta: f64,
    /// NaN when the CHS variance is negative.
    pub se_chs: f64,
    pub se_dka: f64,
    pub var_chs: f64,
    pub var_dka: f64,
    pub ci_95_chs: [f64; 2],
    pub ci_95_dka: [f64; 2],
    pub method: String,
    pub crossfit: bool,
    #[serde(rename = "K")]
    pub k: Option<usize>,
    #[serde(rename = "L")]
    pub l: Option<usize>,
    pub bandwidths: Vec<usize>,
    pub selected_counts: SelectedCounts,
    pub a_hat: f64,
    pub components: VarianceComponents,
    pub n_units: usize,
    pub n_periods: usize,
    pub warnings: Vec<String>,
    /// `ψ_it(θ̂, η̂)` as an `N x T` matrix.
    #[serde(skip)]
    pub score_matrix: DMatrix<f64>,
}

impl DmlEstimate {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("estimate serializes")
    }

    pub fn covers(&self, value: f64, dka: bool) -> bool {
        let ci = if dka { self.ci_95_dka } else { self.ci_95_chs };
        ci[0] <= value && value <= ci[1]
    }
}

struct Targets {
    outcome: DVector<f64>,
    treatment: DVector<f64>,
    instrument: DVector<f64>,
    instrument_is_treatment: bool,
}

fn targets(data: &PanelDataset, dictionary: &FeatureMatrix) -> Result<Targets> {
    let treatment = data
        .treatment()
        .ok_or_else(|| Error::InvalidInput("estimation needs a treatment column".into()))?
        .clone();
    if dictionary.n_rows() != data.n_rows() {
        return Err(Error::InvalidInput(format!(
            "dictionary has {} rows, panel has {}",
            dictionary.n_rows(),
            data.n_rows()
        )));
    }
    Ok(Targets {
        outcome: data.outcome().clone(),
        instrument: data.instrument().cloned().unwrap_or_else(|| treatment.clone()),
        instrument_is_treatment: !data.has_explicit_instrument(),
        treatment,
    })
}

fn pick(v: &DVector<f64>, rows: &[usize]) -> DVector<f64> {
    DVector::from_fn(rows.len(), |r, _| v[rows[r]])
}

struct EquationResiduals {
    z: DVector<f64>,
    y: DVector<f64>,
    d: DVector<f64>,
}

fn residuals_on(fit: &NuisanceFit, features: &DMatrix<f64>, t: &Targets, rows: &[usize]) -> EquationResiduals {
    EquationResiduals {
        z: fit.zeta.residuals(features, &pick(&t.instrument, rows)),
        y: fit.beta.residuals(features, &pick(&t.outcome, rows)),
        d: fit.pi.residuals(features, &pick(&t.treatment, rows)),
    }
}

fn check_identification(a_hat: f64) -> Result<()> {
    if !(a_hat.abs() >= IDENTIFICATION_FLOOR) {
        return Err(Error::Identification(format!(
            "average instrument-treatment residual product is {a_hat:e}; θ is not identified"
        )));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn finish(
    theta: f64,
    variance: VarianceEstimate,
    n_units: usize,
    n_periods: usize,
    method: String,
    plan: Option<&CrossFitPlan>,
    bandwidths: Vec<usize>,
    selected_counts: SelectedCounts,
    score_matrix: DMatrix<f64>,
    mut warnings: Vec<String>,
) -> DmlEstimate {
    let n = n_units as f64;
    let se_dka = (variance.var_dka / n).sqrt();
    let se_chs = if variance.var_chs >= 0.0 {
        (variance.var_chs / n).sqrt()
    } else {
        warnings.push(format!("negative CHS variance {:e}; its standard error is undefined", variance.var_chs));
        f64::NAN
    };
    let ci = |se: f64| [theta - Z_975 * se, theta + Z_975 * se];
    DmlEstimate {
        theta,
        se_chs,
        se_dka,
        var_chs: variance.var_chs,
        var_dka: variance.var_dka,
        ci_95_chs: ci(se_chs),
        ci_95_dka: ci(se_dka),
        method,
        crossfit: plan.is_some(),
        k: plan.map(CrossFitPlan::k),
        l: plan.map(CrossFitPlan::l),
        bandwidths,
        selected_counts,
        a_hat: variance.a_hat,
        components: variance.components,
        n_units,
        n_periods,
        warnings,
        score_matrix,
    }
}

fn resolve_variance_bandwidth(rule: BandwidthRule, scores: &DMatrix<f64>, warnings: &mut Vec<String>) -> Result<usize> {
    match rule {
        BandwidthRule::Fixed(0) => Err(Error::Domain("bandwidth must be >= 1".into())),
        BandwidthRule::Fixed(m) => Ok(m),
        BandwidthRule::Andrews if scores.ncols() < 3 => Ok(1),
        BandwidthRule::Andrews => {
            let choice = andrews_rule(&cross_sectional_means(scores))?;
            if choice.degenerate {
                warnings.push("score averages have no variation; bandwidth set to 1".into());
            }
            Ok(choice.bandwidth)
        }
    }
}

fn to_panel(v: &DVector<f64>, n: usize, t: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, t, |i, s| v[i * t + s])
}

/// Nuisances fitted once on the whole panel.
pub fn estimate_fullsample(
    data: &PanelDataset,
    dictionary: &FeatureMatrix,
    first_stage: FirstStage,
    config: &DmlConfig,
) -> Result<DmlEstimate> {
    estimate_fullsample_with(data, dictionary, &StandardFirstStage::new(first_stage, config.penalty), config)
}

pub fn estimate_fullsample_with(
    data: &PanelDataset,
    dictionary: &FeatureMatrix,
    estimator: &dyn NuisanceEstimator,
    config: &DmlConfig,
) -> Result<DmlEstimate> {
    let t = targets(data, dictionary)?;
    let (n_units, n_periods) = (data.n_units(), data.n_periods());
    let layout = data.layout();
    let nt = NuisanceTargets {
        instrument: &t.instrument,
        outcome: &t.outcome,
        treatment: &t.treatment,
        instrument_is_treatment: t.instrument_is_treatment,
    };
    let fit = estimator.fit(dictionary, &layout, &nt)?;
    let rows: Vec<usize> = (0..data.n_rows()).collect();
    let res = residuals_on(&fit, dictionary.values(), &t, &rows);
    let (psi_a, psi_b) = score_parts(&res.z, &res.y, &res.d);
    let a_hat = psi_a.mean();
    check_identification(a_hat)?;
    let theta = -psi_b.mean() / a_hat;
    let psi = &psi_a * theta + &psi_b;

    let scores = to_panel(&psi, n_units, n_periods);
    let mut warnings = Vec::new();
    let m = resolve_variance_bandwidth(config.variance_bandwidth, &scores, &mut warnings)?;
    let variance = variance_fullsample(&scores, &to_panel(&psi_a, n_units, n_periods), m)?;
    let counts = SelectedCounts {
        instrument: fit.zeta.n_selected as f64,
        outcome: fit.beta.n_selected as f64,
        treatment: fit.pi.n_selected as f64,
        max: fit.zeta.n_selected.max(fit.beta.n_selected).max(fit.pi.n_selected),
    };
    Ok(finish(
        theta,
        variance,
        n_units,
        n_periods,
        estimator.label(),
        None,
        vec![m],
        counts,
        scores,
        warnings,
    ))
}

/// Nuisances fitted on each auxiliary sample of `plan`.
pub fn estimate_crossfit(
    data: &PanelDataset,
    dictionary: &FeatureMatrix,
    plan: &CrossFitPlan,
    first_stage: FirstStage,
    config: &DmlConfig,
) -> Result<DmlEstimate> {
    estimate_crossfit_with(data, dictionary, plan, &StandardFirstStage::new(first_stage, config.penalty), config)
}

struct FoldResult {
    k: usize,
    l: usize,
    psi_a: DVector<f64>,
    psi_b: DVector<f64>,
    fit: NuisanceFit,
}

pub fn estimate_crossfit_with(
    data: &PanelDataset,
    dictionary: &FeatureMatrix,
    plan: &CrossFitPlan,
    estimator: &dyn NuisanceEstimator,
    config: &DmlConfig,
) -> Result<DmlEstimate> {
    let t = targets(data, dictionary)?;
    let (n_units, n_periods) = (data.n_units(), data.n_periods());
    if plan.n_units != n_units || plan.n_periods != n_periods {
        return Err(Error::InvalidInput(format!(
            "plan is for a {} x {} panel, data is {n_units} x {n_periods}",
            plan.n_units, plan.n_periods
        )));
    }
    let (kk, ll) = (plan.k(), plan.l());
    let cells: Vec<(usize, usize)> = (0..kk).flat_map(|k| (0..ll).map(move |l| (k, l))).collect();

    let results: Vec<Result<FoldResult>> = cells
        .par_iter()
        .map(|&(k, l)| {
            let wrap = |e: Error| Error::FirstStage {
                k,
                l,
                source: Box::new(e),
            };
            let aux = plan.auxiliary_sample(k, l)?;
            let aux_rows = aux.rows(n_periods);
            let aux_features = dictionary.select_rows(&aux_rows);
            let (z, y, d) = (pick(&t.instrument, &aux_rows), pick(&t.outcome, &aux_rows), pick(&t.treatment, &aux_rows));
            let nt = NuisanceTargets {
                instrument: &z,
                outcome: &y,
                treatment: &d,
                instrument_is_treatment: t.instrument_is_treatment,
            };
            let fit = estimator.fit(&aux_features, &aux.layout(), &nt).map_err(wrap)?;
            let main_rows = plan.main_sample(k, l)?.rows(n_periods);
            let main_features = dictionary.select_rows(&main_rows);
            let res = residuals_on(&fit, main_features.values(), &t, &main_rows);
            let (psi_a, psi_b) = score_parts(&res.z, &res.y, &res.d);
            Ok(FoldResult { k, l, psi_a, psi_b, fit })
        })
        .collect();
    let results: Vec<FoldResult> = results.into_iter().collect::<Result<_>>()?;

    let count = results.len() as f64;
    let a_bar = results.iter().map(|f| f.psi_a.mean()).sum::<f64>() / count;
    let b_bar = results.iter().map(|f| f.psi_b.mean()).sum::<f64>() / count;
    check_identification(a_bar)?;
    let theta = -b_bar / a_bar;

    let mut score_matrix = DMatrix::zeros(n_units, n_periods);
    let mut folds = Vec::with_capacity(results.len());
    let mut counts = SelectedCounts::default();
    for f in &results {
        let units = &plan.unit_folds[f.k];
        let times = &plan.time_folds[f.l];
        let tl = times.len();
        let psi = &f.psi_a * theta + &f.psi_b;
        for (a, &i) in units.iter().enumerate() {
            for (b, &s) in times.iter().enumerate() {
                score_matrix[(i, s)] = psi[a * tl + b];
            }
        }
        folds.push(FoldScores {
            k: f.k,
            l: f.l,
            scores: to_panel(&psi, units.len(), tl),
            psi_a: to_panel(&f.psi_a, units.len(), tl),
        });
        counts.instrument += f.fit.zeta.n_selected as f64 / count;
        counts.outcome += f.fit.beta.n_selected as f64 / count;
        counts.treatment += f.fit.pi.n_selected as f64 / count;
        counts.max = counts.max.max(f.fit.zeta.n_selected).max(f.fit.beta.n_selected).max(f.fit.pi.n_selected);
    }

    let mut warnings = Vec::new();
    let bandwidths = plan
        .time_folds
        .iter()
        .map(|times| {
            let block = score_matrix.columns(times[0], times.len()).clone_owned();
            resolve_variance_bandwidth(config.variance_bandwidth, &block, &mut warnings)
        })
        .collect::<Result<Vec<_>>>()?;
    let variance = variance_crossfit(&folds, kk, ll, &bandwidths)?;
    Ok(finish(
        theta,
        variance,
        n_units,
        n_periods,
        estimator.label(),
        Some(plan),
        bandwidths,
        counts,
        score_matrix,
        warnings,
    ))
}
