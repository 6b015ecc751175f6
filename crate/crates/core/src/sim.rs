//! Monte Carlo design with two-way clustered regressors and errors, and a
//! replication runner reporting bias, dispersion and interval coverage.
//!
//! Each of `X_it,j`, `U_it` and `V_it` is `w1·(unit) + w2·(period) + w3·(cell)`.
//! Unit and cell draws of the regressors are Gaussian vectors with Toeplitz
//! covariance `base^|j-k|`; period draws are independent AR(1) paths whose
//! first value has variance `ar_init_var`. `D = X π0 + V`, `Y = D θ0 + X β0 + U`
//! with `π0 = β0 = (1/j²)_j`. The instrument is `D` itself.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crossfit::{make_plan, DEFAULT_TIME_FOLDS, DEFAULT_UNIT_FOLDS};
use crate::data::{flatten, PanelDataset, PanelLayout};
use crate::dml::{estimate_crossfit, estimate_fullsample, DmlConfig, FirstStage};
use crate::error::{Error, Result};
use crate::numerics::{fill_toeplitz_gaussian, RngStream};
use crate::penalty::ComponentDecomposition;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub n_units: usize,
    pub n_periods: usize,
    pub p: usize,
    pub theta0: f64,
    pub weights: [f64; 3],
    pub ar_coef: f64,
    pub ar_init_var: f64,
    pub toeplitz_base: f64,
    /// Every component drawn afresh for each cell.
    pub iid_mode: bool,
    /// Multipliers on the outcome and treatment errors.
    pub u_scale: f64,
    pub v_scale: f64,
    pub seed: u64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        Self {
            n_units: 25,
            n_periods: 25,
            p: 200,
            theta0: 1.0,
            weights: [1.0 / 3.0; 3],
            ar_coef: 0.5,
            ar_init_var: 0.75,
            toeplitz_base: 0.5,
            iid_mode: false,
            u_scale: 1.0,
            v_scale: 1.0,
            seed: 0,
        }
    }
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_units == 0 || self.n_periods == 0 || self.p == 0 {
            return Err(Error::Config("N, T and p must be positive".into()));
        }
        if self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("component weights must be finite and nonnegative".into()));
        }
        if !(self.ar_coef.abs() < 1.0) {
            return Err(Error::Config(format!("AR coefficient must satisfy |a| < 1, got {}", self.ar_coef)));
        }
        if !(self.toeplitz_base.abs() < 1.0) {
            return Err(Error::Config(format!("Toeplitz base must satisfy |b| < 1, got {}", self.toeplitz_base)));
        }
        if !(self.ar_init_var >= 0.0) || !self.theta0.is_finite() || !self.u_scale.is_finite() || !self.v_scale.is_finite() {
            return Err(Error::Config("initial variance, theta0 and error scales must be finite".into()));
        }
        Ok(())
    }

    /// `β0 = π0 = (1, 1/2², ..., 1/p²)`.
    pub fn coefficients(&self) -> Vec<f64> {
        (1..=self.p).map(|j| 1.0 / (j * j) as f64).collect()
    }
}

/// Component draws behind one simulated panel.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTruth {
    pub theta0: f64,
    /// `N x p`, `N`, `N` unit draws of `X`, `U`, `V`; zero in iid mode.
    pub alpha_x: DMatrix<f64>,
    pub alpha_u: DVector<f64>,
    pub alpha_v: DVector<f64>,
    /// `T x p`, `T`, `T` period draws; zero in iid mode.
    pub gamma_x: DMatrix<f64>,
    pub gamma_u: DVector<f64>,
    pub gamma_v: DVector<f64>,
    pub u: DVector<f64>,
    pub v: DVector<f64>,
    weights: [f64; 3],
    u_scale: f64,
    v_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Equation {
    /// Projection of `D` on `X`; error `V`.
    Treatment,
    /// Projection of `Y` on `X`; error `θ0 V + U`.
    Outcome,
}

impl SimTruth {
    /// Error of the projection of the treatment or the outcome on `X`.
    pub fn equation_error(&self, equation: Equation) -> DVector<f64> {
        match equation {
            Equation::Treatment => self.v.clone(),
            Equation::Outcome => &self.v * self.theta0 + &self.u,
        }
    }

    /// True conditional-mean components of the scores `X_it,j · error_it`:
    /// `a_ij = E[· | unit draws]`, `g_tj = E[· | period draws]`, `e` the rest.
    pub fn score_components(&self, data: &PanelDataset, equation: Equation) -> Result<ComponentDecomposition> {
        let (n, t, p) = (data.n_units(), data.n_periods(), data.n_covariates());
        let [w1, w2, _] = self.weights;
        let (ua, ug) = match equation {
            Equation::Treatment => (self.alpha_v.clone() * self.v_scale, self.gamma_v.clone() * self.v_scale),
            Equation::Outcome => (
                &self.alpha_v * (self.theta0 * self.v_scale) + &self.alpha_u * self.u_scale,
                &self.gamma_v * (self.theta0 * self.v_scale) + &self.gamma_u * self.u_scale,
            ),
        };
        let a = DMatrix::from_fn(n, p, |i, j| w1 * w1 * self.alpha_x[(i, j)] * ua[i]);
        let g = DMatrix::from_fn(t, p, |s, j| w2 * w2 * self.gamma_x[(s, j)] * ug[s]);
        let err = self.equation_error(equation);
        let x = data.covariates();
        let e = DMatrix::from_fn(n * t, p, |r, j| x[(r, j)] * err[r] - a[(r / t, j)] - g[(r % t, j)]);
        ComponentDecomposition::new(PanelLayout::full(n, t), a, g, e)
    }
}

fn ar1_path(rng: &mut ChaCha8Rng, t: usize, coef: f64, init_var: f64) -> Vec<f64> {
    let innovation_sd = (1.0 - coef * coef).sqrt();
    let mut out = Vec::with_capacity(t);
    let mut prev = 0.0;
    for s in 0..t {
        let z: f64 = rng.sample(StandardNormal);
        prev = if s == 0 { init_var.sqrt() * z } else { coef * prev + innovation_sd * z };
        out.push(prev);
    }
    out
}

/// Draws one panel from its own stream.
pub fn generate(config: &DgpConfig) -> Result<(PanelDataset, SimTruth)> {
    generate_with(config, &mut RngStream::new(config.seed, 0).rng())
}

pub fn generate_with(config: &DgpConfig, rng: &mut ChaCha8Rng) -> Result<(PanelDataset, SimTruth)> {
    config.validate()?;
    let (n, t, p) = (config.n_units, config.n_periods, config.p);
    let [w1, w2, w3] = config.weights;
    let base = config.toeplitz_base;
    let normal = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };

    let mut alpha_x = DMatrix::zeros(n, p);
    let mut alpha_u = DVector::zeros(n);
    let mut alpha_v = DVector::zeros(n);
    let mut gamma_x = DMatrix::zeros(t, p);
    let mut gamma_u = DVector::zeros(t);
    let mut gamma_v = DVector::zeros(t);
    let mut x = DMatrix::zeros(n * t, p);
    let mut u = DVector::zeros(n * t);
    let mut v = DVector::zeros(n * t);
    let mut buf = Vec::with_capacity(p);

    if config.iid_mode {
        for r in 0..n * t {
            buf.clear();
            fill_toeplitz_gaussian(&mut buf, p, base, rng);
            let unit = buf.clone();
            buf.clear();
            for _ in 0..p {
                buf.push(normal(rng));
            }
            let period = buf.clone();
            buf.clear();
            fill_toeplitz_gaussian(&mut buf, p, base, rng);
            for j in 0..p {
                x[(r, j)] = w1 * unit[j] + w2 * period[j] + w3 * buf[j];
            }
            let (au, gu, eu) = (normal(rng), normal(rng), normal(rng));
            let (av, gv, ev) = (normal(rng), normal(rng), normal(rng));
            u[r] = config.u_scale * (w1 * au + w2 * gu + w3 * eu);
            v[r] = config.v_scale * (w1 * av + w2 * gv + w3 * ev);
        }
    } else {
        for i in 0..n {
            buf.clear();
            fill_toeplitz_gaussian(&mut buf, p, base, rng);
            for j in 0..p {
                alpha_x[(i, j)] = buf[j];
            }
            alpha_u[i] = normal(rng);
            alpha_v[i] = normal(rng);
        }
        for j in 0..p {
            for (s, g) in ar1_path(rng, t, config.ar_coef, config.ar_init_var).into_iter().enumerate() {
                gamma_x[(s, j)] = g;
            }
        }
        gamma_u = DVector::from_vec(ar1_path(rng, t, config.ar_coef, config.ar_init_var));
        gamma_v = DVector::from_vec(ar1_path(rng, t, config.ar_coef, config.ar_init_var));
        for i in 0..n {
            for s in 0..t {
                let r = i * t + s;
                buf.clear();
                fill_toeplitz_gaussian(&mut buf, p, base, rng);
                for j in 0..p {
                    x[(r, j)] = w1 * alpha_x[(i, j)] + w2 * gamma_x[(s, j)] + w3 * buf[j];
                }
                let eu = normal(rng);
                let ev = normal(rng);
                u[r] = config.u_scale * (w1 * alpha_u[i] + w2 * gamma_u[s] + w3 * eu);
                v[r] = config.v_scale * (w1 * alpha_v[i] + w2 * gamma_v[s] + w3 * ev);
            }
        }
    }

    let coef = DVector::from_vec(config.coefficients());
    let xb = &x * &coef;
    let d = &xb + &v;
    let y = &d * config.theta0 + &xb + &u;
    let names = (1..=p).map(|j| format!("x{j}")).collect();
    let data = PanelDataset::new(n, t, y)?.with_treatment(d)?.with_covariates(x, names)?;
    let truth = SimTruth {
        theta0: config.theta0,
        alpha_x,
        alpha_u,
        alpha_v,
        gamma_x,
        gamma_u,
        gamma_v,
        u,
        v,
        weights: config.weights,
        u_scale: config.u_scale,
        v_scale: config.v_scale,
    };
    Ok((data, truth))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MethodSpec {
    pub first_stage: FirstStage,
    pub crossfit: bool,
}

impl MethodSpec {
    pub fn new(first_stage: FirstStage, crossfit: bool) -> Self {
        Self { first_stage, crossfit }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McOptions {
    pub n_reps: usize,
    pub unit_folds: usize,
    pub time_folds: usize,
    pub estimation: DmlConfig,
    /// Run replications on the rayon pool.
    pub parallel: bool,
}

impl Default for McOptions {
    fn default() -> Self {
        Self {
            n_reps: 100,
            unit_folds: DEFAULT_UNIT_FOLDS,
            time_folds: DEFAULT_TIME_FOLDS,
            estimation: DmlConfig::default(),
            parallel: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRow {
    pub method: String,
    pub crossfit: bool,
    pub bias: f64,
    pub sd: f64,
    pub rmse: f64,
    /// Percent of replications whose interval contains `θ0`.
    pub coverage_chs: f64,
    pub coverage_dka: f64,
    pub mean_selected: f64,
    pub n_reps: usize,
    pub n_failures: usize,
    /// False when every replication failed.
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub dgp: DgpConfig,
    pub n_reps: usize,
    pub unit_folds: usize,
    pub time_folds: usize,
    pub rows: Vec<McRow>,
}

/// Outcome of one method in one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationOutcome {
    pub theta: f64,
    pub covers_chs: bool,
    pub covers_dka: bool,
    pub mean_selected: f64,
    pub failure: Option<String>,
}

fn failed(reason: String) -> ReplicationOutcome {
    ReplicationOutcome {
        theta: f64::NAN,
        covers_chs: false,
        covers_dka: false,
        mean_selected: f64::NAN,
        failure: Some(reason),
    }
}

/// Replication `r`: the panel comes from stream `r` of the base seed, and
/// the cross-fitting plan seed is the next draw of that stream.
pub fn run_replication(config: &DgpConfig, methods: &[MethodSpec], options: &McOptions, r: u64) -> Result<Vec<ReplicationOutcome>> {
    let mut rng = RngStream::new(config.seed, r).rng();
    let (data, truth) = generate_with(config, &mut rng)?;
    let plan_seed = rng.next_u64();
    let dictionary = flatten(&data);
    let half = data.n_rows() / 2;
    let plan = make_plan(config.n_units, config.n_periods, options.unit_folds, options.time_folds, plan_seed);
    Ok(methods
        .iter()
        .map(|m| {
            let est = if m.crossfit {
                match &plan {
                    Ok(plan) => estimate_crossfit(&data, &dictionary, plan, m.first_stage, &options.estimation),
                    Err(e) => return failed(e.to_string()),
                }
            } else {
                estimate_fullsample(&data, &dictionary, m.first_stage, &options.estimation)
            };
            match est {
                Err(e) => failed(e.to_string()),
                Ok(est) if m.first_stage.is_lasso() && est.selected_counts.max > half => {
                    failed(format!("{} regressors selected", est.selected_counts.max))
                }
                Ok(est) => ReplicationOutcome {
                    theta: est.theta,
                    covers_chs: est.covers(truth.theta0, false),
                    covers_dka: est.covers(truth.theta0, true),
                    mean_selected: (est.selected_counts.instrument
                        + est.selected_counts.outcome
                        + est.selected_counts.treatment)
                        / 3.0,
                    failure: None,
                },
            }
        })
        .collect())
}

fn summarize(method: &MethodSpec, theta0: f64, outcomes: &[&ReplicationOutcome]) -> McRow {
    let ok: Vec<&&ReplicationOutcome> = outcomes.iter().filter(|o| o.failure.is_none()).collect();
    let n = ok.len();
    let label = method.first_stage.label().to_string();
    if n == 0 {
        return McRow {
            method: label,
            crossfit: method.crossfit,
            bias: f64::NAN,
            sd: f64::NAN,
            rmse: f64::NAN,
            coverage_chs: f64::NAN,
            coverage_dka: f64::NAN,
            mean_selected: f64::NAN,
            n_reps: outcomes.len(),
            n_failures: outcomes.len(),
            valid: false,
        };
    }
    let nf = n as f64;
    let mean = ok.iter().map(|o| o.theta).sum::<f64>() / nf;
    let bias = mean - theta0;
    let sd = (ok.iter().map(|o| (o.theta - mean).powi(2)).sum::<f64>() / nf).sqrt();
    let rmse = (ok.iter().map(|o| (o.theta - theta0).powi(2)).sum::<f64>() / nf).sqrt();
    let pct = |f: &dyn Fn(&ReplicationOutcome) -> bool| 100.0 * ok.iter().filter(|o| f(o)).count() as f64 / nf;
    McRow {
        method: label,
        crossfit: method.crossfit,
        bias,
        sd,
        rmse,
        coverage_chs: pct(&|o| o.covers_chs),
        coverage_dka: pct(&|o| o.covers_dka),
        mean_selected: ok.iter().map(|o| o.mean_selected).sum::<f64>() / nf,
        n_reps: outcomes.len(),
        n_failures: outcomes.len() - n,
        valid: true,
    }
}

pub fn run_monte_carlo(config: &DgpConfig, methods: &[MethodSpec], options: &McOptions) -> Result<McReport> {
    config.validate()?;
    if methods.is_empty() {
        return Err(Error::Config("no methods requested".into()));
    }
    if options.n_reps == 0 {
        return Err(Error::Config("number of replications must be positive".into()));
    }
    let reps: Vec<u64> = (0..options.n_reps as u64).collect();
    let run = |&r: &u64| run_replication(config, methods, options, r);
    let outcomes: Vec<Vec<ReplicationOutcome>> = if options.parallel {
        reps.par_iter().map(run).collect::<Result<_>>()?
    } else {
        reps.iter().map(run).collect::<Result<_>>()?
    };
    let rows = methods
        .iter()
        .enumerate()
        .map(|(m, spec)| {
            let column: Vec<&ReplicationOutcome> = outcomes.iter().map(|rep| &rep[m]).collect();
            summarize(spec, config.theta0, &column)
        })
        .collect();
    Ok(McReport {
        dgp: *config,
        n_reps: options.n_reps,
        unit_folds: options.unit_folds,
        time_folds: options.time_folds,
        rows,
    })
}

impl McReport {
    pub fn row(&self, first_stage: FirstStage, crossfit: bool) -> Option<&McRow> {
        let label = first_stage.label();
        self.rows.iter().find(|r| r.method == label && r.crossfit == crossfit)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "method,crossfit,bias,sd,rmse,coverage_chs,coverage_dka,mean_selected,n_reps,n_failures,valid\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                r.method,
                r.crossfit,
                r.bias,
                r.sd,
                r.rmse,
                r.coverage_chs,
                r.coverage_dka,
                r.mean_selected,
                r.n_reps,
                r.n_failures,
                r.valid
            ));
        }
        out
    }

    /// Fixed-width table: three decimals for estimates, one for coverage.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<10} {:>9} {:>8} {:>8} {:>8} {:>7} {:>7} {:>9} {:>6}\n",
            "method", "crossfit", "bias", "sd", "rmse", "CHS%", "DKA%", "selected", "fail"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<10} {:>9} {:>8.3} {:>8.3} {:>8.3} {:>7.1} {:>7.1} {:>9.1} {:>6}\n",
                r.method,
                if r.crossfit { "yes" } else { "no" },
                r.bias,
                r.sd,
                r.rmse,
                r.coverage_chs,
                r.coverage_dka,
                r.mean_selected,
                r.n_failures
            ));
        }
        out
    }
}
