use std::path::PathBuf;

use paneldml::dml::DmlConfig;
use paneldml::{
    build_dictionary, estimate_crossfit, estimate_fullsample, flatten, iterate_two_way_lasso, load_csv, make_plan,
    run_monte_carlo, CsvSchema, DgpConfig, DmlEstimate, FeatureMatrix, FirstStage, McOptions, MethodSpec,
    PanelDataset, PenaltyConfig,
};

use crate::config::{ConfigError, Settings};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

/// Machine-readable output plus a human-readable table of the same result.
pub struct Output {
    pub data: String,
    pub table: String,
    pub warnings: Vec<String>,
}

#[derive(Debug)]
pub enum CommandError {
    Config(ConfigError),
    Library(paneldml::Error),
}

impl From<ConfigError> for CommandError {
    fn from(e: ConfigError) -> Self {
        CommandError::Config(e)
    }
}

impl From<paneldml::Error> for CommandError {
    fn from(e: paneldml::Error) -> Self {
        CommandError::Library(e)
    }
}

impl std::fmt::Display for CommandError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CommandError::Config(e) => write!(f, "{e}"),
            CommandError::Library(e) => write!(f, "{e}"),
        }
    }
}

impl CommandError {
    pub fn is_user_error(&self) -> bool {
        match self {
            CommandError::Config(_) => true,
            CommandError::Library(e) => e.is_user_error(),
        }
    }
}

type Result<T> = std::result::Result<T, CommandError>;

fn penalty_config(s: &Settings) -> Result<PenaltyConfig> {
    let defaults = PenaltyConfig::default();
    let max_refinements = s.get("max_refinements", defaults.max_refinements)?;
    Ok(PenaltyConfig {
        c_lambda: s.get("c_lambda", defaults.c_lambda)?,
        gamma: s.get_opt("gamma")?,
        bandwidth: s.bandwidth()?,
        max_refinements,
        min_refinements: defaults.min_refinements.min(max_refinements),
        ..defaults
    })
}

fn dml_config(s: &Settings) -> Result<DmlConfig> {
    Ok(DmlConfig {
        penalty: penalty_config(s)?,
        variance_bandwidth: s.bandwidth()?,
    })
}

pub fn simulate(s: &Settings, format: Format) -> Result<Output> {
    let defaults = DgpConfig::default();
    let third = 1.0 / 3.0;
    let dgp = DgpConfig {
        n_units: s.get("n_units", defaults.n_units)?,
        n_periods: s.get("n_periods", defaults.n_periods)?,
        p: s.get("p", defaults.p)?,
        theta0: s.get("theta0", defaults.theta0)?,
        weights: [s.get("w1", third)?, s.get("w2", third)?, s.get("w3", third)?],
        ar_coef: s.get("ar_coef", defaults.ar_coef)?,
        ar_init_var: s.get("ar_init_var", defaults.ar_init_var)?,
        toeplitz_base: s.get("toeplitz_base", defaults.toeplitz_base)?,
        iid_mode: s.flag("iid", false)?,
        seed: s.get("seed", 0)?,
        ..defaults
    };
    let methods = if s.raw("methods").is_some() {
        s.list("methods")
            .iter()
            .map(|m| FirstStage::parse(m).map_err(|e| ConfigError(format!("key `methods`: {e}"))))
            .collect::<std::result::Result<Vec<_>, _>>()?
    } else {
        FirstStage::ALL.to_vec()
    };
    let schemes: &[bool] = match s.raw("crossfit").unwrap_or("both") {
        "both" => &[false, true],
        other => match s.flag("crossfit", false) {
            Ok(true) => &[true],
            Ok(false) => &[false],
            Err(_) => {
                return Err(ConfigError(format!("key `crossfit`: expected no, yes or both, got `{other}`")).into())
            }
        },
    };
    let specs: Vec<MethodSpec> = schemes
        .iter()
        .flat_map(|&cf| methods.iter().map(move |&m| MethodSpec::new(m, cf)))
        .collect();
    let defaults = McOptions::default();
    let options = McOptions {
        n_reps: s.get("reps", defaults.n_reps)?,
        unit_folds: s.get("K", defaults.unit_folds)?,
        time_folds: s.get("L", defaults.time_folds)?,
        estimation: dml_config(s)?,
        parallel: true,
    };
    let report = run_monte_carlo(&dgp, &specs, &options)?;
    let warnings = report
        .rows
        .iter()
        .filter(|r| r.n_failures > 0)
        .map(|r| {
            format!(
                "{} (cross-fit {}): {} of {} replications failed",
                r.method,
                if r.crossfit { "yes" } else { "no" },
                r.n_failures,
                r.n_reps
            )
        })
        .collect();
    Ok(Output {
        data: match format {
            Format::Csv => report.to_csv(),
            Format::Json => report.to_json() + "\n",
        },
        table: report.to_table(),
        warnings,
    })
}

fn load_data(s: &Settings) -> Result<PanelDataset> {
    let path = PathBuf::from(s.require("data")?);
    let covariates = s.list("covariates");
    if covariates.is_empty() {
        return Err(ConfigError("missing required key `covariates`".into()).into());
    }
    let schema = CsvSchema {
        unit: s.raw("unit_col").unwrap_or("unit").to_string(),
        time: s.raw("time_col").unwrap_or("time").to_string(),
        outcome: s.raw("outcome_col").unwrap_or("outcome").to_string(),
        treatment: Some(s.raw("treatment_col").unwrap_or("treatment").to_string()),
        instrument: s.raw("instrument_col").map(String::from),
        covariates,
    };
    Ok(load_csv(path, &schema)?)
}

fn dictionary(s: &Settings, data: &PanelDataset) -> Result<(FeatureMatrix, Vec<String>)> {
    match s.get::<usize>("tau", 1)? {
        0 => Ok((flatten(data), Vec::new())),
        order => {
            let dict = build_dictionary(data, order)?;
            let notes = dict
                .dropped_inputs
                .iter()
                .map(|name| format!("input `{name}` has no variation and was left out of the dictionary"))
                .collect();
            Ok((dict.features, notes))
        }
    }
}

fn format_ci(ci: [f64; 2]) -> String {
    format!("[{:.3}, {:.3}]", ci[0], ci[1])
}

fn estimate_table(est: &DmlEstimate) -> String {
    let mut rows = vec![
        ("method", est.method.clone()),
        ("cross-fit", if est.crossfit { "yes".into() } else { "no".into() }),
        ("theta", format!("{:.3}", est.theta)),
        ("se (CHS)", format!("{:.3}", est.se_chs)),
        ("se (DKA)", format!("{:.3}", est.se_dka)),
        ("95% CI (CHS)", format_ci(est.ci_95_chs)),
        ("95% CI (DKA)", format_ci(est.ci_95_dka)),
    ];
    if let (Some(k), Some(l)) = (est.k, est.l) {
        rows.push(("folds (K, L)", format!("({k}, {l})")));
    }
    let bw: Vec<String> = est.bandwidths.iter().map(usize::to_string).collect();
    rows.push(("bandwidths", bw.join(" ")));
    let sc = &est.selected_counts;
    rows.push((
        "selected (Z, Y, D)",
        format!("{:.1} {:.1} {:.1}", sc.instrument, sc.outcome, sc.treatment),
    ));
    rows.push(("panel (N, T)", format!("({}, {})", est.n_units, est.n_periods)));
    rows.iter().map(|(k, v)| format!("{k:<20}{v:>24}\n")).collect()
}

pub fn estimate(s: &Settings, format: Format) -> Result<Output> {
    let data = load_data(s)?;
    let (features, mut warnings) = dictionary(s, &data)?;
    let method = s.method("method", FirstStage::TwLasso)?;
    let config = dml_config(s)?;
    let est = if s.flag("crossfit", false)? {
        let plan = make_plan(
            data.n_units(),
            data.n_periods(),
            s.get("K", paneldml::crossfit::DEFAULT_UNIT_FOLDS)?,
            s.get("L", paneldml::crossfit::DEFAULT_TIME_FOLDS)?,
            s.get("seed", 0)?,
        )?;
        estimate_crossfit(&data, &features, &plan, method, &config)?
    } else {
        estimate_fullsample(&data, &features, method, &config)?
    };
    warnings.extend(est.warnings.iter().cloned());
    let data = match format {
        Format::Json => est.to_json() + "\n",
        Format::Csv => format!(
            "method,crossfit,theta,se_chs,se_dka,ci_chs_low,ci_chs_high,ci_dka_low,ci_dka_high\n{},{},{},{},{},{},{},{},{}\n",
            est.method,
            est.crossfit,
            est.theta,
            est.se_chs,
            est.se_dka,
            est.ci_95_chs[0],
            est.ci_95_chs[1],
            est.ci_95_dka[0],
            est.ci_95_dka[1]
        ),
    };
    Ok(Output {
        data,
        table: estimate_table(&est),
        warnings,
    })
}

#[derive(serde::Serialize)]
struct WeightRow<'a> {
    column: &'a str,
    omega2_a: f64,
    omega2_g: f64,
    omega2_e: f64,
    omega2: f64,
    weight: f64,
    bandwidth: Option<usize>,
    selected: bool,
}

/// Two-way loadings of every dictionary column after the iterated fit of
/// the target on the dictionary.
pub fn weights(s: &Settings, format: Format) -> Result<Output> {
    let data = load_data(s)?;
    let (features, mut warnings) = dictionary(s, &data)?;
    let target = match s.raw("target").unwrap_or("outcome") {
        "outcome" => data.outcome().clone(),
        "treatment" => data.treatment().cloned().expect("loaded with a treatment column"),
        other => {
            return Err(ConfigError(format!("key `target`: expected outcome or treatment, got `{other}`")).into())
        }
    };
    let (fit, plan) = iterate_two_way_lasso(&features, &data.layout(), &target, &penalty_config(s)?)?;
    warnings.extend(plan.diagnostics.iter().cloned());
    let intercept = features.intercept_column();
    let rows: Vec<WeightRow> = features
        .column_names()
        .iter()
        .enumerate()
        .filter(|(j, _)| Some(*j) != intercept)
        .map(|(j, name)| {
            let c = plan.components.get(j).copied();
            WeightRow {
                column: name,
                omega2_a: c.map_or(f64::NAN, |c| c.a),
                omega2_g: c.map_or(f64::NAN, |c| c.g),
                omega2_e: c.map_or(f64::NAN, |c| c.e),
                omega2: c.map_or(f64::NAN, |c| c.combined()),
                weight: plan.weights[j],
                bandwidth: plan.bandwidths.get(j).copied(),
                selected: fit.selected.contains(&j),
            }
        })
        .collect();
    if rows.is_empty() {
        warnings.push("the dictionary has no penalized columns".into());
    }

    let mut table = format!(
        "{:<24} {:>12} {:>12} {:>12} {:>12} {:>4} {:>8}\n",
        "column", "omega2_a", "omega2_g", "omega2_e", "omega2", "M", "selected"
    );
    for r in &rows {
        table.push_str(&format!(
            "{:<24} {:>12.3e} {:>12.3e} {:>12.3e} {:>12.3e} {:>4} {:>8}\n",
            r.column,
            r.omega2_a,
            r.omega2_g,
            r.omega2_e,
            r.omega2,
            r.bandwidth.map_or("-".to_string(), |m| m.to_string()),
            if r.selected { "yes" } else { "no" }
        ));
    }
    if let Some(lambda) = plan.lambda {
        table.push_str(&format!("lambda = {lambda:.3}\n"));
    }

    let data = match format {
        Format::Json => {
            let body = serde_json::json!({
                "lambda": plan.lambda,
                "c_lambda": plan.c_lambda,
                "gamma": plan.gamma,
                "degenerate_columns": plan
                    .degenerate_columns
                    .iter()
                    .filter(|&&j| Some(j) != intercept)
                    .map(|&j| features.column_names()[j].as_str())
                    .collect::<Vec<_>>(),
                "columns": rows,
            });
            serde_json::to_string_pretty(&body).expect("weights serialize") + "\n"
        }
        Format::Csv => {
            let mut out = String::from("column,omega2_a,omega2_g,omega2_e,omega2,weight,bandwidth,selected\n");
            for r in &rows {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    r.column,
                    r.omega2_a,
                    r.omega2_g,
                    r.omega2_e,
                    r.omega2,
                    r.weight,
                    r.bandwidth.map_or(String::new(), |m| m.to_string()),
                    r.selected
                ));
            }
            out
        }
    };
    Ok(Output { data, table, warnings })
}
