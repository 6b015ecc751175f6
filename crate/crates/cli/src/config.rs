//! Flat `key = value` run configuration.
//!
//! A config file holds one assignment per line; `#` starts a comment. Values
//! from `--seed` and trailing `key=value` arguments override the file. A
//! relative `data` path in a file is resolved against the file's directory.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use paneldml::dml::FirstStage;
use paneldml::penalty::BandwidthRule;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Estimate,
    Weights,
}

pub struct KeySpec {
    pub name: &'static str,
    pub help: &'static str,
}

const fn key(name: &'static str, help: &'static str) -> KeySpec {
    KeySpec { name, help }
}

const TUNING: &[KeySpec] = &[
    key("c_lambda", "penalty constant C_lambda > 1 (default 2)"),
    key("gamma", "tail probability in the penalty level (default 0.1/log(max(N,T)))"),
    key("bandwidth", "Bartlett bandwidth: `andrews` (default) or a positive integer"),
    key("max_refinements", "maximum penalty-loading refinements (default 10)"),
];

const FOLDS: &[KeySpec] = &[
    key("K", "number of unit folds (default 4)"),
    key("L", "number of time folds, at least 4 (default 8)"),
    key("seed", "base random seed (default 0)"),
];

const SIMULATE: &[KeySpec] = &[
    key("n_units", "number of units N (default 25)"),
    key("n_periods", "number of periods T (default 25)"),
    key("p", "number of covariates (default 200)"),
    key("reps", "number of replications (default 100)"),
    key("methods", "comma list of pols, h_lasso, c_lasso, tw_lasso (default all)"),
    key("crossfit", "no, yes or both (default both)"),
    key("iid", "draw every component independently per cell (default false)"),
    key("theta0", "true parameter (default 1)"),
    key("w1", "weight of unit components (default 1/3)"),
    key("w2", "weight of period components (default 1/3)"),
    key("w3", "weight of idiosyncratic components (default 1/3)"),
    key("ar_coef", "AR(1) coefficient of period components (default 0.5)"),
    key("ar_init_var", "variance of the first period draw (default 0.75)"),
    key("toeplitz_base", "covariate correlation base b in b^|j-k| (default 0.5)"),
];

const DATA: &[KeySpec] = &[
    key("data", "path of the input CSV (required)"),
    key("unit_col", "unit id column (default unit)"),
    key("time_col", "integer time column (default time)"),
    key("outcome_col", "outcome column (default outcome)"),
    key("treatment_col", "treatment column (default treatment)"),
    key("instrument_col", "instrument column (default: the treatment)"),
    key("covariates", "comma list of covariate columns (required)"),
    key("tau", "dictionary order 1..3, or 0 for the raw covariates (default 1)"),
];

const ESTIMATE: &[KeySpec] = &[
    key("method", "first stage: pols, h_lasso, c_lasso or tw_lasso (default tw_lasso)"),
    key("crossfit", "yes or no (default no)"),
];

const WEIGHTS: &[KeySpec] = &[key("target", "outcome or treatment (default outcome)")];

impl Command {
    pub fn keys(self) -> Vec<&'static KeySpec> {
        let groups: &[&[KeySpec]] = match self {
            Command::Simulate => &[SIMULATE, FOLDS, TUNING],
            Command::Estimate => &[DATA, ESTIMATE, FOLDS, TUNING],
            Command::Weights => &[DATA, WEIGHTS, TUNING],
        };
        groups.iter().flat_map(|g| g.iter()).collect()
    }

    pub fn key_help(self) -> String {
        let mut out = String::from("Config keys (key = value in --config, or key=value arguments):\n");
        for k in self.keys() {
            out.push_str(&format!("  {:<16} {}\n", k.name, k.help));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

type Result<T> = std::result::Result<T, ConfigError>;

/// Validated assignments for one subcommand.
#[derive(Debug, Clone)]
pub struct Settings {
    command: Command,
    values: BTreeMap<String, String>,
}

fn split_assignment(text: &str, origin: &str) -> Result<(String, String)> {
    let (k, v) = text
        .split_once('=')
        .ok_or_else(|| ConfigError(format!("{origin}: expected key=value, got `{text}`")))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(ConfigError(format!("{origin}: empty key in `{text}`")));
    }
    Ok((k.to_string(), v.trim().to_string()))
}

impl Settings {
    pub fn new(command: Command) -> Self {
        Self {
            command,
            values: BTreeMap::new(),
        }
    }

    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        self.merge_text(&text, &path.display().to_string())?;
        // A relative data path in a config file is relative to that file.
        if let (Some(data), Some(dir)) = (self.values.get("data"), path.parent()) {
            let data_path = Path::new(data);
            if data_path.is_relative() {
                let joined = dir.join(data_path).display().to_string();
                self.values.insert("data".into(), joined);
            }
        }
        Ok(())
    }

    pub fn merge_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = split_assignment(line, &format!("{origin}:{}", n + 1))?;
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn merge_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = split_assignment(assignment, "argument")?;
        self.set(&k, &v)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !self.command.keys().iter().any(|k| k.name == key) {
            return Err(ConfigError(format!("unknown config key `{key}`")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.raw(key)
            .filter(|v| !v.is_empty())
            .ok_or_else(|| ConfigError(format!("missing required key `{key}`")))
    }

    pub fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| ConfigError(format!("key `{key}`: cannot parse `{v}`"))),
        }
    }

    pub fn get_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.raw(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| ConfigError(format!("key `{key}`: cannot parse `{v}`")))
            })
            .transpose()
    }

    pub fn flag(&self, key: &str, default: bool) -> Result<bool> {
        match self.raw(key).map(|v| v.to_ascii_lowercase()) {
            None => Ok(default),
            Some(v) => match v.as_str() {
                "1" | "true" | "yes" => Ok(true),
                "0" | "false" | "no" => Ok(false),
                _ => Err(ConfigError(format!("key `{key}`: expected yes or no, got `{v}`"))),
            },
        }
    }

    pub fn list(&self, key: &str) -> Vec<String> {
        self.raw(key)
            .map(|v| {
                v.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn bandwidth(&self) -> Result<BandwidthRule> {
        match self.raw("bandwidth") {
            None => Ok(BandwidthRule::Andrews),
            Some(v) if v.eq_ignore_ascii_case("andrews") => Ok(BandwidthRule::Andrews),
            Some(v) => match v.parse::<usize>() {
                Ok(m) if m >= 1 => Ok(BandwidthRule::Fixed(m)),
                _ => Err(ConfigError(format!(
                    "key `bandwidth`: expected `andrews` or a positive integer, got `{v}`"
                ))),
            },
        }
    }

    pub fn method(&self, key: &str, default: FirstStage) -> Result<FirstStage> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => FirstStage::parse(v).map_err(|e| ConfigError(format!("key `{key}`: {e}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_overrides() {
        let mut s = Settings::new(Command::Simulate);
        s.merge_text("# comment\nn_units = 10\np=5 # trailing\n\n", "test").unwrap();
        s.merge_override("p=7").unwrap();
        assert_eq!(s.get::<usize>("n_units", 0).unwrap(), 10);
        assert_eq!(s.get::<usize>("p", 0).unwrap(), 7);
        assert_eq!(s.get::<usize>("reps", 3).unwrap(), 3);
    }

    #[test]
    fn unknown_key_is_named() {
        let mut s = Settings::new(Command::Estimate);
        let err = s.merge_text("n_units = 3", "f.conf").unwrap_err();
        assert!(err.0.contains("`n_units`"), "{err}");
        let err = s.merge_override("bogus=1").unwrap_err();
        assert!(err.0.contains("`bogus`"));
    }

    #[test]
    fn malformed_lines_and_values() {
        let mut s = Settings::new(Command::Simulate);
        assert!(s.merge_text("n_units 3", "f.conf").unwrap_err().0.contains("f.conf:1"));
        s.set("crossfit", "maybe").unwrap();
        assert!(s.flag("crossfit", false).is_err());
        s.set("bandwidth", "0").unwrap();
        assert!(s.bandwidth().is_err());
        s.set("bandwidth", "3").unwrap();
        assert_eq!(s.bandwidth().unwrap(), BandwidthRule::Fixed(3));
    }

    #[test]
    fn every_key_has_help() {
        for cmd in [Command::Simulate, Command::Estimate, Command::Weights] {
            let help = cmd.key_help();
            for k in cmd.keys() {
                assert!(help.contains(k.name));
            }
        }
    }
}
