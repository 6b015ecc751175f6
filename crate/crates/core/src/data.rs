//! Balanced panel container, feature matrices and CSV ingestion.
//!
//! Every panel variable is stored as a vector of length `N * T` in
//! unit-major order: the observation for unit `i` at period `t` lives at
//! row `i * T + t`. All modules share this layout.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row index of cell `(unit, period)` in a panel with `n_periods` periods.
#[inline]
pub fn row_index(unit: usize, period: usize, n_periods: usize) -> usize {
    unit * n_periods + period
}

/// Inverse of [`row_index`].
#[inline]
pub fn cell_of(row: usize, n_periods: usize) -> (usize, usize) {
    (row / n_periods, row % n_periods)
}

/// Shape of a rectangular (sub-)panel: how many units it holds and the
/// position of each of its periods on the original time axis.
///
/// Rows of data laid out for this shape follow the usual unit-major order
/// over `times`. Positions matter for lag windows: a sub-panel built from
/// non-adjacent time blocks keeps its true temporal distances.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PanelLayout {
    pub n_units: usize,
    pub times: Vec<usize>,
}

impl PanelLayout {
    pub fn full(n_units: usize, n_periods: usize) -> Self {
        Self {
            n_units,
            times: (0..n_periods).collect(),
        }
    }

    pub fn n_periods(&self) -> usize {
        self.times.len()
    }

    pub fn n_rows(&self) -> usize {
        self.n_units * self.times.len()
    }
}

/// A balanced `N x T` panel of outcome, treatment, instrument and covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    n_units: usize,
    n_periods: usize,
    unit_labels: Vec<String>,
    time_labels: Vec<i64>,
    outcome: DVector<f64>,
    treatment: Option<DVector<f64>>,
    instrument: Option<DVector<f64>>,
    covariates: DMatrix<f64>,
    covariate_names: Vec<String>,
}

impl PanelDataset {
    /// Creates a panel holding only an outcome, with labels `1..=N` and `1..=T`.
    pub fn new(n_units: usize, n_periods: usize, outcome: DVector<f64>) -> Result<Self> {
        if n_units == 0 || n_periods == 0 {
            return Err(Error::InvalidInput(
                "a panel needs at least one unit and one period".into(),
            ));
        }
        check_column("outcome", &outcome, n_units * n_periods)?;
        Ok(Self {
            n_units,
            n_periods,
            unit_labels: (1..=n_units).map(|i| i.to_string()).collect(),
            time_labels: (1..=n_periods as i64).collect(),
            outcome,
            treatment: None,
            instrument: None,
            covariates: DMatrix::zeros(n_units * n_periods, 0),
            covariate_names: Vec::new(),
        })
    }

    pub fn with_treatment(mut self, treatment: DVector<f64>) -> Result<Self> {
        check_column("treatment", &treatment, self.n_rows())?;
        self.treatment = Some(treatment);
        Ok(self)
    }

    pub fn with_instrument(mut self, instrument: DVector<f64>) -> Result<Self> {
        check_column("instrument", &instrument, self.n_rows())?;
        self.instrument = Some(instrument);
        Ok(self)
    }

    pub fn with_covariates(mut self, covariates: DMatrix<f64>, names: Vec<String>) -> Result<Self> {
        if covariates.nrows() != self.n_rows() {
            return Err(Error::InvalidInput(format!(
                "covariates have {} rows, panel has {}",
                covariates.nrows(),
                self.n_rows()
            )));
        }
        if names.len() != covariates.ncols() {
            return Err(Error::InvalidInput(format!(
                "{} covariate names for {} columns",
                names.len(),
                covariates.ncols()
            )));
        }
        if covariates.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("covariates contain non-finite values".into()));
        }
        self.covariates = covariates;
        self.covariate_names = names;
        Ok(self)
    }

    pub fn with_labels(mut self, units: Vec<String>, times: Vec<i64>) -> Result<Self> {
        if units.len() != self.n_units || times.len() != self.n_periods {
            return Err(Error::InvalidInput("label counts do not match panel shape".into()));
        }
        if times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput("time labels must be strictly increasing".into()));
        }
        let distinct: BTreeSet<&String> = units.iter().collect();
        if distinct.len() != units.len() {
            return Err(Error::InvalidInput("unit labels must be distinct".into()));
        }
        self.unit_labels = units;
        self.time_labels = times;
        Ok(self)
    }

    pub fn n_units(&self) -> usize {
        self.n_units
    }

    pub fn n_periods(&self) -> usize {
        self.n_periods
    }

    pub fn n_rows(&self) -> usize {
        self.n_units * self.n_periods
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn layout(&self) -> PanelLayout {
        PanelLayout::full(self.n_units, self.n_periods)
    }

    pub fn unit_labels(&self) -> &[String] {
        &self.unit_labels
    }

    pub fn time_labels(&self) -> &[i64] {
        &self.time_labels
    }

    pub fn outcome(&self) -> &DVector<f64> {
        &self.outcome
    }

    pub fn treatment(&self) -> Option<&DVector<f64>> {
        self.treatment.as_ref()
    }

    /// The instrument, falling back to the treatment when none was supplied.
    pub fn instrument(&self) -> Option<&DVector<f64>> {
        self.instrument.as_ref().or(self.treatment.as_ref())
    }

    pub fn has_explicit_instrument(&self) -> bool {
        self.instrument.is_some()
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn outcome_at(&self, unit: usize, period: usize) -> f64 {
        self.outcome[row_index(unit, period, self.n_periods)]
    }
}

fn check_column(name: &str, values: &DVector<f64>, rows: usize) -> Result<()> {
    if values.len() != rows {
        return Err(Error::InvalidInput(format!(
            "{name} has {} entries, panel has {rows} cells",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("{name} contains non-finite values")));
    }
    Ok(())
}

/// Regressors `f_it` laid out as an `(N*T) x p` matrix in panel row order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    values: DMatrix<f64>,
    column_names: Vec<String>,
    has_intercept: bool,
}

impl FeatureMatrix {
    /// Wraps a matrix. With `has_intercept` the last column must be the
    /// constant 1; it is never penalized.
    pub fn new(values: DMatrix<f64>, column_names: Vec<String>, has_intercept: bool) -> Result<Self> {
        if column_names.len() != values.ncols() {
            return Err(Error::InvalidInput(format!(
                "{} column names for {} columns",
                column_names.len(),
                values.ncols()
            )));
        }
        if has_intercept {
            let ok = values.ncols() > 0 && values.column(values.ncols() - 1).iter().all(|&v| v == 1.0);
            if !ok {
                return Err(Error::InvalidInput(
                    "intercept flag set but the last column is not constant 1".into(),
                ));
            }
        }
        Ok(Self {
            values,
            column_names,
            has_intercept,
        })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn has_intercept(&self) -> bool {
        self.has_intercept
    }

    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.values.ncols()
    }

    /// Index of the intercept column, if any.
    pub fn intercept_column(&self) -> Option<usize> {
        self.has_intercept.then(|| self.values.ncols() - 1)
    }

    /// Number of penalized (non-intercept) columns.
    pub fn n_penalized(&self) -> usize {
        self.values.ncols() - usize::from(self.has_intercept)
    }

    /// Copies the given rows, in order, into a new matrix.
    pub fn select_rows(&self, rows: &[usize]) -> FeatureMatrix {
        let p = self.values.ncols();
        let values = DMatrix::from_fn(rows.len(), p, |r, c| self.values[(rows[r], c)]);
        FeatureMatrix {
            values,
            column_names: self.column_names.clone(),
            has_intercept: self.has_intercept,
        }
    }
}

/// The covariates of a panel as a feature matrix, copied verbatim and
/// without an intercept column.
pub fn flatten(data: &PanelDataset) -> FeatureMatrix {
    FeatureMatrix {
        values: data.covariates.clone(),
        column_names: data.covariate_names.clone(),
        has_intercept: false,
    }
}

/// Splits a feature matrix back into one `N x T` matrix per column.
pub fn unflatten(features: &FeatureMatrix, n_units: usize, n_periods: usize) -> Result<Vec<DMatrix<f64>>> {
    if features.n_rows() != n_units * n_periods {
        return Err(Error::InvalidInput(format!(
            "{} rows cannot be reshaped to {n_units} x {n_periods}",
            features.n_rows()
        )));
    }
    Ok((0..features.n_cols())
        .map(|j| {
            DMatrix::from_fn(n_units, n_periods, |i, t| {
                features.values[(row_index(i, t, n_periods), j)]
            })
        })
        .collect())
}

/// Column roles for reading a panel from CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub unit: String,
    pub time: String,
    pub outcome: String,
    pub treatment: Option<String>,
    pub instrument: Option<String>,
    pub covariates: Vec<String>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            unit: "unit".into(),
            time: "time".into(),
            outcome: "outcome".into(),
            treatment: Some("treatment".into()),
            instrument: None,
            covariates: Vec::new(),
        }
    }
}

impl CsvSchema {
    /// The schema [`save_csv`] writes for this dataset.
    pub fn for_dataset(data: &PanelDataset) -> Self {
        Self {
            unit: "unit".into(),
            time: "time".into(),
            outcome: "outcome".into(),
            treatment: data.treatment.is_some().then(|| "treatment".into()),
            instrument: data.instrument.is_some().then(|| "instrument".into()),
            covariates: data.covariate_names.clone(),
        }
    }
}

fn column_position(headers: &csv::StringRecord, name: &str, path: &Path) -> Result<usize> {
    headers.iter().position(|h| h.trim() == name).ok_or_else(|| {
        Error::InvalidInput(format!("{}: missing column `{name}`", path.display()))
    })
}

/// Reads a balanced panel from a CSV file with a header row.
///
/// Rows may appear in any order; the result is sorted unit-major then by
/// time. Units sort numerically when every label is an integer and
/// lexicographically otherwise.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<PanelDataset> {
    let path = path.as_ref();
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(csv_err)?;
    let headers = reader.headers().map_err(csv_err)?.clone();

    let unit_col = column_position(&headers, &schema.unit, path)?;
    let time_col = column_position(&headers, &schema.time, path)?;
    let mut value_names = vec![schema.outcome.clone()];
    value_names.extend(schema.treatment.iter().cloned());
    value_names.extend(schema.instrument.iter().cloned());
    value_names.extend(schema.covariates.iter().cloned());
    let value_cols = value_names
        .iter()
        .map(|n| column_position(&headers, n, path))
        .collect::<Result<Vec<_>>>()?;

    let mut cells: HashMap<(String, i64), Vec<f64>> = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let field = |idx: usize| record.get(idx).unwrap_or("").trim();
        let unit = field(unit_col).to_string();
        let raw_time = field(time_col);
        let time: i64 = raw_time.parse().map_err(|_| Error::Parse {
            line,
            column: schema.time.clone(),
            value: raw_time.to_string(),
        })?;
        let mut values = Vec::with_capacity(value_cols.len());
        for (name, &idx) in value_names.iter().zip(&value_cols) {
            let raw = field(idx);
            let v: f64 = raw
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    line,
                    column: name.clone(),
                    value: raw.to_string(),
                })?;
            values.push(v);
        }
        if cells.insert((unit.clone(), time), values).is_some() {
            return Err(Error::Duplicate { unit, time });
        }
    }
    if cells.is_empty() {
        return Err(Error::InvalidInput(format!("{}: no data rows", path.display())));
    }

    let units = sort_unit_labels(cells.keys().map(|(u, _)| u.clone()).collect());
    let times: Vec<i64> = cells.keys().map(|&(_, t)| t).collect::<BTreeSet<_>>().into_iter().collect();

    let mut missing = Vec::new();
    for u in &units {
        for &t in &times {
            if !cells.contains_key(&(u.clone(), t)) {
                missing.push((u.clone(), t));
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Unbalanced { missing });
    }

    let (n, t_len) = (units.len(), times.len());
    let mut columns = vec![DVector::<f64>::zeros(n * t_len); value_names.len()];
    for (i, u) in units.iter().enumerate() {
        for (t, &time) in times.iter().enumerate() {
            let row = row_index(i, t, t_len);
            for (c, v) in cells[&(u.clone(), time)].iter().enumerate() {
                columns[c][row] = *v;
            }
        }
    }

    let mut columns = columns.into_iter();
    let mut data = PanelDataset::new(n, t_len, columns.next().expect("outcome column"))?;
    if schema.treatment.is_some() {
        data = data.with_treatment(columns.next().expect("treatment column"))?;
    }
    if schema.instrument.is_some() {
        data = data.with_instrument(columns.next().expect("instrument column"))?;
    }
    let rest: Vec<DVector<f64>> = columns.collect();
    let covariates = if rest.is_empty() {
        DMatrix::zeros(n * t_len, 0)
    } else {
        DMatrix::from_columns(&rest)
    };
    data = data.with_covariates(covariates, schema.covariates.clone())?;
    data.with_labels(units, times)
}

fn sort_unit_labels(labels: BTreeSet<String>) -> Vec<String> {
    let numeric: Option<Vec<(i64, String)>> = labels
        .iter()
        .map(|l| l.parse::<i64>().ok().map(|n| (n, l.clone())))
        .collect();
    match numeric {
        Some(mut pairs) => {
            pairs.sort();
            pairs.into_iter().map(|(_, l)| l).collect()
        }
        None => labels.into_iter().collect(),
    }
}

/// Writes a panel in the schema returned by [`CsvSchema::for_dataset`].
///
/// Floats use Rust's shortest round-trip formatting, so reading the file
/// back reproduces every value bit for bit.
pub fn save_csv(data: &PanelDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut writer = csv::Writer::from_path(path).map_err(csv_err)?;
    write_csv(data, &mut writer).map_err(csv_err)?;
    writer.flush().map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Serializes a panel to CSV text (same layout as [`save_csv`]).
pub fn to_csv_string(data: &PanelDataset) -> String {
    let mut writer = csv::Writer::from_writer(Vec::new());
    write_csv(data, &mut writer).expect("writing to memory cannot fail");
    String::from_utf8(writer.into_inner().expect("flush to memory")).expect("utf-8 output")
}

fn write_csv<W: std::io::Write>(data: &PanelDataset, writer: &mut csv::Writer<W>) -> csv::Result<()> {
    let schema = CsvSchema::for_dataset(data);
    let mut header = vec![schema.unit.clone(), schema.time.clone(), schema.outcome.clone()];
    header.extend(schema.treatment.iter().cloned());
    header.extend(schema.instrument.iter().cloned());
    header.extend(schema.covariates.iter().cloned());
    writer.write_record(&header)?;

    let mut by_row: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for i in 0..data.n_units {
        for t in 0..data.n_periods {
            let r = row_index(i, t, data.n_periods);
            let mut rec = vec![
                data.unit_labels[i].clone(),
                data.time_labels[t].to_string(),
                data.outcome[r].to_string(),
            ];
            if let Some(d) = &data.treatment {
                rec.push(d[r].to_string());
            }
            if let Some(z) = &data.instrument {
                rec.push(z[r].to_string());
            }
            for j in 0..data.covariates.ncols() {
                rec.push(data.covariates[(r, j)].to_string());
            }
            by_row.insert(r, rec);
        }
    }
    for rec in by_row.values() {
        writer.write_record(rec)?;
    }
    Ok(())
}
