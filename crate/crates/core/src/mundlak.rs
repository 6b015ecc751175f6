//! Polynomial dictionaries over covariates and their unit and period
//! averages, used as controls when unobserved heterogeneity is modelled as
//! a function of those averages.
//!
//! Inputs are, in order: the covariates `x1..xp`, the unit averages
//! `fbar_i1..fbar_i(p+1)` and the period averages `fbar_t1..fbar_t(p+1)` of
//! `(treatment, covariates)`. Each input is centred and scaled to unit
//! sample standard deviation, then all monomials of degree `1..=order` are
//! formed in degree-lexicographic order and an intercept column is appended.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::data::{FeatureMatrix, PanelDataset};
use crate::error::{Error, Result};
use crate::numerics::sample_variance;

pub const DEFAULT_MAX_COLUMNS: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    pub features: FeatureMatrix,
    pub order: usize,
    /// Names of the inputs that were expanded.
    pub inputs: Vec<String>,
    /// Exponent of each input in each non-intercept column.
    pub terms: Vec<Vec<u8>>,
    /// Inputs without variation; they are left out of the expansion.
    pub dropped_inputs: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DictionarySummary {
    pub order: usize,
    pub n_inputs: usize,
    pub n_terms: usize,
    pub dropped_inputs: Vec<String>,
}

impl Dictionary {
    pub fn summary(&self) -> DictionarySummary {
        DictionarySummary {
            order: self.order,
            n_inputs: self.inputs.len(),
            n_terms: self.terms.len(),
            dropped_inputs: self.dropped_inputs.clone(),
        }
    }
}

/// Unit averages (`N x (1+p)`) and period averages (`T x (1+p)`) of
/// `(treatment, covariates)`.
pub fn mundlak_averages(data: &PanelDataset) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let d = data
        .treatment()
        .ok_or_else(|| Error::InvalidInput("unit and period averages need a treatment column".into()))?;
    let (n, t, p) = (data.n_units(), data.n_periods(), data.n_covariates());
    let x = data.covariates();
    let value = |r: usize, c: usize| if c == 0 { d[r] } else { x[(r, c - 1)] };
    let mut unit = DMatrix::zeros(n, p + 1);
    let mut period = DMatrix::zeros(t, p + 1);
    for c in 0..=p {
        for i in 0..n {
            for s in 0..t {
                let v = value(i * t + s, c);
                unit[(i, c)] += v;
                period[(s, c)] += v;
            }
        }
    }
    unit /= t as f64;
    period /= n as f64;
    Ok((unit, period))
}

/// Number of monomials of degree `1..=order` in `k` variables.
pub fn term_count(k: usize, order: usize) -> usize {
    // C(k + order, order) - 1
    let mut c: u128 = 1;
    for i in 1..=order as u128 {
        c = c * (k as u128 + i) / i;
    }
    (c - 1) as usize
}

/// Index multisets of size `1..=order` over `0..k`, non-decreasing within
/// each, ordered by degree then lexicographically.
pub fn monomials(k: usize, order: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut level: Vec<Vec<usize>> = vec![Vec::new()];
    for _ in 0..order {
        let mut next = Vec::new();
        for prefix in &level {
            let start = prefix.last().copied().unwrap_or(0);
            for v in start..k {
                let mut m = prefix.clone();
                m.push(v);
                next.push(m);
            }
        }
        out.extend(next.iter().cloned());
        level = next;
    }
    out
}

fn label(inputs: &[String], multiset: &[usize]) -> String {
    let mut parts = Vec::new();
    let mut i = 0;
    while i < multiset.len() {
        let v = multiset[i];
        let run = multiset[i..].iter().take_while(|&&w| w == v).count();
        parts.push(if run == 1 {
            inputs[v].clone()
        } else {
            format!("{}^{run}", inputs[v])
        });
        i += run;
    }
    parts.join("*")
}

pub fn build_dictionary(data: &PanelDataset, order: usize) -> Result<Dictionary> {
    build_dictionary_with_cap(data, order, DEFAULT_MAX_COLUMNS)
}

pub fn build_dictionary_with_cap(data: &PanelDataset, order: usize, max_columns: usize) -> Result<Dictionary> {
    if !(1..=3).contains(&order) {
        return Err(Error::Config(format!("dictionary order must be 1, 2 or 3, got {order}")));
    }
    let (unit, period) = mundlak_averages(data)?;
    let (t, p) = (data.n_periods(), data.n_covariates());
    let rows = data.n_rows();
    let x = data.covariates();

    let mut raw: Vec<(String, DVector<f64>)> = Vec::with_capacity(3 * p + 2);
    for j in 0..p {
        raw.push((format!("x{}", j + 1), x.column(j).clone_owned()));
    }
    for c in 0..=p {
        raw.push((format!("fbar_i{}", c + 1), DVector::from_fn(rows, |r, _| unit[(r / t, c)])));
    }
    for c in 0..=p {
        raw.push((format!("fbar_t{}", c + 1), DVector::from_fn(rows, |r, _| period[(r % t, c)])));
    }

    let mut inputs = Vec::new();
    let mut columns = Vec::new();
    let mut dropped_inputs = Vec::new();
    for (name, col) in raw {
        let mean = col.mean();
        let var = if rows > 1 { sample_variance(col.iter().copied()) } else { 0.0 };
        let scale = col.iter().map(|v| v.abs()).fold(0.0, f64::max);
        if !(var > 1e-24 * scale * scale) {
            dropped_inputs.push(name);
            continue;
        }
        let sd = var.sqrt();
        inputs.push(name);
        columns.push(col.map(|v| (v - mean) / sd));
    }

    let k = inputs.len();
    let count = term_count(k, order);
    if count + 1 > max_columns {
        return Err(Error::Size(format!(
            "order-{order} dictionary over {k} inputs has {} columns, cap is {max_columns}",
            count + 1
        )));
    }

    let multisets = monomials(k, order);
    let mut values = DMatrix::from_element(rows, count + 1, 1.0);
    let mut names = Vec::with_capacity(count + 1);
    let mut terms = Vec::with_capacity(count);
    for (c, m) in multisets.iter().enumerate() {
        let mut col = values.column_mut(c);
        for &v in m {
            col.component_mul_assign(&columns[v]);
        }
        names.push(label(&inputs, m));
        let mut exps = vec![0u8; k];
        for &v in m {
            exps[v] += 1;
        }
        terms.push(exps);
    }
    names.push("intercept".to_string());

    Ok(Dictionary {
        features: FeatureMatrix::new(values, names, true)?,
        order,
        inputs,
        terms,
        dropped_inputs,
    })
}
