//! Clustered-panel sample splitting: `K` random unit folds crossed with `L`
//! contiguous time blocks. The auxiliary sample of fold `(k, l)` drops the
//! units of `I_k` and the time blocks `l - 1`, `l`, `l + 1` (clipped at the
//! ends, never wrapping around).

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::PanelLayout;
use crate::error::{Error, Result};
use crate::numerics::RngStream;

pub const DEFAULT_UNIT_FOLDS: usize = 4;
pub const DEFAULT_TIME_FOLDS: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossFitPlan {
    pub n_units: usize,
    pub n_periods: usize,
    /// `K` sets of 0-based unit indices, each sorted.
    pub unit_folds: Vec<Vec<usize>>,
    /// `L` contiguous runs of 0-based periods, in time order.
    pub time_folds: Vec<Vec<usize>>,
    pub seed: u64,
}

/// Units crossed with periods; rows follow the panel's unit-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subpanel {
    pub units: Vec<usize>,
    pub times: Vec<usize>,
}

impl Subpanel {
    /// Row indices into the full `N x n_periods` panel.
    pub fn rows(&self, n_periods: usize) -> Vec<usize> {
        let mut rows = Vec::with_capacity(self.units.len() * self.times.len());
        for &i in &self.units {
            rows.extend(self.times.iter().map(|&t| i * n_periods + t));
        }
        rows
    }

    pub fn layout(&self) -> PanelLayout {
        PanelLayout {
            n_units: self.units.len(),
            times: self.times.clone(),
        }
    }

    pub fn n_cells(&self) -> usize {
        self.units.len() * self.times.len()
    }
}

/// Splits `0..n` into `parts` consecutive runs whose lengths differ by at
/// most one, longer runs first.
fn split_sizes(n: usize, parts: usize) -> Vec<usize> {
    let base = n / parts;
    let extra = n % parts;
    (0..parts).map(|k| base + usize::from(k < extra)).collect()
}

pub fn make_plan(n_units: usize, n_periods: usize, k: usize, l: usize, seed: u64) -> Result<CrossFitPlan> {
    if l < 4 {
        return Err(Error::Config(format!(
            "L = {l} time folds leaves no auxiliary periods for interior folds; need L >= 4"
        )));
    }
    if k == 0 || k > n_units {
        return Err(Error::Domain(format!("need 1 <= K <= N = {n_units}, got K = {k}")));
    }
    if l > n_periods {
        return Err(Error::Domain(format!("need L <= T = {n_periods}, got L = {l}")));
    }

    let mut order: Vec<usize> = (0..n_units).collect();
    order.shuffle(&mut RngStream::new(seed, 0).rng());
    let mut start = 0;
    let unit_folds = split_sizes(n_units, k)
        .into_iter()
        .map(|size| {
            let mut fold = order[start..start + size].to_vec();
            fold.sort_unstable();
            start += size;
            fold
        })
        .collect();

    let mut start = 0;
    let time_folds = split_sizes(n_periods, l)
        .into_iter()
        .map(|size| {
            let fold = (start..start + size).collect();
            start += size;
            fold
        })
        .collect();

    Ok(CrossFitPlan {
        n_units,
        n_periods,
        unit_folds,
        time_folds,
        seed,
    })
}

impl CrossFitPlan {
    pub fn k(&self) -> usize {
        self.unit_folds.len()
    }

    pub fn l(&self) -> usize {
        self.time_folds.len()
    }

    fn check(&self, k: usize, l: usize) -> Result<()> {
        if k >= self.k() || l >= self.l() {
            return Err(Error::Domain(format!(
                "fold ({k}, {l}) outside a {} x {} plan",
                self.k(),
                self.l()
            )));
        }
        Ok(())
    }

    /// `I_k x S_l`.
    pub fn main_sample(&self, k: usize, l: usize) -> Result<Subpanel> {
        self.check(k, l)?;
        Ok(Subpanel {
            units: self.unit_folds[k].clone(),
            times: self.time_folds[l].clone(),
        })
    }

    /// Units outside `I_k` crossed with periods outside `S_{l-1} ∪ S_l ∪ S_{l+1}`.
    pub fn auxiliary_sample(&self, k: usize, l: usize) -> Result<Subpanel> {
        self.check(k, l)?;
        let mut units: Vec<usize> = self
            .unit_folds
            .iter()
            .enumerate()
            .filter(|&(kk, _)| kk != k)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        units.sort_unstable();
        let times: Vec<usize> = self
            .time_folds
            .iter()
            .enumerate()
            .filter(|&(ll, _)| ll.abs_diff(l) > 1)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        if units.is_empty() || times.is_empty() {
            return Err(Error::Structural(format!(
                "auxiliary sample of fold ({k}, {l}) is empty ({} units, {} periods)",
                units.len(),
                times.len()
            )));
        }
        Ok(Subpanel { units, times })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidInput(format!("cross-fit plan: {e}")))
    }
}
