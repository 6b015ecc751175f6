//! Double/debiased machine learning for panels with two-way clustered
//! dependence: weighted LASSO nuisance estimation with cluster-robust
//! penalty loadings, panel cross-fitting, a Mundlak-style dictionary and
//! moment-based estimation of a scalar structural parameter.

pub mod crossfit;
pub mod data;
pub mod dml;
pub mod error;
pub mod lasso;
pub mod mundlak;
pub mod numerics;
pub mod penalty;
pub mod sim;

pub use data::{flatten, load_csv, save_csv, unflatten, CsvSchema, FeatureMatrix, PanelDataset, PanelLayout};
pub use error::{Error, Result};
pub use lasso::{kkt_certificate, post_lasso, solve_weighted_lasso, LassoFit, LassoOptions, LassoSolver};
pub use crossfit::{make_plan, CrossFitPlan};
pub use dml::{estimate_crossfit, estimate_fullsample, DmlConfig, DmlEstimate, FirstStage};
pub use mundlak::{build_dictionary, Dictionary};
pub use penalty::{iterate_two_way_lasso, BandwidthRule, PenaltyConfig, PenaltyPlan};
pub use sim::{generate, run_monte_carlo, DgpConfig, McOptions, McReport, MethodSpec};
