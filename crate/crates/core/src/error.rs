use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unbalanced panel: missing (unit, time) cells {}", format_pairs(.missing))]
    Unbalanced { missing: Vec<(String, i64)> },

    #[error("duplicate observation for unit {unit} at time {time}")]
    Duplicate { unit: String, time: i64 },

    #[error("parse error at line {line}, column `{column}`: cannot read `{value}`")]
    Parse {
        line: usize,
        column: String,
        value: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("dictionary too large: {0}")]
    Size(String),

    #[error("structural error: {0}")]
    Structural(String),

    #[error("identification failure: {0}")]
    Identification(String),

    #[error("first stage failed in fold (k={k}, l={l}): {source}")]
    FirstStage {
        k: usize,
        l: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// True for errors caused by the caller's input or configuration
    /// rather than by the numerical procedure itself.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidInput(_)
                | Error::Domain(_)
                | Error::Config(_)
                | Error::Unbalanced { .. }
                | Error::Duplicate { .. }
                | Error::Parse { .. }
                | Error::Io { .. }
                | Error::Csv { .. }
                | Error::Size(_)
        )
    }
}

fn format_pairs(pairs: &[(String, i64)]) -> String {
    const SHOWN: usize = 20;
    let mut out = pairs
        .iter()
        .take(SHOWN)
        .map(|(u, t)| format!("({u}, {t})"))
        .collect::<Vec<_>>()
        .join(", ");
    if pairs.len() > SHOWN {
        out.push_str(&format!(" and {} more", pairs.len() - SHOWN));
    }
    out
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
