use std::path::PathBuf;

use chrono::NaiveDate;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("date gap: {before} is followed by {after} (expected {expected})")]
    Gap {
        before: NaiveDate,
        after: NaiveDate,
        expected: NaiveDate,
    },

    #[error("cannot parse cell at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("duplicate region `{0}`")]
    DuplicateRegion(String),

    #[error("negative count {value} for region `{region}` on {date}")]
    NegativeCount {
        region: String,
        date: NaiveDate,
        value: f64,
    },

    #[error("date range error: {0}")]
    Range(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid filter specification: {0}")]
    Spec(String),

    #[error("invalid epoch plan: {0}")]
    Plan(String),

    #[error("region `{region}` has zero variance in epoch {epoch}")]
    DegenerateSeries { region: String, epoch: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid number of clusters: {0}")]
    K(String),

    #[error("diagnostics error: {0}")]
    Diagnostics(String),

    #[error("invalid panel: {0}")]
    Panel(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Name of the pipeline stage that produced this error, if any.
    pub fn stage(&self) -> Option<&'static str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}
