use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("data: cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("data: malformed csv: {0}")]
    Csv(String),

    #[error("data: column `{0}` not found in header")]
    MissingColumn(String),

    #[error("data: column `{0}` selected more than once")]
    DuplicateColumn(String),

    #[error("data: row {row}, column `{column}`: cannot parse `{value}` as a finite real")]
    BadCell { row: usize, column: String, value: String },

    #[error("data: {0}")]
    InvalidData(String),

    #[error("interactions: {0}")]
    Plan(String),

    #[error("{context}: dimension mismatch, expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("nuisance: design has {cols} columns but only {n} rows (need n >= {cols})")]
    DesignTooWide { cols: usize, n: usize },

    #[error("{context}: design matrix is numerically rank zero")]
    RankZero { context: &'static str },

    #[error("{context}: design is rank deficient (rank {rank} of {cols} columns)")]
    RankDeficient {
        context: &'static str,
        rank: usize,
        cols: usize,
    },

    #[error(
        "cue: moment covariance not factorizable even with ridge {ridge:.3e} (condition estimate {condition:.3e})"
    )]
    Factorization { ridge: f64, condition: f64 },

    #[error("cue: objective is non-finite at every grid point")]
    ObjectiveNonFinite,

    #[error("cue: invalid bounds [{lo}, {hi}]")]
    Bounds { lo: f64, hi: f64 },

    #[error("baselines: interaction denominator is zero (|denominator| = {denominator:.3e})")]
    WeakInteraction { denominator: f64 },

    #[error("identification failure: {0}")]
    Identification(String),

    #[error("oracle: p = {p} exceeds the enumeration guard of {max}")]
    Guard { p: usize, max: usize },

    #[error("special: {0} did not converge")]
    NonConvergence(&'static str),

    #[error("config: {0}")]
    Config(String),

    #[error("simulate: {excluded} of {reps} replications failed (more than 5%)")]
    TooManyExcluded { excluded: usize, reps: usize },
}

impl Error {
    /// Errors caused by the input data or configuration rather than by the
    /// numerics; the CLI maps these to a distinct exit status.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Csv(_)
                | Error::MissingColumn(_)
                | Error::DuplicateColumn(_)
                | Error::BadCell { .. }
                | Error::InvalidData(_)
                | Error::Plan(_)
                | Error::Config(_)
                | Error::Guard { .. }
                | Error::Bounds { .. }
        )
    }
}
