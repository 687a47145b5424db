use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EquilibriumError {
    /// The symmetric first-order condition has no admissible positive root:
    /// at least one of `Dg1 + z1`, `Dg2 + z2` is not strictly negative.
    #[error("no positive gamma root: Dg1+z1 = {dg1_plus_z1}, Dg2+z2 = {dg2_plus_z2}")]
    NoPositiveRoot { dg1_plus_z1: f64, dg2_plus_z2: f64 },

    #[error("degenerate spread condition: c = {c}, sigma = {sigma}, z_tilde = {z_tilde}")]
    Degenerate { c: f64, sigma: f64, z_tilde: f64 },

    #[error("best-response iteration did not converge in {iterations} iterations")]
    NotConverged { iterations: usize },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParams { field: &'static str, reason: String },

    #[error("equilibrium not found (path {path}, step {step}): {source}")]
    EquilibriumNotFound {
        path: usize,
        step: usize,
        #[source]
        source: EquilibriumError,
    },

    #[error(
        "total jump probability {total:.4} exceeds 1 (path {path}, step {step}); increase substeps"
    )]
    StepTooCoarse {
        path: usize,
        step: usize,
        total: f64,
    },

    #[error("training diverged at iteration {iteration}: loss = {loss}")]
    TrainingDiverged { iteration: usize, loss: f64 },

    #[error("malformed input {path:?}, row {row}: {reason}")]
    MalformedInput {
        path: PathBuf,
        row: usize,
        reason: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
