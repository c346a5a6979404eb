//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration document or CLI arguments.
    #[error("config error: {0}")]
    Config(String),

    /// An argument violates an operation's preconditions.
    #[error("domain error: {0}")]
    Domain(String),

    /// A trajectory left the finite range during time integration.
    #[error("integration diverged on trajectory {trajectory} at t = {time}")]
    IntegrationDiverged { trajectory: usize, time: f64 },

    /// Clustering cannot produce the requested number of cells.
    #[error("infeasible clustering: {0}")]
    InfeasibleClustering(String),

    /// A diagonal Gram entry vanished where a positive one is required.
    #[error("singular Gram matrix: cell {0} has zero mass")]
    SingularGram(usize),

    /// The residual quotient is undefined for this eigenpair.
    #[error("undefined residual: {0}")]
    UndefinedResidual(String),

    /// Operation requires single-trajectory data.
    #[error("unsupported sampling: {0}")]
    UnsupportedSampling(String),

    /// Input data carries no usable variance or rank.
    #[error("degenerate data: {0}")]
    DegenerateData(String),

    /// A numerical routine failed to converge or produced invalid output.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A text input file violates its schema.
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Process exit code for the CLI: 2 config, 3 numerical, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Domain(_) => 2,
            Error::Parse { .. } | Error::Io { .. } => 4,
            _ => 3,
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
