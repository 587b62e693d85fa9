use std::fmt;

use thiserror::Error;

/// A single configuration problem, located by a JSON path such as `model.gamma[0]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl Violation {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self { path: path.into(), message: message.into() }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

fn join(violations: &[Violation]) -> String {
    violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("configuration error: {}", join(.0))]
    Config(Vec<Violation>),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("solver did not converge after {iterations} iterations (gap {gap:.3e}): {message}")]
    Solver {
        message: String,
        iterations: usize,
        gap: f64,
        /// Last iterate (flattened), or the iterate history for outer solvers.
        last_iterate: Vec<f64>,
    },

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("diagnostic failure: {0}")]
    Diagnostic(String),

    #[error("simulation failed at t = {time}: {message}")]
    Simulation { time: f64, message: String },

    #[error("internal invariant violated: {0}")]
    Internal(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config(vec![Violation::new(path, message)])
    }

    pub fn in_stage(self, stage: &str) -> Self {
        Error::Stage { stage: stage.to_string(), source: Box::new(self) }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Argument(_) | Error::Config(_) | Error::Json(_) => 2,
            Error::Solver { .. } => 3,
            Error::Precondition(_) | Error::Numerical(_) | Error::Diagnostic(_) | Error::Simulation { .. } | Error::Internal(_) => 4,
            Error::Capacity(_) => 5,
            Error::Stage { source, .. } => source.exit_code(),
            Error::Io(_) | Error::Csv(_) => 1,
        }
    }
}

pub(crate) fn check_dim(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Argument(format!("{what} has length {got}, expected {want}")));
    }
    Ok(())
}
