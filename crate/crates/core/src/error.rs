use thiserror::Error;

/// Errors raised by the grid model, controller, and scenario tooling.
#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid topology: {0}")]
    Topology(String),

    #[error("parameter `{field}` out of domain: {reason}")]
    Parameter { field: String, reason: String },

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("degenerate problem: {0}")]
    Degenerate(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("I/O error at {}: {source}", path.display())]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("trajectory diverged at t = {time:e} (state norm {norm:e})")]
    Divergence { time: f64, norm: f64, steps: usize },
}

impl GridError {
    pub(crate) fn param(field: impl Into<String>, reason: impl Into<String>) -> Self {
        GridError::Parameter {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, GridError>;

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(GridError::Dimension {
            what,
            expected,
            got,
        })
    }
}
