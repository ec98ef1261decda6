use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("every position along a softmax slice is masked")]
    DegenerateMask,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("prototype bank is empty")]
    EmptyBank,

    #[error("input error: {0}")]
    Input(String),

    #[error("numerical state error: {0}")]
    NumericalState(String),

    #[error("non-finite value produced at stage `{stage}`")]
    NonFinite { stage: String },

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("invalid sequence spec: {0}")]
    Spec(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by a failed computation rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::Divergence { .. } | Error::NumericalState(_)
        )
    }
}
