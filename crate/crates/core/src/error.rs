use std::path::PathBuf;

use thiserror::Error;

use crate::graph::EdgeId;

pub type Result<T, E = ScbmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ScbmError {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("matrix is rank deficient: requested rank {requested}, achieved {achieved}")]
    RankDeficient { requested: usize, achieved: usize },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("while estimating edge {edge}: {source}")]
    Edge {
        edge: EdgeId,
        #[source]
        source: Box<ScbmError>,
    },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<ScbmError>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl ScbmError {
    pub fn param(msg: impl Into<String>) -> Self {
        ScbmError::Parameter(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ScbmError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn at_edge(self, edge: EdgeId) -> Self {
        ScbmError::Edge {
            edge,
            source: Box::new(self),
        }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        ScbmError::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        match self {
            ScbmError::RankDeficient { .. } | ScbmError::NotPositiveDefinite(_) | ScbmError::Divergence { .. } => true,
            ScbmError::Edge { source, .. } | ScbmError::Context { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
