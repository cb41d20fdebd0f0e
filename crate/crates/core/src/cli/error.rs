use std::path::PathBuf;

use serde::Serialize;
use thiserror::Error;

use crate::graph::format::FormatError;
use crate::graph::GraphError;
use crate::surgery::SurgeryError;
use crate::tensor::TensorError;
use crate::train::TrainError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("another resfuse process holds {0}")]
    Locked(PathBuf),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Surgery(#[from] SurgeryError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{0}")]
    Numeric(String),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        source: Box<CliError>,
    },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, e: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            message: e.to_string(),
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            CliError::Stage { .. } => self,
            e => CliError::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Stage { source, .. } => source.exit_code(),
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Numeric(_) | CliError::Train(TrainError::Diverged { .. }) => EXIT_NUMERIC,
            CliError::Graph(e) | CliError::Train(TrainError::Graph(e)) if e.is_non_finite() => EXIT_NUMERIC,
            _ => EXIT_VALIDATION,
        }
    }

    fn kind(&self) -> &'static str {
        match self.exit_code() {
            EXIT_USAGE => "usage",
            EXIT_NUMERIC => "numeric",
            _ => "validation",
        }
    }

    /// One-line JSON object for stderr.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Body<'a> {
            code: i32,
            kind: &'a str,
            stage: Option<&'a str>,
            message: String,
        }
        #[derive(Serialize)]
        struct Wrapper<'a> {
            error: Body<'a>,
        }
        let (stage, inner) = match self {
            CliError::Stage { stage, source } => (Some(*stage), source.as_ref()),
            e => (None, e),
        };
        let w = Wrapper {
            error: Body {
                code: self.exit_code(),
                kind: self.kind(),
                stage,
                message: inner.to_string(),
            },
        };
        serde_json::to_string(&w).unwrap_or_else(|_| format!("{{\"error\":{{\"code\":{}}}}}", self.exit_code()))
    }
}
