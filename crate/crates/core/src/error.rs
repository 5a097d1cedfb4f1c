use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("point ({x}, {y}) lies outside the {width}x{height} field")]
    OutOfBounds {
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("degenerate geometry (condition number {condition:e})")]
    DegenerateGeometry { condition: f64 },
    #[error("point projects to infinity (depth {depth:e})")]
    PointAtInfinity { depth: f64 },
    #[error("invalid tracking template: {0}")]
    InvalidTemplate(String),
    #[error("track did not converge")]
    NotConverged,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("infeasible scene: {0}")]
    Infeasible(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },
    #[error("missing file or directory {0}")]
    Missing(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn parse(context: impl Into<String>, message: impl std::fmt::Display) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.to_string(),
        }
    }

    /// True for failures caused by the caller's inputs rather than by a bug or
    /// the environment.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Infeasible(_) | Error::Parse { .. } | Error::Missing(_) | Error::Shape(_)
        )
    }
}
