use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("layout error: {0}")]
    Layout(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("not a state: {0}")]
    NotAState(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("scenario error: {0}")]
    Scenario(String),
    #[error("plan error: {0}")]
    Plan(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Solver(_) | Error::Numerical(_) => 3,
            Error::Plan(_) => 4,
            _ => 2,
        }
    }
}
