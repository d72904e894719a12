use thiserror::Error;

pub type Result<T> = std::result::Result<T, CalmError>;

#[derive(Debug, Error)]
pub enum CalmError {
    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("missing prediction for subject `{id}` (arm {arm}{})", .context.as_deref().map(|c| format!(", {c}")).unwrap_or_default())]
    MissingPrediction {
        id: String,
        arm: usize,
        context: Option<String>,
    },

    #[error("remote predictor failed (retryable: {retryable}): {message}")]
    Remote { message: String, retryable: bool },

    #[error("query point {x:?} lies outside the covariate support")]
    OutOfSupport { x: Vec<f64> },

    #[error("query point {x:?} is unstable: effective sample size {ess:.2} below {min}")]
    UnstableQuery { x: Vec<f64>, ess: f64, min: f64 },

    #[error("simulation harness: {0}")]
    Harness(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CalmError {
    pub fn domain(msg: impl Into<String>) -> Self {
        CalmError::Domain(msg.into())
    }

    pub fn parse(row: usize, column: impl Into<String>, message: impl Into<String>) -> Self {
        CalmError::Parse {
            row,
            column: column.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by bad inputs rather than by the estimation itself.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            CalmError::Parse { .. }
                | CalmError::Domain(_)
                | CalmError::MissingPrediction { .. }
                | CalmError::Io(_)
        )
    }
}
