use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error on line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("timeline has {count} missing (time_step, element_id) cells; first gaps: {}", format_gaps(.first))]
    Gaps { count: usize, first: Vec<(i64, i64)> },

    #[error("non-finite loss at epoch {epoch}, sample {sample}")]
    NonFiniteLoss { epoch: usize, sample: usize },

    #[error("parameters became non-finite after the update in epoch {epoch}")]
    NonFiniteParams { epoch: usize },

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn format_gaps(gaps: &[(i64, i64)]) -> String {
    gaps.iter()
        .map(|(t, e)| format!("(t={t}, e={e})"))
        .collect::<Vec<_>>()
        .join(", ")
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Dimension {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
