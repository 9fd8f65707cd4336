use kan_core::KanError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Kan(#[from] KanError),

    #[error("all {0} model seeds produced NaN losses")]
    AllSeedsFailed(usize),

    #[error("{0} verification check(s) failed")]
    Verification(usize),
}

impl BenchError {
    /// Process exit code: 1 config, 2 numerical failure, 3 verification.
    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::Config(_) | BenchError::Io(_) | BenchError::Csv(_) | BenchError::Json(_) => 1,
            BenchError::Kan(KanError::NotANumber(_) | KanError::Numerical(_)) => 2,
            BenchError::Kan(_) => 1,
            BenchError::AllSeedsFailed(_) => 2,
            BenchError::Verification(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, BenchError>;
