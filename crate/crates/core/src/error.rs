use thiserror::Error;

use crate::vocab::TokenId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("sequence is empty")]
    EmptySequence,
    #[error("n-gram order must be at least 1, got {0}")]
    InvalidOrder(usize),
    #[error("token id {id} out of range for vocabulary of size {size}")]
    InvalidTokenId { id: TokenId, size: usize },
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),
    #[error("interpolation weight {0} outside [0, 1]")]
    LambdaOutOfRange(f64),
    #[error("malformed model file: {0}")]
    Format(String),
    #[error("unsupported model format version {found} (this build reads up to {supported})")]
    Version { found: u32, supported: u32 },
    #[error("enumeration needs {needed} evaluations, budget is {budget}")]
    BudgetExceeded { needed: u128, budget: u128 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("no canary satisfying the pattern and absent from the corpus after {0} attempts")]
    CanaryNotFound(usize),
    #[error("insertion rate 1:{rate} yields zero insertions for a {tokens}-token corpus")]
    ZeroInsertions { rate: u64, tokens: usize },
    #[error("oracle error: {0}")]
    Oracle(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
