use thiserror::Error;

use crate::crypto::Digest;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed input: {0}")]
    Malformed(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("block of {len} bytes exceeds block size {block_size}")]
    BlockTooLarge { len: usize, block_size: usize },

    #[error("dataset commitment mismatch: expected {expected}, found {found}")]
    CommitmentMismatch { expected: Digest, found: Digest },

    #[error("integrity violation in block {block}")]
    IntegrityViolation { block: u64 },

    #[error("record index {index} out of range (record count {count})")]
    OutOfRange { index: u64, count: u64 },

    #[error("code already measured or an attestation was already issued")]
    MeasureAfterAttest,

    #[error("attestation requested before code measurement")]
    NotMeasured,

    #[error("attestation report does not match the EDR digest")]
    DigestMismatch,

    #[error("exclave runs {expected} tasks, request was for {got}")]
    TaskKindMismatch { expected: String, got: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value produced by task")]
    NonFinite,

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("missing payload {0:?}")]
    MissingPayload(String),

    #[error("exclave {exclave} failed in round {round}: {source}")]
    Exclave {
        exclave: String,
        round: i64,
        #[source]
        source: Box<Error>,
    },

    #[error("job error: {0}")]
    Job(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
