use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("shape mismatch: {0}")]
    ShapeError(String),

    #[error("numerical divergence: {0}")]
    NumericalDivergence(String),

    #[error("L-BFGS produced a non-finite value at iteration {iteration}")]
    LbfgsDiverged {
        iteration: usize,
        last_finite: Box<crate::solvers::DenseMatrix>,
    },

    #[error("adapter is incompatible with the base model: {0}")]
    IncompatibleAdapter(String),

    #[error("unknown token `{0}`")]
    UnknownToken(String),

    #[error("tuning diverged at step {step}: loss = {loss}")]
    TuningDiverged { step: usize, loss: f64 },

    #[error("fusion weights must sum to 1 (got {0})")]
    WeightNormalizationError(f64),

    #[error("nothing to fuse")]
    EmptyFusion,

    #[error("token `{name}` collides: already defined by {existing}")]
    TokenCollision { name: String, existing: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("bad magic header in {0}")]
    BadMagic(String),

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("base-model fingerprint mismatch: file has {found:016x}, model is {expected:016x}")]
    FingerprintMismatch { found: u64, expected: u64 },

    #[error("truncated file: {0}")]
    TruncatedFile(String),

    #[error("missing manifest in {}", .0.display())]
    MissingManifest(PathBuf),

    #[error("inconsistent shape in {}: {detail}", .path.display())]
    ShapeInconsistent { path: PathBuf, detail: String },

    #[error("parse error in {} at row {row}, column {col}: {detail}", .path.display())]
    ParseError {
        path: PathBuf,
        row: usize,
        col: usize,
        detail: String,
    },

    #[error("malformed input: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
