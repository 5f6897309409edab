use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("high-resolution grid does not cover band {band} ({center:.3} nm): need [{need_lo:.3}, {need_hi:.3}] nm")]
    InsufficientCoverage {
        band: usize,
        center: f64,
        need_lo: f64,
        need_hi: f64,
    },

    #[error("viewing or illumination angle too oblique: cos = {cos:.4}")]
    GrazingAngle { cos: f64 },

    #[error("rank-deficient design matrix: monomial {monomial} (input `{input}`) is degenerate")]
    RankDeficient { monomial: usize, input: String },

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },

    #[error("ancillary layers required in as-input mode")]
    MissingAncillary,

    #[error("operation not available in {0} mode")]
    WrongMode(&'static str),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
