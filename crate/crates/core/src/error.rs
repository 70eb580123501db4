//! Error taxonomy shared across the pipeline.
//!
//! Variants map one-to-one onto the CLI exit codes: usage problems (64),
//! identifiability (2), fit failure (3), I/O and malformed input (4).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MarsError {
    /// Invalid argument or flag value; the caller misused an interface.
    #[error("usage: {0}")]
    Usage(String),

    /// A record in a telemetry file could not be decoded.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A record decoded but violates a schema invariant.
    #[error("invalid telemetry{}: {msg}", fmt_line(.line))]
    Validation { line: Option<usize>, msg: String },

    /// The dataset cannot pin down the law along the named axis.
    #[error("unidentifiable fit: {axis} needs more distinct values ({detail})")]
    Identifiability { axis: String, detail: String },

    /// Every optimizer start diverged or was rejected.
    #[error("fit failed: {0}")]
    FitFailure(String),

    /// A prediction or intermediate left the finite range.
    #[error("numeric range: {0}")]
    NumericRange(String),

    /// Two artifacts that must describe the same experiment disagree.
    #[error("mismatch: {0}")]
    Mismatch(String),

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    /// A guaranteed-impossible state was reached; always a bug.
    #[error("internal invariant violated: {0}")]
    Internal(String),
}

fn fmt_line(line: &Option<usize>) -> String {
    match line {
        Some(n) => format!(" at line {n}"),
        None => String::new(),
    }
}

pub type Result<T> = std::result::Result<T, MarsError>;

impl MarsError {
    /// Exit code for the CLI: 0 success, 2 identifiability/mismatch,
    /// 3 fit failure, 4 I/O or bad input, 64 usage.
    pub fn exit_code(&self) -> i32 {
        match self {
            MarsError::Usage(_) => 64,
            MarsError::Identifiability { .. } | MarsError::Mismatch(_) => 2,
            MarsError::FitFailure(_) | MarsError::NumericRange(_) => 3,
            MarsError::Parse { .. } | MarsError::Validation { .. } | MarsError::Io(_) => 4,
            MarsError::Internal(_) => 70,
        }
    }
}
