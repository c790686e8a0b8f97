use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum TccError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("degenerate model: {0}")]
    Degenerate(String),

    #[error("undefined value: {0}")]
    Undefined(String),

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("bad magic in {path}: expected {expected:?}, found {found:?}")]
    BadMagic {
        path: String,
        expected: [u8; 4],
        found: [u8; 4],
    },

    #[error("unsupported format version {found} in {path} (expected {expected})")]
    Version { path: String, expected: u32, found: u32 },

    #[error("truncated file {path}: {detail}")]
    Truncated { path: String, detail: String },

    #[error("size overflow in {path}: {rows} x {cols} elements")]
    SizeOverflow { path: String, rows: u64, cols: u64 },

    #[error("invalid manifest {path}: {detail}")]
    Manifest { path: String, detail: String },

    #[error("missing annotation for sequence {0}")]
    MissingAnnotation(String),

    #[error("unknown sequence id {0}")]
    UnknownSequence(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TccError>;

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($fmt:tt)+) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err($crate::error::TccError::$variant(format!($($fmt)+)));
        }
    };
}
pub(crate) use ensure;
