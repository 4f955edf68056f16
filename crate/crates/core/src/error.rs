use std::io;

use thiserror::Error;

use crate::tensor::Shape5;

#[derive(Debug, Error)]
pub enum Error {
    #[error("element count of shape {0:?} overflows usize")]
    Size([usize; 5]),

    #[error("invalid shape {0:?}: every extent must be at least 1")]
    EmptyExtent([usize; 5]),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: Shape5, got: Shape5 },

    #[error("length mismatch for {what}: expected {expected}, got {got}")]
    Length {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid partition: {0}")]
    Partition(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("volume has {slices} slices, at least {required} are required")]
    TooThin { slices: usize, required: usize },

    #[error("composition error: {0}")]
    Composition(String),

    #[error("unsupported format (field `{field}`): {detail}")]
    UnsupportedFormat { field: String, detail: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
