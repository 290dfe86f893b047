use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error at line {line}: {msg}")]
    ConfigParse { line: usize, msg: String },

    #[error("invalid config field `{field}`: {msg}")]
    ConfigInvalid { field: String, msg: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("selection error: {0}")]
    Selection(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("non-finite loss at iteration {iteration}: component `{component}` = {value}")]
    NonFinite {
        iteration: u64,
        component: String,
        value: f64,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("failed to load {path}: {msg}")]
    Load { path: PathBuf, msg: String },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
