// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("symbol {symbol} outside alphabet of size {basis}")]
    InvalidSymbol { symbol: usize, basis: usize },

    #[error("invalid task spec `{0}`: expected N<basis>T<delay>[-S|-R]")]
    InvalidTaskSpec(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("series length {length} shorter than window {window}")]
    SeriesTooShort { length: usize, window: usize },

    #[error("state space of {states} states exceeds cap {cap}")]
    StateSpaceTooLarge { states: u128, cap: u64 },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
