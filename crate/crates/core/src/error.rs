use std::fmt;

use thiserror::Error;

/// Normalization or sublayer site inside a block, used to tag errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Site {
    AttnIn,
    AttnOut,
    FfnIn,
    FfnOut,
    Attention,
    Ffn,
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Site::AttnIn => "attn-in",
            Site::AttnOut => "attn-out",
            Site::FfnIn => "ffn-in",
            Site::FfnOut => "ffn-out",
            Site::Attention => "attention",
            Site::Ffn => "ffn",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch, left is {left:?}, right is {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },

    #[error("{op}: {reason}")]
    Undefined { op: &'static str, reason: String },

    #[error("power iteration did not converge after {iterations} iterations (last estimate {last})")]
    NoConvergence { iterations: usize, last: f64 },

    #[error("degenerate normalization input at token {token}: zero spread with epsilon = 0")]
    DegenerateNorm { token: usize },

    #[error("gamma entry {index} is zero; the ellipsoid metric needs nonzero gamma")]
    ZeroGamma { index: usize },

    #[error("zero adjoint column {column}")]
    ZeroAdjoint { column: usize },

    #[error("index {index} out of range for {what} of size {len}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("relu pre-activation is exactly zero at token {token}, unit {unit}; derivative undefined (use tanh)")]
    ReluKink { token: usize, unit: usize },

    #[error("block {block}, site {site}: {source}")]
    Block {
        block: usize,
        site: Site,
        #[source]
        source: Box<Error>,
    },

    #[error("hidden state became non-finite at block {block}")]
    Divergence { block: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn at(self, block: usize, site: Site) -> Error {
        Error::Block {
            block,
            site,
            source: Box::new(self),
        }
    }

    pub(crate) fn undefined(op: &'static str, reason: impl Into<String>) -> Error {
        Error::Undefined {
            op,
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
