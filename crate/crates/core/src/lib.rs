//! Transformer blocks with configurable layer-normalization placement and
//! residual step scaling, plus numerical certificates for their stability.

pub mod attention;
pub mod cli;
pub mod control;
pub mod diagnostics;
pub mod error;
pub mod ffn;
pub mod gradcheck;
pub mod model;
pub mod normalization;
pub mod numerics;
pub mod report;
pub mod suites;
pub mod training;

pub use error::{Error, Result, Site};
pub use numerics::{Matrix, RngStream};
