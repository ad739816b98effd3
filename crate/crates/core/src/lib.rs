//! Tiny deep-learning compiler and runtime toolkit.
//!
//! The crate covers the full path from a model description to a deployable
//! artifact for memory-constrained targets:
//!
//! * [`qtensor`] — int8/fp32 tensor types, scale computation, requantization.
//! * [`ir`] — the layer-graph intermediate representation, model file format,
//!   backbone generators and FLOPs/parameter accounting.
//! * [`engine`] — reference fp32 executor and the bit-exact int8 executor
//!   (im2col tiling, in-place depthwise convolution).
//! * [`memplan`] — analytic memory profiling, im2col budgeting and buffer
//!   lifetime allocation.
//! * [`patch`] — patch-based inference: receptive-field backtracing, plan
//!   construction, bit-exact patched execution and (p, n) search.
//! * [`tte`] — compile-time differentiation, backward-graph pruning, operator
//!   reordering, quantization-aware gradient scaling and quantized SGD.
//! * [`update_search`] — contribution analysis and evolutionary search for
//!   memory-constrained sparse-update schemes.
//! * [`arch_search`] — search-space ranking by FLOPs statistics and joint
//!   architecture/scheduling evolution.
//! * [`codegen`] — emission of freestanding C99 inference sources.
//! * [`data`] — IDX dataset loading and seeded synthetic task generation.

pub mod arch_search;
pub mod cli;
pub mod codegen;
pub mod data;
pub mod engine;
pub mod ir;
pub mod memplan;
pub mod patch;
pub mod qtensor;
pub mod tte;
pub mod update_search;

use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A tensor or graph structural invariant was violated.
    #[error("invalid: {0}")]
    Invalid(String),
    /// Shape mismatch between tensors or graph nodes.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// A requested plan or search has no feasible solution.
    #[error("infeasible: {0}")]
    Infeasible(String),
    /// Malformed input document (model file, scheme, tensor dump, ...).
    #[error("parse error: {0}")]
    Parse(String),
    /// Filesystem-level failure.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
