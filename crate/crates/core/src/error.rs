use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlexError {
    #[error("malformed matrix `{section}` at line {line}: {detail}")]
    MalformedMatrix {
        section: String,
        line: usize,
        detail: String,
    },

    #[error("required section `{0}` is missing from the case file")]
    MissingSection(String),

    #[error("invalid case: {0}")]
    InvalidCase(String),

    #[error("network is not radial: {reason} (buses {buses:?})")]
    NotRadial { reason: String, buses: Vec<usize> },

    #[error("network has no leaf bus to host a DER")]
    NoLeaf,

    #[error("matrix is singular (pivot {pivot:e} below {threshold:e})")]
    Singular { pivot: f64, threshold: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence {
        iterations: usize,
        residual: f64,
        best: Option<[f64; 2]>,
    },

    /// `rows` are the conflicting inequality rows, the violated one first.
    #[error("quadratic program is infeasible: {detail}")]
    Infeasible { detail: String, rows: Vec<usize> },

    #[error("quadratic program is unbounded")]
    Unbounded,

    #[error("flexibility region is empty")]
    EmptyRegion,

    #[error("polygon is degenerate (area {0:e})")]
    DegeneratePolygon(f64),

    #[error("fixed-point loop stalled after {iterations} iterations (last change {last_change:e})")]
    FixedPointStall { iterations: usize, last_change: f64 },

    #[error("{0}")]
    Config(String),

    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, FlexError>;
