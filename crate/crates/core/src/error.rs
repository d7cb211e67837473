//! Error taxonomy shared by every module. Variants map onto the CLI's exit
//! code categories (config / data / numeric / deadlock).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes; names both sides.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Invalid configuration (divisibility, ranges, ratio sums, ...).
    #[error("config error: {0}")]
    Config(String),

    /// Non-finite values or other numeric breakdowns.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An index outside its table/grid; names the offending cell.
    #[error("index error: {what} index {index} out of range {len} at cell {cell}")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
        cell: usize,
    },

    /// Loss over an empty set of positions.
    #[error("empty loss: every position was ignored")]
    EmptyLoss,

    /// Usage statistics queried before any quantization happened.
    #[error("empty stats: no vectors quantized since the last reset")]
    EmptyStats,

    /// Regions of the coarse grid left uncovered (or covered inconsistently).
    #[error("coverage error: {detail}; offending regions {regions:?}")]
    Coverage {
        detail: String,
        regions: Vec<usize>,
    },

    /// The same position emitted twice within one granularity segment.
    #[error("duplicate position {position} in granularity segment {grain}")]
    DuplicatePosition { grain: usize, position: usize },

    /// A region touched by two different granularities.
    #[error("region {region} covered by both granularity {first} and {second}")]
    RegionConflict {
        region: usize,
        first: usize,
        second: usize,
    },

    /// Malformed token segment (missing sos/eos, pad in body, ...).
    #[error("sequence structure error in segment {grain}: {detail}")]
    Structure { grain: usize, detail: String },

    /// A segment outgrew its padded length.
    #[error("segment {grain} length {natural} exceeds pad_to {pad_to}")]
    Length {
        grain: usize,
        natural: usize,
        pad_to: usize,
    },

    /// The function handed to the finite-difference oracle was not
    /// deterministic (two baseline evaluations disagreed).
    #[error("determinism error: two baseline evaluations of f disagree")]
    Determinism,

    /// The sampler has no legal token left to emit.
    #[error("generation deadlock: {0}")]
    Deadlock(String),

    /// Dataset / file problems.
    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
