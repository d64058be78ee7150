use thiserror::Error;

use crate::geometry::Mode;

/// Errors raised across the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("mode set is empty")]
    EmptyModeSet,

    #[error("mode set contains the origin (0,0)")]
    OriginMode,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("mode {mode} lies outside truncation N = {trunc}")]
    ModeOutsideTruncation { mode: Mode, trunc: usize },

    #[error("fields live on different grids (N = {left} vs N = {right})")]
    GridMismatch { left: usize, right: usize },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("non-finite state encountered at step {step}")]
    NonFinite { step: usize },

    #[error("interval [{s}, {t}] is not aligned with the trajectory (steps 0..={steps})")]
    Interval { s: usize, t: usize, steps: usize },

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("measures have unequal mass ({0} vs {1})")]
    UnequalMass(f64, f64),

    #[error("support size {size} exceeds cap {cap}; subsample the ensembles")]
    SupportCap { size: usize, cap: usize },

    #[error("budget exceeded: {0}")]
    Budget(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
