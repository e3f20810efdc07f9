use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: expected {expected} columns, found {found}")]
    InconsistentColumns {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: cannot parse token {token:?}")]
    BadToken { line: usize, token: String },
    #[error("line {line}: coordinates are 1-based, found {value}")]
    ZeroCoordinate { line: usize, value: i64 },
    #[error("no data lines in tensor input")]
    EmptyInput,
    #[error("mode {mode}: coordinate {coord} out of range for length {dim}")]
    CoordinateOutOfRange { mode: usize, coord: u64, dim: u64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid layout: {0}")]
    Layout(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("matrix is singular even after maximal regularization shift")]
    Singular,
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported container version {0}")]
    Version(u16),
    #[error("truncated payload")]
    Truncated,
    #[error("corrupt container: {0}")]
    Corrupt(String),
    #[error("lane {lane} outside tile of {tile} lanes")]
    LaneOutOfRange { lane: usize, tile: usize },
    #[error("lane {lane} is targeted twice")]
    LaneConflict { lane: usize },
    #[error("work-group {workgroup} panicked: {message}")]
    KernelPanic { workgroup: usize, message: String },
    #[error("block {block} needs {bytes} bytes but queue reservation is {reservation}")]
    BlockExceedsReservation {
        block: usize,
        bytes: u64,
        reservation: u64,
    },
    #[error("device budget too small: {0}")]
    Budget(String),
    #[error("CP-ALS diverged at iteration {iteration} (fit history {history:?})")]
    Diverged { iteration: usize, history: Vec<f64> },
    #[error("tensor has zero norm")]
    ZeroNorm,
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Truncated reads surface as `UnexpectedEof` from the reader.
    pub(crate) fn from_read(err: io::Error) -> Self {
        if err.kind() == io::ErrorKind::UnexpectedEof {
            Error::Truncated
        } else {
            Error::Io(err)
        }
    }
}
