use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("signal too short: {len} samples for window {window}")]
    SignalTooShort { len: usize, window: usize },

    #[error("invalid window {0}: must be odd and positive")]
    InvalidWindow(usize),

    #[error("nominal capacity must be positive, got {0}")]
    NonPositiveCapacity(f64),

    #[error("degenerate curve: {distinct} distinct Q values, need at least 2")]
    DegenerateCurve { distinct: usize },

    #[error("insufficient cycles for cell {cell_id}: have {have}, need {need}")]
    InsufficientCycles { cell_id: String, have: usize, need: usize },

    #[error("cycle {cycle}: {source}")]
    AtCycle {
        cycle: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("ground-truth value at index {index} is zero")]
    ZeroTruth { index: usize },

    #[error("design matrix is rank deficient")]
    RankDeficient,

    #[error("data is not zero-centered: {0}")]
    NotCentered(String),

    #[error(
        "non-finite loss at epoch {epoch}, step {step} (intra {intra}, inter {inter})"
    )]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        intra: f64,
        inter: f64,
    },

    #[error("need at least {need} cells, have {have}")]
    TooFewCells { need: usize, have: usize },

    #[error("geometry mismatch: {0}")]
    Geometry(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("synthetic generation failed: {0}")]
    Synthesis(String),

    #[error("split: {0}")]
    Split(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Attaches the offending path to an I/O error.
    pub fn file(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
        move |source| Error::File {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn at_cycle(cycle: usize, source: Error) -> Self {
        Error::AtCycle {
            cycle,
            source: Box::new(source),
        }
    }

    /// Short stable identifier used in single-line CLI error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::SignalTooShort { .. } => "signal_too_short",
            Error::InvalidWindow(_) => "invalid_window",
            Error::NonPositiveCapacity(_) => "non_positive_capacity",
            Error::DegenerateCurve { .. } => "degenerate_curve",
            Error::InsufficientCycles { .. } => "insufficient_cycles",
            Error::AtCycle { source, .. } => source.kind(),
            Error::Shape(_) => "shape",
            Error::NotScalar(_) => "not_scalar",
            Error::Config(_) => "config",
            Error::Empty(_) => "empty",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::ZeroTruth { .. } => "zero_truth",
            Error::RankDeficient => "rank_deficient",
            Error::NotCentered(_) => "not_centered",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::TooFewCells { .. } => "too_few_cells",
            Error::Geometry(_) => "geometry",
            Error::Parse { .. } => "parse",
            Error::Checkpoint(_) => "checkpoint",
            Error::Synthesis(_) => "synthesis",
            Error::Split(_) => "split",
            Error::Io(_) | Error::File { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
