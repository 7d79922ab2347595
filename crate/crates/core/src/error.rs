use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("sequence too long for frames: {labels} labels but only {frames} frames")]
    SequenceTooLong { labels: usize, frames: usize },

    #[error("invalid alignment: {0}")]
    InvalidAlignment(String),

    #[error("alignment exceeds frames: last spike {last_spike} > {frames} frames")]
    AlignmentExceedsFrames { last_spike: usize, frames: usize },

    #[error("empty signal")]
    EmptySignal,

    #[error("degenerate transition: t must be > 0")]
    DegenerateTransition,

    #[error("t = {0} outside [0, 1]")]
    TimeOutOfRange(f64),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("nothing to generate")]
    NothingToGenerate,

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("requires stage: {0}")]
    MissingPrerequisite(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("corrupt tensor file: {0}")]
    CorruptTensor(String),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image encoding: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::MissingPrerequisite(_) => 3,
            Error::Numerical(_) => 4,
            Error::Config(_) | Error::Json(_) => 2,
            _ => 1,
        }
    }
}
