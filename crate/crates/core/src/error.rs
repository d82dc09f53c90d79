use thiserror::Error;
use zoomloc_nn::NnError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("level {level} out of range (top level is {top})")]
    LevelOutOfRange { level: usize, top: usize },
    #[error("window {0} does not fit inside its level")]
    OutOfBounds(String),
    #[error("pyramid format error: {0}")]
    Format(String),
    #[error("memory budget exceeded: {needed} bytes > {budget}")]
    BudgetExceeded { needed: u64, budget: u64 },
    #[error("config error: {0}")]
    Config(String),
    #[error("no acceptable window after {0} draws")]
    ExhaustedRetries(usize),
    #[error("ambiguous match: best distances {0:e} and {1:e} tie")]
    AmbiguousMatch(f64, f64),
    #[error("data format error: {0}")]
    DataFormat(String),
    #[error("training diverged at iteration {0}: non-finite loss")]
    Diverged(u64),
    #[error("model spec error: {0}")]
    Spec(String),
    #[error("region {0} yields no tissue tiles")]
    EmptyRegion(String),
    #[error("patient {0} has no patches")]
    NoPatches(String),
    #[error("label fraction {0} outside (0, 1]")]
    FractionOutOfRange(f64),
    #[error("class {0} has no samples")]
    EmptyClass(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("value out of range: {0}")]
    OutOfRange(String),
    #[error("gradient check failed: {0}")]
    GradientCheck(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code: 1 configuration, 2 data, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Spec(_) | Error::FractionOutOfRange(_) => 1,
            Error::Diverged(_) | Error::GradientCheck(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
