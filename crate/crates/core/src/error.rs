use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {what} expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("non-finite state at rollout index {index}")]
    Overflow { index: usize },
    #[error("non-finite evaluation: {0}")]
    NonFinite(String),
    #[error("Riccati iteration did not converge within {iterations} iterations (last difference {difference:e})")]
    NoConvergence { iterations: usize, difference: f64 },
    #[error("closed-loop spectral radius {radius} is not below one; pair is not stabilizable")]
    NotStabilizable { radius: f64 },
    #[error("singular matrix in {0}")]
    Singular(&'static str),
    #[error("state is outside the terminal set (terminal cost {cost} > level {level})")]
    OutsideTerminalSet { cost: f64, level: f64 },
    #[error("terminal design failed: {0}")]
    Design(String),
    #[error("oracle tractability guard violated: {0}")]
    Tractability(String),
    #[error("no admissible initial warm-start: {0}")]
    Initialization(String),
    #[error("controller step {step} failed: {reason}")]
    StepFailure { step: usize, reason: String },
    #[error("quadratic subproblem failed: {0}")]
    Qp(String),
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}
