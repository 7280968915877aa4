use thiserror::Error;

/// Everything that can go wrong inside the workbench.
///
/// The variants are grouped by the exit code the CLI maps them to; see
/// [`Error::exit_code`].
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Error {
    #[error("letter {letter} at coordinate {pos} is not below base {base}")]
    InvalidLetter { letter: u8, pos: usize, base: u8 },
    #[error("depth {asked} is smaller than the clopen depth {needed}")]
    DepthTooSmall { asked: usize, needed: usize },
    #[error("parse error: {0}")]
    Parse(String),

    #[error("return times not found below bound {0}")]
    NonMinimalTimeout(u64),
    #[error("clopen is not a union of atoms: {0}")]
    NotCompatible(String),
    #[error("points lie in the same orbit (offset {0})")]
    SameOrbitDetected(i64),
    #[error("no matching extends the element: {0}")]
    NoMatching(String),
    #[error("fragment is not orbit-coherent: {0}")]
    IncoherentFragment(String),
    #[error("no witness for join: {0}")]
    NoWitness(String),
    #[error("not an automorphism: {0}")]
    NotAutomorphism(String),
    #[error("set-aside atoms exhausted: {0}")]
    ChoiceExhausted(String),

    #[error("hypothesis violated: {0}")]
    HypothesisViolated(String),
    #[error("hypothesis failed on pair {u} / {v}")]
    HypothesisFailed { u: String, v: String },

    #[error("horizon exceeded: {0}")]
    HorizonExceeded(String),
    #[error("cancelled")]
    Cancelled,
}

impl Error {
    /// 0 ok, 1 verification failure, 2 parse, 3 hypothesis, 4 horizon.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidLetter { .. } | Error::DepthTooSmall { .. } | Error::Parse(_) => 2,
            Error::HypothesisViolated(_) | Error::HypothesisFailed { .. } | Error::SameOrbitDetected(_) => 3,
            Error::HorizonExceeded(_) | Error::NonMinimalTimeout(_) | Error::Cancelled => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
