use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("parameter outside open box: {0:?}")]
    ParameterOutsideBox(Vec<f64>),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("nan in coefficients: {0}")]
    NanCoefficient(String),

    #[error("quadrature failure after max refinement (partial value {partial}, error estimate {error})")]
    QuadratureFailure { partial: f64, error: f64 },

    #[error("domain exit: state {state} left the state space {context}")]
    DomainExit { state: f64, context: String },

    #[error("insufficient smoothness data: {0}")]
    InsufficientSmoothness(String),

    #[error("singular jacobian (condition number {condition:e}) at {iterate:?}")]
    SingularJacobian { condition: f64, iterate: Vec<f64> },

    #[error("no root found from {starts} start points")]
    NoRootFound { starts: usize },

    #[error("matrix not positive semidefinite (min eigenvalue {0:e})")]
    NotPositiveSemidefinite(f64),

    #[error("zero denominator: {0}")]
    ZeroDenominator(String),

    #[error("missing coordinate split for block variance")]
    MissingCoordSplit,

    #[error("empty grid")]
    EmptyGrid,

    #[error("nan in estimating function at observation {index}")]
    NanEstimatingFunction { index: usize },

    #[error("insufficient replications: {got} < {needed}")]
    InsufficientReplications { got: usize, needed: usize },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error at row {row}: {message}")]
    Data { row: usize, message: String },

    #[error("nonuniform grid at row {row}")]
    NonuniformGrid { row: usize },

    #[error("empty data")]
    EmptyData,

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    /// Configuration problems map to exit code 2 in the CLI, everything else to 1.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
