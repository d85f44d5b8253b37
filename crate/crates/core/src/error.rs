use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // cohort ingestion / validation
    #[error("malformed row at {file}:{line}: {reason}")]
    MalformedRow {
        file: String,
        line: u64,
        reason: String,
    },
    #[error("unknown biomarker `{name}` at {file}:{line}")]
    UnknownBiomarker { name: String, file: String, line: u64 },
    #[error("unknown patient `{id}` at {file}:{line}")]
    UnknownPatient { id: String, file: String, line: u64 },
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("duplicate observation ({id}, day {day}, {biomarker})")]
    DuplicateObservation {
        id: String,
        day: u32,
        biomarker: String,
    },
    #[error("patient `{id}` has a {biomarker} value on day {day}, after its event on day {event_day}")]
    PostEventObservation {
        id: String,
        day: u32,
        biomarker: String,
        event_day: u32,
    },
    #[error("patient `{0}` has no observed biomarker value during follow-up")]
    EmptyHistory(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    // transforms
    #[error("need at least {needed} values to fit a transform, got {got}")]
    TooFewValues { needed: usize, got: usize },
    #[error("non-finite input value")]
    NonFiniteInput,
    #[error("design matrix is rank deficient; collinear columns: {}", .0.join(", "))]
    RankDeficient(Vec<String>),

    // mixed model
    #[error("stratum {stratum} has {got} patients, need at least {needed}")]
    InsufficientStratum {
        stratum: String,
        got: usize,
        needed: usize,
    },
    #[error("{what} did not converge after {iterations} iterations")]
    NonConvergence { what: String, iterations: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("observed covariance block is singular (condition number {condition:.3e})")]
    SingularObservedBlock { condition: f64 },
    #[error("covariance matrix is not positive definite")]
    SingularCovariance,

    // prediction
    #[error("every cell of the posterior has zero probability")]
    AllZeroPosterior,
    #[error("prediction precondition failed: {0}")]
    Precondition(String),

    // evaluation
    #[error("not enough expected events to form a calibration bin for {0}")]
    InsufficientEvents(String),
    #[error("model fit failed on fold {fold}: {source}")]
    FoldFitFailure {
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerical machinery (as opposed to bad input data).
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::RankDeficient(_)
            | Error::NonConvergence { .. }
            | Error::SingularObservedBlock { .. }
            | Error::SingularCovariance
            | Error::AllZeroPosterior => true,
            Error::FoldFitFailure { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
