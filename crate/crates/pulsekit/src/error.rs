use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("background cubic not monotone: kappa2 - kappa3 - kappa4 = {0} >= 0")]
    SignConditionViolated(f64),
    #[error("invalid config at {field}: {reason}")]
    ConfigInvalid { field: String, reason: String },
    #[error("blow-up at t = {time}")]
    BlowUp { time: f64 },
    #[error("no pulse found (peak deviation {peak:.3e})")]
    NoPulse { peak: f64 },
    #[error("no convergence after {iterations} iterations, residual {residual:.3e}")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("phase condition is singular")]
    SingularPhaseCondition,
    #[error("Arnoldi breakdown")]
    ArnoldiBreakdown,
    #[error("no finite critical wavenumber")]
    NoFiniteWavenumber,
    #[error("continuation dead end at parameter {param}")]
    DeadEnd { param: f64 },
    #[error("branch switch fell back onto the parent branch")]
    FellBack,
    #[error("tail too short: {found} oscillations resolved")]
    TailTooShort { found: usize },
    #[error("tau = {tau} outside (tau_c, 2 tau_c)")]
    TauOutOfRange { tau: f64 },
    #[error("no stable HIOP matches at epsilon = {epsilon}")]
    NoMatch { epsilon: f64 },
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code: 2 for configuration problems, 3 for numerical ones.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ConfigInvalid { .. } | Error::SignConditionViolated(_) | Error::MissingInput(_) => 2,
            Error::Io(_) | Error::Json(_) | Error::Csv(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
