use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Residuals reported when a QP solve stops early.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub complementarity: f64,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid value for `{field}`: {reason}")]
    Validation { field: &'static str, reason: String },

    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: &'static str, reason: String },

    #[error("singular linearization point at turbine {turbine}: {reason}")]
    SingularPoint { turbine: usize, reason: String },

    #[error("plant state is not initialized; call warm_start first")]
    Uninitialized,

    #[error("plant did not reach steady state within {samples} samples")]
    SteadyStateNotReached { samples: usize },

    #[error("subsystem {turbine} needs {required} states, budget is {budget}")]
    StateBudget {
        turbine: usize,
        required: usize,
        budget: usize,
    },

    #[error("prediction operators need {required} bytes, budget is {budget}")]
    PredictionBudget { required: usize, budget: usize },

    #[error("wake delay between turbines {upstream} and {downstream} must grow by at least one sample per column")]
    DelayResolution { upstream: usize, downstream: usize },

    #[error("missing upstream state for subsystem {0}")]
    MissingUpstream(usize),

    #[error("infeasible QP: {0}")]
    Infeasible(String),

    #[error("QP solver hit its iteration cap ({iterations}) with residuals {residuals:?}")]
    NotConverged {
        iterations: usize,
        residuals: KktResiduals,
    },

    #[error("subproblem {subproblem}: {source}")]
    Subproblem {
        subproblem: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("reference window has {got} samples, {needed} needed")]
    ReferenceTooShort { got: usize, needed: usize },

    #[error("reference file line {line}: {reason}")]
    Ingestion { line: usize, reason: String },

    #[error("centralized problem of {size} variables exceeds cap {cap}; use a smaller farm or horizon, or raise `oracle_cap`")]
    OracleCap { size: usize, cap: usize },

    #[error("{module} failed at sample {sample}: {source}")]
    Simulation {
        module: &'static str,
        sample: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn validation(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Validation {
            field,
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Validation { .. }
            | Error::Parameter { .. }
            | Error::Config(_)
            | Error::Ingestion { .. }
            | Error::OracleCap { .. }
            | Error::DelayResolution { .. } => true,
            Error::Simulation { source, .. } | Error::Subproblem { source, .. } => {
                source.is_validation()
            }
            _ => false,
        }
    }
}
