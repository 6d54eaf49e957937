use thiserror::Error;

pub type Result<T, E = SimError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("workload does not parse: {0}")]
    Parse(#[from] serde_json::Error),

    #[error("primary file sets of {first} and {second} overlap on {path}")]
    OverlappingPrimaryFiles {
        first: String,
        second: String,
        path: String,
    },

    #[error("unknown content rule {0:?}")]
    UnknownContentRule(String),

    #[error("content rule {rule}: {message}")]
    BadRuleParams { rule: String, message: String },

    #[error("invalid workload: {0}")]
    Invalid(String),

    #[error("unknown strategy {0:?}")]
    UnknownStrategy(String),

    #[error("simulation did not finish within {0} ticks")]
    TickLimit(u64),

    #[error(transparent)]
    Core(#[from] cowork_core::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}
