use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MechError {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParam { field: &'static str, reason: String },

    /// Not enough reported capacity to close the pod stopping rule or the
    /// baseline-only coverage condition.
    #[error("recruitment shortfall: {detail} (missing about {missing_kwh:.3} kWh of reported capacity)")]
    RecruitmentShortfall { missing_kwh: f64, detail: String },

    /// A pod postcondition was violated while pricing an agent.
    #[error("pod structure violated: {0}")]
    Structure(String),

    #[error("degenerate population: {0}")]
    Degenerate(String),

    #[error("draw u = {0} outside [0, 1]")]
    DrawOutOfRange(f64),

    #[error("agent {0} is not part of the population")]
    UnknownAgent(usize),
}

pub type Result<T> = std::result::Result<T, MechError>;

pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> MechError {
    MechError::InvalidParam {
        field,
        reason: reason.into(),
    }
}
