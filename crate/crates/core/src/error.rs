use thiserror::Error;

/// Errors raised by the simulation, estimation and optimisation routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value where a finite one is required: {0}")]
    NonFinite(f64),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("control breakpoints do not cover [0, {horizon}]")]
    ControlCoverage { horizon: f64 },

    #[error("time step {dt} exceeds the positivity bound {max_dt}")]
    CflViolation { dt: f64, max_dt: f64 },

    #[error("density became negative ({min:e}) beyond round-off tolerance")]
    Negativity { min: f64 },

    #[error("density is not normalised (mass {mass})")]
    Unnormalised { mass: f64 },

    #[error("Hessian could not be made positive definite (last shift {shift:e})")]
    SingularHessian { shift: f64 },

    #[error("empty measure")]
    EmptyMeasure,
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for errors caused by bad user input rather than numerical failure.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::InvalidParameter(_)
                | Error::ControlCoverage { .. }
                | Error::CflViolation { .. }
                | Error::DimensionMismatch { .. }
                | Error::EmptyMeasure
        )
    }
}
