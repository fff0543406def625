use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("slip {0} is outside [0, 1]")]
    SlipOutOfRange(f64),

    #[error("invalid road surface `{name}`: {reason}")]
    InvalidSurface { name: String, reason: String },

    #[error("surface `{0}` has no friction peak (theta1 * theta2 <= theta3)")]
    NoPeak(String),

    #[error("unknown surface `{0}`")]
    UnknownSurface(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("actuator delay {delay} s is not an integer multiple of dt = {dt} s")]
    MisalignedDelay { delay: f64, dt: f64 },

    #[error("vehicle stopped (v = {0} m/s)")]
    VehicleStopped(f64),

    #[error("numerical fault at t = {time} s: {detail}")]
    NumericalFault { time: f64, detail: String },

    #[error("relay experiment did not converge to a limit cycle")]
    NotConverged,

    #[error("torque {theta} N*m is outside the open interval ({min}, {max})")]
    OutsideBarrier { theta: f64, min: f64, max: f64 },

    #[error("expected {expected} entries, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("all memberships are zero")]
    NoMembership,

    #[error("configuration error: {0}")]
    Config(String),
}

impl Error {
    /// True for faults raised by the integrator rather than by bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NumericalFault { .. })
    }
}
