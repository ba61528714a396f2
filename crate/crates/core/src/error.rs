use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// A configuration value violates its invariant. `name` is the field name.
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("beam index {index} out of range for a {count}-beam set")]
    InvalidBeam { index: usize, count: usize },

    /// The user equipment coincides with the base station.
    #[error("degenerate geometry: UE at the base station position")]
    DegenerateGeometry,

    /// The analytic gain derivative is undefined because sin(psi) vanishes.
    #[error("singular steering direction for beam {beam} (|sin psi| = {sin_psi:e})")]
    SingularDirection { beam: usize, sin_psi: f64 },

    /// Not enough detected beams to form a position estimate.
    #[error("unlocalizable observation: {detected} detected beam(s), need at least {required}")]
    Unlocalizable { detected: usize, required: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),
}

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
