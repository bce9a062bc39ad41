use thiserror::Error;

/// Errors surfaced by the simulation, estimation and solver layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("processes live on different ensembles")]
    EnsembleMismatch,

    #[error("quadrature did not converge: {0}")]
    Quadrature(String),

    #[error("value {value} outside the range of the transform (minimum {min})")]
    OutOfRange { value: f64, min: f64 },

    #[error("inner fixed point did not converge at step {step} (last delta {delta:.3e})")]
    FixedPoint { step: usize, delta: f64 },

    #[error("saturated recursion unstable at step {step}: coefficient {coeff:.3e}")]
    RecursionBlowUp { step: usize, coeff: f64 },

    #[error("terminal condition fails the measurability probe at the stop node")]
    NotStopMeasurable,

    #[error("missing certificate: {0}")]
    MissingCertificate(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed field file: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
