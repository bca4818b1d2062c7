//! Error taxonomy shared by every module.

/// Everything that can go wrong in this crate.
#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("matrix is not positive semidefinite (lambda_min = {lambda_min:.6e}, tolerance = {tol:.6e})")]
    NotPsd { lambda_min: f64, tol: f64 },

    /// Spectrum fell below a floor that the requested operation needs
    /// (rank drop of Sigma0^{1/2} Sigma Sigma0^{1/2}, inverse square roots, ...).
    #[error("singular spectrum: lambda_min = {lambda_min:.6e} below floor {floor:.6e}")]
    Singularity { lambda_min: f64, floor: f64 },

    #[error("rank condition violated: {0}")]
    Rank(String),

    #[error("tau = {tau} exceeds the smallest selected eigenvalue {lambda_min}")]
    TauTooLarge { tau: f64, lambda_min: f64 },

    #[error("target spectrum is not distinct enough (minimal gap {gap:.6e}, tolerance {tol:.6e})")]
    NonDistinctSpectrum { gap: f64, tol: f64 },

    #[error("refusing subset enumeration for n = {n} > {limit}")]
    CombinatorialLimit { n: usize, limit: usize },

    #[error("parameter dimension {dim} exceeds the dense-assembly limit {limit}")]
    DimensionLimit { dim: usize, limit: usize },

    /// Modified deficiency margin is not positive; convergence certificates
    /// are unavailable from this initialization.
    #[error("modified deficiency margin failed: margin = {margin:.6e} <= 0")]
    MdmFailed { margin: f64 },

    #[error("divergence detected: loss {loss:.6e} exceeds {factor:.1}x the initial loss {initial:.6e}")]
    Divergence { loss: f64, initial: f64, factor: f64 },

    #[error("integrator step size underflow at t = {t:.6e} (h = {h:.6e})")]
    StepSizeUnderflow { t: f64, h: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("internal consistency check failed: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;
