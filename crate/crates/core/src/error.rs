use thiserror::Error;

/// Every failure the library reports. Times are in ns.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("cutoff carrier: group velocity is zero at the carrier wavenumber")]
    CutoffCarrier,

    #[error("photon too broadband for this link: amplitude at the band edge is {edge_ratio:.3e} of peak")]
    BandEdge { edge_ratio: f64 },

    #[error("infeasible pulse: |q|^2 = {population:.3e} at t = {time:.4} ns")]
    InfeasiblePulse { time: f64, population: f64 },

    #[error("sigma-dot denominator vanishes at t = {time:.4} ns")]
    DenominatorVanishes { time: f64 },

    #[error(
        "control amplitude {magnitude:.4} rad/ns exceeds the configured bound at t = {time:.4} ns"
    )]
    ControlBound { time: f64, magnitude: f64 },

    #[error("integration failure: non-finite amplitude at t = {time:.4} ns")]
    IntegrationFailure { time: f64 },

    #[error("mode amplitudes were not recorded near t = {time:.4} ns")]
    ModesNotRecorded { time: f64 },

    #[error("insufficient data: {available} unmasked samples, need at least {required}")]
    InsufficientData { available: usize, required: usize },

    #[error("zero-norm input")]
    ZeroNorm,

    #[error("internal consistency failure: {0}")]
    Consistency(String),

    #[error("control window is not symmetric about t = 0 (t0 = {start:.6}, t1 = {end:.6})")]
    AsymmetricWindow { start: f64, end: f64 },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),
}

impl Error {
    /// True for errors caused by bad input rather than numerical trouble.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::CutoffCarrier
                | Error::AsymmetricWindow { .. }
                | Error::GridMismatch(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
