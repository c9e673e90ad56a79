use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty population")]
    EmptyPopulation,

    #[error("index {index} out of range for {count} types")]
    IndexOutOfRange { index: usize, count: usize },

    #[error("ODE blow-up at t = {t}")]
    OdeBlowUp { t: f64 },

    #[error("eigenvalue computation failed")]
    Eigen,

    #[error("covariance is not positive semidefinite")]
    NotPsd,

    #[error("Riccati did not stabilize: {0}")]
    RiccatiNotStabilized(String),

    #[error("Riccati finite escape at t = {t}")]
    RiccatiEscape { t: f64 },

    #[error("consistency iteration diverged: {0}")]
    ConsistencyDiverged(String),

    #[error("steady state undefined: {0}")]
    SteadyStateUndefined(String),

    #[error("time {t} outside solved grid [{t0}, {t1}]")]
    OutsideGrid { t: f64, t0: f64, t1: f64 },

    #[error("entropy undefined (Dirac policy with lambda = 0)")]
    EntropyUndefined,

    #[error("quadrature restricted to m <= 2 (got m = {0})")]
    QuadratureDimension(usize),

    #[error("density overflow under perturbation")]
    DensityOverflow,

    #[error("non-finite state for agent {agent} at t = {t}")]
    NonFiniteState { agent: usize, t: f64 },

    #[error("horizon too short for rho: truncation bound {bound:e} exceeds tolerance {tol:e}")]
    HorizonTooShort { bound: f64, tol: f64 },

    #[error("{0} unidentifiable: degenerate regressors")]
    Unidentifiable(&'static str),

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Numerical failures map to CLI exit code 2; everything else is usage/IO.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::OdeBlowUp { .. }
                | Error::Eigen
                | Error::NotPsd
                | Error::RiccatiNotStabilized(_)
                | Error::RiccatiEscape { .. }
                | Error::ConsistencyDiverged(_)
                | Error::SteadyStateUndefined(_)
                | Error::NonFiniteState { .. }
                | Error::HorizonTooShort { .. }
                | Error::Unidentifiable(_)
                | Error::DensityOverflow
        )
    }
}
