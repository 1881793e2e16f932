use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("singular derivative at xi = {xi}: {what}")]
    Singular { xi: f64, what: &'static str },

    #[error("division by zero: {0}")]
    DivisionByZero(String),

    #[error("invalid nonlinearity: {0}")]
    InvalidNonlinearity(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("resolution error: {0}")]
    Resolution(String),

    #[error("Newton iteration failed at t = {t} after {halvings} step halvings")]
    NewtonDivergence { t: f64, halvings: usize },

    #[error("nonnegativity violated at cell {cell} (value {value:e}) at t = {t}")]
    Nonnegativity { cell: usize, value: f64, t: f64 },

    #[error("time step collapsed below {dt_min:e} at t = {t}")]
    StepCollapse { t: f64, dt_min: f64 },

    #[error("conjugate gradient stagnated (slice {slice:?}, relative residual {residual:e})")]
    CgStagnation { slice: Option<usize>, residual: f64 },

    #[error("quadrature did not converge: {0}")]
    Quadrature(String),

    #[error("infeasible problem: {0}")]
    Infeasible(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of the numerical schemes themselves (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NewtonDivergence { .. }
                | Error::Nonnegativity { .. }
                | Error::StepCollapse { .. }
                | Error::CgStagnation { .. }
                | Error::Quadrature(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
