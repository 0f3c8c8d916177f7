use thiserror::Error;

/// Errors raised by the simulation library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum FlowError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("singular field evaluated at the origin; use a regularized field there")]
    Singularity,
    #[error("stereographic projection evaluated at the north pole")]
    ProjectionPole,
    #[error("non-finite value in an integration stage")]
    NumericalOverflow,
    #[error("step size {dt:e} fell below the floor at t = {t} (|x| = {radius:e})")]
    Stiffness { t: f64, dt: f64, radius: f64 },
    #[error("crossing bracket does not contain level {level:e}")]
    Bracket { level: f64 },
    #[error("trajectory did not reach |x| = {nu:e} before t = {t_max}")]
    NoEntry { nu: f64, t_max: f64 },
    #[error("trajectory still inside the regularization ball after {retries} delay doublings")]
    TrappedInBall { retries: u32 },
    #[error("invalid escape sampler: {0}")]
    InvalidSampler(String),
    #[error("zero-norm sample cannot be pulled back")]
    SingularSample,
    #[error("radial component {value} fell below the lower bound {bound} along the backward orbit")]
    BoundViolation { value: f64, bound: f64 },
    #[error("trajectory did not decay to the stop radius (not in a focusing domain)")]
    NotFocusing,
    #[error("all histogram mass fell outside the grid")]
    EmptyHistogram,
    #[error("histogram grids do not match")]
    GridMismatch,
    #[error("{failed} of {total} trajectories failed (limit 1%): first error: {first}")]
    EnsembleFailure {
        failed: usize,
        total: usize,
        first: String,
    },
}

pub type Result<T> = std::result::Result<T, FlowError>;
