use thiserror::Error;

/// Errors surfaced by the simulation and optimisation layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("volatility matrix rank-deficient: smallest/largest singular value {ratio:.3e} below {tol:.1e}")]
    RankDeficient { ratio: f64, tol: f64 },

    #[error("simulation failure at path {path}, step {step}: {reason}")]
    SimulationFailure {
        path: usize,
        step: usize,
        reason: String,
    },

    #[error("valuation failed: non-finite utility on {count} paths (first: {first})")]
    Valuation { count: usize, first: usize },

    #[error("regression basis failure: {0}")]
    Basis(String),

    #[error("non-finite moment: {0}")]
    Moment(String),

    #[error(
        "terminal value outside the utility range on {fraction:.3} of paths (allowed {allowed:.3})"
    )]
    UtilityRange { fraction: f64, allowed: f64 },

    #[error("no feasible candidate found; best constraint violation {violation:.4e}")]
    Infeasible { violation: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;
