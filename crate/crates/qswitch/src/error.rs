//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Topology or arrival specification violates a model invariant.
    #[error("invalid model: {0}")]
    InvalidModel(String),

    /// Config file could not be read or parsed.
    #[error("config error: {0}")]
    Config(String),

    /// A scheduler returned a schedule that is not feasible for the
    /// post-arrival LLE counts it was offered.
    #[error("infeasible schedule at slot {slot}: {detail}")]
    InfeasibleSchedule { slot: u64, detail: String },

    /// Dense state-space construction would exceed the configured cap.
    #[error("state space has {size} states, exceeding the cap of {cap}")]
    StateSpaceTooLarge { size: usize, cap: usize },

    /// The schedule box is too large to enumerate.
    #[error("schedule set has {size} elements, exceeding the cap of {cap}")]
    ScheduleSetTooLarge { size: usize, cap: usize },

    /// An operation that needs a time-homogeneous chain was given
    /// deterministic-periodic arrivals with period > 1.
    #[error("{op} requires i.i.d. arrivals; link streams have period {period}")]
    PeriodicArrivals { op: &'static str, period: usize },

    /// Iterative solver hit its sweep cap before reaching tolerance.
    #[error("solver stopped after {sweeps} sweeps with residual {residual:e} (tolerance {tolerance:e})")]
    SolverStalled {
        sweeps: usize,
        residual: f64,
        tolerance: f64,
    },

    /// A matrix expected to be row-stochastic is not.
    #[error("row {row} is not a probability distribution (sum {sum})")]
    NotStochastic { row: usize, sum: f64 },

    /// Linear program was infeasible or unbounded when a finite optimum
    /// was required.
    #[error("linear program: {0}")]
    Lp(String),

    /// Fluid integrator detected too-coarse a step: halving the step
    /// moved the trajectory by more than the tolerance.
    #[error("fluid step too coarse: halving dt moved the trajectory by {disagreement:e} (tolerance {tolerance:e})")]
    DtTooCoarse { disagreement: f64, tolerance: f64 },

    /// Generic numeric failure (singular linear system, NaN, ...).
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A scheduler's internal machinery (e.g. its solver) failed while
    /// choosing a schedule.
    #[error("scheduler failed at slot {slot}: {source}")]
    Scheduler {
        slot: u64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
