//! Discrete-time simulator and policy laboratory for general-topology
//! quantum switches.
//!
//! A switch owns `L` links; link `l` buffers up to `B` link-level
//! entanglements (LLEs) that decay with per-slot probability `d_l`. Request
//! type `r` consumes one LLE from every link in its set and succeeds with
//! probability `gamma_r`. Each slot runs in a fixed order: LLE arrivals
//! (capped at the buffer), schedule selection against the post-arrival
//! counts, fusion successes and queue updates, then decoherence of the
//! unconsumed LLEs.
//!
//! The crate is organised around that loop:
//!
//! * [`model`] owns topologies, schedules, arrival processes, and config
//!   ingestion.
//! * [`dynamics`] is the authoritative slot update: simulation, exact
//!   transition matrices, and trace export.
//! * [`mdp`] solves the average-reward control problem on the LLE state
//!   space (relative value iteration, policy iteration, stationary
//!   analysis).
//! * [`schedulers`] hosts the runnable policies: MaxWeight, the
//!   re-solving MDP policy, priority, static randomized tables, and the
//!   idle policy.
//! * [`capacity`] decides throughput feasibility with an occupation-measure
//!   linear program and cross-checks it against the solver in [`mdp`].
//! * [`analysis`] covers contraction/mixing certificates, fluid-limit
//!   integration, and drift statistics.
//!
//! Everything stochastic draws from counter-based named streams
//! ([`rng`]), so a master seed pins every trace bit-for-bit and policy
//! changes never perturb arrival realizations.

pub mod analysis;
pub mod capacity;
pub mod dynamics;
pub mod error;
pub mod mdp;
pub mod model;
pub mod rng;
pub mod schedulers;

mod simplex;

pub use error::{Error, Result};

/// Hard cap on the number of decision states (LLE configurations times
/// arrival phases) accepted by dense matrix construction and the MDP/LP
/// solvers. Simulation itself has no such cap.
pub const DEFAULT_STATE_CAP: usize = 4096;

/// Hard cap on the size of the schedule action set (the batch box).
pub const SCHEDULE_SET_CAP: usize = 4096;
