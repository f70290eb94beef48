//! One-slot dynamics, simulation, and exact transition matrices.
//!
//! The slot order is fixed and shared by the simulator and every exact
//! kernel in the crate:
//!
//! 1. link arrivals, capped at the buffer: `w = min(z + a, B)`;
//! 2. schedule selection, feasible against `w`;
//! 3. consumption: `y = w - sigma`;
//! 4. fusion successes `Binomial(n_r, gamma_r)` and the queue update
//!    `q' = (q - successes)^+ + request arrivals`;
//! 5. decoherence: `z' = Binomial(y_l, 1 - d_l)` per link.
//!
//! LLEs are consumed whether or not the fusion succeeds and whether or
//! not the queue is empty; scheduling never requires pending requests.

mod chain;

pub use chain::{
    pre_arrival_matrix, AgnosticPolicy, DeterministicPolicyTable, LleChain, NeverSchedules,
    RandomizedPolicyTable, StateSpace,
};

use std::io::Write;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::{ArrivalSpec, Schedule, SwitchTopology};
use crate::rng::{SlotRng, Stream};

/// Queues per request type plus LLE counts per link.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SwitchState {
    pub q: Vec<u64>,
    pub z: Vec<u32>,
}

impl SwitchState {
    pub fn zeros(topology: &SwitchTopology) -> Self {
        SwitchState {
            q: vec![0; topology.num_requests()],
            z: vec![0; topology.num_links()],
        }
    }

    pub fn new(topology: &SwitchTopology, q: Vec<u64>, z: Vec<u32>) -> Result<Self> {
        if q.len() != topology.num_requests() || z.len() != topology.num_links() {
            return Err(Error::InvalidModel(format!(
                "state shape ({}, {}) does not match topology ({}, {})",
                q.len(),
                z.len(),
                topology.num_requests(),
                topology.num_links()
            )));
        }
        for (l, &count) in z.iter().enumerate() {
            if count > topology.buffer() {
                return Err(Error::InvalidModel(format!(
                    "initial LLE count z[{l}] = {count} exceeds buffer {}",
                    topology.buffer()
                )));
            }
        }
        Ok(SwitchState { q, z })
    }

    pub fn total_queue(&self) -> u64 {
        self.q.iter().sum()
    }

    /// Quadratic congestion functional `0.5 * sum_r q_r^2`.
    pub fn lyapunov(&self) -> f64 {
        0.5 * self.q.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>()
    }
}

/// Everything that happened in one slot.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub schedule: Schedule,
    /// Fusion successes per request type (`<= n_r`).
    pub successes: Vec<u32>,
    /// Actual queue decrements `min(successes, q)`.
    pub departures: Vec<u32>,
    pub request_arrivals: Vec<u32>,
    pub link_arrivals: Vec<u32>,
    /// LLE counts after arrival capping and consumption, before
    /// decoherence.
    pub post_arrival_lle: Vec<u32>,
    pub next: SwitchState,
}

/// Chooses a schedule for the post-arrival counts `w`. Implementations
/// may carry state (caches) and draw from the policy stream.
pub trait ScheduleChooser {
    fn choose(
        &mut self,
        state: &SwitchState,
        w: &[u32],
        slot: u64,
        rng: &SlotRng,
    ) -> Result<Schedule>;
}

impl<F> ScheduleChooser for F
where
    F: FnMut(&SwitchState, &[u32], u64, &SlotRng) -> Result<Schedule>,
{
    fn choose(
        &mut self,
        state: &SwitchState,
        w: &[u32],
        slot: u64,
        rng: &SlotRng,
    ) -> Result<Schedule> {
        self(state, w, slot, rng)
    }
}

/// Advance one slot. The chooser sees the post-arrival counts; its
/// schedule is validated against them.
pub fn step(
    topology: &SwitchTopology,
    arrivals: &ArrivalSpec,
    state: &SwitchState,
    slot: u64,
    chooser: &mut dyn ScheduleChooser,
    rng: &SlotRng,
) -> Result<StepOutcome> {
    let num_links = topology.num_links();
    let num_requests = topology.num_requests();
    let buffer = topology.buffer();

    // 1. link arrivals, capped
    let mut link_arrivals = vec![0u32; num_links];
    let mut w = vec![0u32; num_links];
    for l in 0..num_links {
        let a = arrivals.link_streams()[l].sample(rng, Stream::LinkArrivals, slot, l as u64);
        link_arrivals[l] = a;
        w[l] = (state.z[l].saturating_add(a)).min(buffer);
    }

    // 2. schedule selection
    let schedule = chooser.choose(state, &w, slot, rng)?;
    if schedule.batches().len() != num_requests {
        return Err(Error::InfeasibleSchedule {
            slot,
            detail: format!(
                "schedule has {} batch entries for {} request types",
                schedule.batches().len(),
                num_requests
            ),
        });
    }
    if !schedule.feasible_at(&w) {
        return Err(Error::InfeasibleSchedule {
            slot,
            detail: format!(
                "demand {:?} exceeds available counts {:?}",
                schedule.demand(),
                w
            ),
        });
    }

    // 3. consumption
    let post_arrival_lle: Vec<u32> = w
        .iter()
        .zip(schedule.demand())
        .map(|(&avail, &used)| avail - used)
        .collect();

    // 4. fusion successes and queue update
    let mut successes = vec![0u32; num_requests];
    let mut departures = vec![0u32; num_requests];
    let mut request_arrivals = vec![0u32; num_requests];
    let mut next_q = vec![0u64; num_requests];
    for r in 0..num_requests {
        let n = schedule.batches()[r];
        let hit = rng.binomial(Stream::Successes, slot, r as u64, n, topology.gamma()[r]);
        successes[r] = hit;
        let dep = (hit as u64).min(state.q[r]);
        departures[r] = dep as u32;
        let a = arrivals.request_streams()[r].sample(rng, Stream::RequestArrivals, slot, r as u64);
        request_arrivals[r] = a;
        next_q[r] = state.q[r] - dep + a as u64;
    }

    // 5. decoherence
    let mut next_z = vec![0u32; num_links];
    for l in 0..num_links {
        let keep = 1.0 - topology.decoherence()[l];
        next_z[l] = rng.binomial(Stream::Decoherence, slot, l as u64, post_arrival_lle[l], keep);
    }

    Ok(StepOutcome {
        schedule,
        successes,
        departures,
        request_arrivals,
        link_arrivals,
        post_arrival_lle,
        next: SwitchState {
            q: next_q,
            z: next_z,
        },
    })
}

/// Streaming simulation: drives `horizon` slots and hands every slot's
/// outcome to `observer`. Returns the final state.
pub fn run<F>(
    topology: &SwitchTopology,
    arrivals: &ArrivalSpec,
    initial: SwitchState,
    horizon: u64,
    seed: u64,
    chooser: &mut dyn ScheduleChooser,
    mut observer: F,
) -> Result<SwitchState>
where
    F: FnMut(u64, &SwitchState, &StepOutcome),
{
    arrivals.check_shape(topology.num_requests(), topology.num_links())?;
    let rng = SlotRng::new(seed);
    let mut state = initial;
    for slot in 0..horizon {
        let outcome = step(topology, arrivals, &state, slot, chooser, &rng)?;
        observer(slot, &state, &outcome);
        state = outcome.next;
    }
    Ok(state)
}

/// One recorded slot of a [`SimTrace`]: the pre-step state and the
/// slot's schedule and successes.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub t: u64,
    pub q: Vec<u64>,
    pub z: Vec<u32>,
    pub n: Vec<u32>,
    pub nhat: Vec<u32>,
    pub sigma: Vec<u32>,
}

/// Recorded simulation: rows every `stride` slots plus cumulative
/// counters over the whole horizon.
#[derive(Debug, Clone)]
pub struct SimTrace {
    pub seed: u64,
    pub stride: u64,
    pub horizon: u64,
    pub rows: Vec<TraceRow>,
    pub final_state: SwitchState,
    /// Cumulative request departures per type (actual queue decrements).
    pub departures_requests: Vec<u64>,
    /// Cumulative LLEs consumed per link.
    pub departures_lles: Vec<u64>,
    /// Cumulative request arrivals per type.
    pub arrivals_requests: Vec<u64>,
    /// Cumulative link arrivals per link (before capping).
    pub arrivals_links: Vec<u64>,
}

/// Record a simulation, keeping every `stride`-th slot.
pub fn simulate(
    topology: &SwitchTopology,
    arrivals: &ArrivalSpec,
    initial: SwitchState,
    horizon: u64,
    seed: u64,
    chooser: &mut dyn ScheduleChooser,
    stride: u64,
) -> Result<SimTrace> {
    let stride = stride.max(1);
    let mut rows = Vec::new();
    let mut dep_r = vec![0u64; topology.num_requests()];
    let mut dep_l = vec![0u64; topology.num_links()];
    let mut arr_r = vec![0u64; topology.num_requests()];
    let mut arr_l = vec![0u64; topology.num_links()];
    let final_state = run(
        topology,
        arrivals,
        initial,
        horizon,
        seed,
        chooser,
        |slot, state, outcome| {
            for (acc, &x) in dep_r.iter_mut().zip(&outcome.departures) {
                *acc += x as u64;
            }
            for (acc, &x) in dep_l.iter_mut().zip(outcome.schedule.demand()) {
                *acc += x as u64;
            }
            for (acc, &x) in arr_r.iter_mut().zip(&outcome.request_arrivals) {
                *acc += x as u64;
            }
            for (acc, &x) in arr_l.iter_mut().zip(&outcome.link_arrivals) {
                *acc += x as u64;
            }
            if slot % stride == 0 {
                rows.push(TraceRow {
                    t: slot,
                    q: state.q.clone(),
                    z: state.z.clone(),
                    n: outcome.schedule.batches().to_vec(),
                    nhat: outcome.successes.clone(),
                    sigma: outcome.schedule.demand().to_vec(),
                });
            }
        },
    )?;
    Ok(SimTrace {
        seed,
        stride,
        horizon,
        rows,
        final_state,
        departures_requests: dep_r,
        departures_lles: dep_l,
        arrivals_requests: arr_r,
        arrivals_links: arr_l,
    })
}

/// CSV export. The first line is a versioned schema comment; reruns with
/// the same seed and build are byte identical.
pub fn write_trace_csv<W: Write>(trace: &SimTrace, out: &mut W) -> Result<()> {
    let r_count = trace.departures_requests.len();
    let l_count = trace.departures_lles.len();
    writeln!(
        out,
        "# qswitch-csv v1 kind=trace seed={} stride={} horizon={}",
        trace.seed, trace.stride, trace.horizon
    )?;
    let mut header = vec!["t".to_string()];
    header.extend((0..r_count).map(|r| format!("q_{r}")));
    header.extend((0..l_count).map(|l| format!("z_{l}")));
    header.extend((0..r_count).map(|r| format!("n_{r}")));
    header.extend((0..r_count).map(|r| format!("nhat_{r}")));
    header.extend((0..l_count).map(|l| format!("sigma_{l}")));
    header.push("lyapunov".to_string());
    writeln!(out, "{}", header.join(","))?;
    for row in &trace.rows {
        let mut fields = vec![row.t.to_string()];
        fields.extend(row.q.iter().map(|x| x.to_string()));
        fields.extend(row.z.iter().map(|x| x.to_string()));
        fields.extend(row.n.iter().map(|x| x.to_string()));
        fields.extend(row.nhat.iter().map(|x| x.to_string()));
        fields.extend(row.sigma.iter().map(|x| x.to_string()));
        let lyap = 0.5 * row.q.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>();
        fields.push(format!("{lyap}"));
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}

/// Exact one-slot transition matrix of the pre-arrival LLE counts under
/// an agnostic policy, over the `(B+1)^L` states in mixed-radix rank
/// order. Requires i.i.d. link arrivals (period 1); periodic streams
/// need the product chain, which the MDP and capacity layers build
/// internally.
pub fn build_transition_matrix(
    topology: &SwitchTopology,
    arrivals: &ArrivalSpec,
    policy: &dyn AgnosticPolicy,
    state_cap: usize,
) -> Result<DMatrix<f64>> {
    let period = arrivals.link_period();
    if period != 1 {
        return Err(Error::PeriodicArrivals {
            op: "build_transition_matrix",
            period,
        });
    }
    let chain = LleChain::build(topology, arrivals, state_cap)?;
    pre_arrival_matrix(&chain, policy)
}
