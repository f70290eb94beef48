//! Average-reward control on the LLE decision chain.
//!
//! Decision epochs sit after LLE arrivals: the controller sees the
//! capped counts `w` (and the arrival phase) and picks a feasible
//! schedule. One slot of reward is the expected weighted success count
//! `sum_r weight_r * gamma_r * n_r`. Between decisions the kernel first
//! applies survival to the unconsumed counts, then the next slot's
//! arrivals.
//!
//! Two independent solvers cover the same problem and are cross-checked
//! in tests: relative value iteration ([`solve_average_reward`]) and
//! Howard policy iteration ([`policy_iteration`]). Both report the
//! optimality-equation residual of their answer under the untransformed
//! backup operator, so a converged result certifies itself.
//!
//! The chain regenerates: every link loses each LLE with probability at
//! least `min_l d_l > 0`, so the all-empty state is reachable from
//! everywhere and the chain has a single recurrent class under every
//! stationary policy. That is what makes the gain state-independent and
//! the stationary distribution in [`evaluate_policy`] unique.

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{
    pre_arrival_matrix, AgnosticPolicy, DeterministicPolicyTable, LleChain,
};
use crate::error::{Error, Result};
use crate::model::{ArrivalSpec, SwitchTopology};

/// Precomputed solver workspace for one `(topology, arrivals)` pair:
/// the exact kernels plus per-schedule service coefficients and
/// post-consumption ranks. Build once, reuse across weight vectors.
pub struct MdpTables {
    pub chain: LleChain,
    /// `service_coeff[k][r] = gamma_r * n_r` for schedule `k`.
    service_coeff: Vec<Vec<f64>>,
    /// `consumed_rank[w_rank][i]` = rank of `w - sigma` for the `i`-th
    /// entry of `chain.feasible[w_rank]`.
    consumed_rank: Vec<Vec<usize>>,
}

impl MdpTables {
    pub fn build(
        topology: &SwitchTopology,
        arrivals: &ArrivalSpec,
        state_cap: usize,
    ) -> Result<Self> {
        let chain = LleChain::build(topology, arrivals, state_cap)?;
        let gamma = topology.gamma();
        let service_coeff: Vec<Vec<f64>> = chain
            .schedules
            .iter()
            .map(|s| {
                s.batches()
                    .iter()
                    .zip(gamma)
                    .map(|(&n, &g)| g * n as f64)
                    .collect()
            })
            .collect();
        let mut consumed_rank = Vec::with_capacity(chain.space.size);
        for w_rank in 0..chain.space.size {
            let w = chain.space.unrank(w_rank);
            let ranks: Vec<usize> = chain.feasible[w_rank]
                .iter()
                .map(|&k| chain.space.rank(&chain.consume(&w, &chain.schedules[k])))
                .collect();
            consumed_rank.push(ranks);
        }
        Ok(MdpTables {
            chain,
            service_coeff,
            consumed_rank,
        })
    }

    pub fn decision_states(&self) -> usize {
        self.chain.decision_states()
    }

    /// Expected one-slot service per request type for schedule `k`.
    pub fn service_coeff(&self, k: usize) -> &[f64] {
        &self.service_coeff[k]
    }

    /// Rank of the post-consumption counts for feasible entry `i` at
    /// `w_rank` (aligned with `chain.feasible[w_rank]`).
    pub fn consumed_ranks(&self, w_rank: usize) -> &[usize] {
        &self.consumed_rank[w_rank]
    }

    /// One-slot rewards `u[k] = sum_r weights_r * gamma_r * n_r` over
    /// the whole schedule box.
    pub fn rewards(&self, weights: &[f64]) -> Vec<f64> {
        self.service_coeff
            .iter()
            .map(|coeff| coeff.iter().zip(weights).map(|(c, w)| c * w).sum())
            .collect()
    }

    /// One backup of the untransformed optimality operator:
    /// `tv[(phase, w)] = max_{n feasible} u[n] + E[v(next decision)]`.
    /// When `argmax` is given, ties resolve to the lexicographically
    /// largest batch vector. Values within [`TIE_EPS`] (scaled) of the
    /// max count as tied: exact ties reach the backup with
    /// path-dependent last-ulp noise, and without the band the declared
    /// tie-break would silently depend on iteration history.
    fn backup(&self, u: &[f64], v: &[f64], tv: &mut [f64], mut argmax: Option<&mut [usize]>) {
        let s = self.chain.space.size;
        for phase in 0..self.chain.phases {
            let next_phase = (phase + 1) % self.chain.phases;
            let g = self
                .chain
                .backup_composed(next_phase, &v[next_phase * s..(next_phase + 1) * s]);
            for w_rank in 0..s {
                let feas = &self.chain.feasible[w_rank];
                let ranks = &self.consumed_rank[w_rank];
                let mut best = f64::NEG_INFINITY;
                for i in 0..feas.len() {
                    best = best.max(u[feas[i]] + g[ranks[i]]);
                }
                let idx = phase * s + w_rank;
                tv[idx] = best;
                if let Some(amax) = argmax.as_deref_mut() {
                    let cut = best - TIE_EPS * (1.0 + best.abs());
                    let k = feas
                        .iter()
                        .zip(ranks)
                        .rev()
                        .find(|&(&k, &y)| u[k] + g[y] >= cut)
                        .map(|(&k, _)| k)
                        .unwrap_or(0);
                    amax[idx] = k;
                }
            }
        }
    }
}

/// Width of the argmax tie band, relative to the value magnitude.
/// Must sit well above solver tolerance and well below any genuine
/// action-value gap that matters at acceptance tolerances.
const TIE_EPS: f64 = 1e-9;

/// Options for [`solve_average_reward`].
#[derive(Debug, Clone, Copy)]
pub struct AreOptions {
    /// Span stopping threshold on the one-step increments (gain units).
    pub tolerance: f64,
    pub max_sweeps: usize,
    /// Damping weight of the aperiodicity transform
    /// `P_eta = eta I + (1 - eta) P`; the transform changes neither the
    /// gain nor the greedy actions, only the iteration.
    pub eta: f64,
}

impl Default for AreOptions {
    fn default() -> Self {
        AreOptions {
            tolerance: 1e-11,
            max_sweeps: 500_000,
            eta: 0.05,
        }
    }
}

/// A solved average-reward problem.
pub struct AreSolution {
    pub gain: f64,
    /// Relative values over decision states, zero at the all-empty
    /// phase-0 state.
    pub bias: Vec<f64>,
    pub policy: DeterministicPolicyTable,
    pub sweeps: usize,
    /// `max_s |(T bias)(s) - bias(s) - gain|` under the untransformed
    /// operator.
    pub residual: f64,
}

/// Relative value iteration for the optimal gain, bias, and policy.
///
/// Weights must be finite and nonnegative. They are normalized by their
/// max internally (the problem is positively homogeneous in the
/// weights), so tolerances mean the same thing at queue length 3 and
/// 30000. All-zero weights short-circuit to the idle policy: nothing
/// has value, and the tie must break toward not burning entanglement.
pub fn solve_average_reward(
    tables: &MdpTables,
    weights: &[f64],
    opts: &AreOptions,
    warm_start: Option<&[f64]>,
) -> Result<AreSolution> {
    let total = tables.decision_states();
    check_weights(tables, weights)?;
    if !(opts.eta >= 0.0 && opts.eta < 1.0) {
        return Err(Error::Config(format!(
            "aperiodicity weight eta must lie in [0, 1), got {}",
            opts.eta
        )));
    }
    let scale = weights.iter().cloned().fold(0.0f64, f64::max);
    if scale == 0.0 {
        return Ok(idle_solution(tables));
    }
    let scaled: Vec<f64> = weights.iter().map(|w| w / scale).collect();
    let u = tables.rewards(&scaled);

    let mut v = match warm_start {
        Some(start) if start.len() == total => {
            let mut v: Vec<f64> = start.iter().map(|x| x / scale).collect();
            let v0 = v[0];
            v.iter_mut().for_each(|x| *x -= v0);
            v
        }
        _ => vec![0.0; total],
    };
    let mut tv = vec![0.0; total];

    let mut sweeps = 0;
    loop {
        tables.backup(&u, &v, &mut tv, None);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (tvi, vi) in tv.iter().zip(&v) {
            let d = tvi - vi;
            lo = lo.min(d);
            hi = hi.max(d);
        }
        if hi - lo <= opts.tolerance {
            let gain = 0.5 * (lo + hi);
            let residual = 0.5 * (hi - lo);
            let mut actions = vec![0usize; total];
            tables.backup(&u, &v, &mut tv, Some(&mut actions));
            let policy = DeterministicPolicyTable::new(
                tables.chain.space.clone(),
                tables.chain.phases,
                actions,
            );
            let bias: Vec<f64> = v.iter().map(|x| x * scale).collect();
            return Ok(AreSolution {
                gain: gain * scale,
                bias,
                policy,
                sweeps,
                residual: residual * scale,
            });
        }
        sweeps += 1;
        if sweeps > opts.max_sweeps {
            return Err(Error::SolverStalled {
                sweeps: sweeps - 1,
                residual: (hi - lo) * scale,
                tolerance: opts.tolerance * scale,
            });
        }
        // damped update; subtracting the reference entry keeps values
        // bounded without touching increments
        for i in 0..total {
            v[i] = opts.eta * v[i] + (1.0 - opts.eta) * tv[i];
        }
        let v0 = v[0];
        v.iter_mut().for_each(|x| *x -= v0);
    }
}

/// Options for [`policy_iteration`].
#[derive(Debug, Clone, Copy)]
pub struct PiOptions {
    pub max_iterations: usize,
    /// Minimum Q-value improvement required to switch an action;
    /// guards against cycling on floating-point ties.
    pub margin: f64,
}

impl Default for PiOptions {
    fn default() -> Self {
        PiOptions {
            max_iterations: 10_000,
            margin: 1e-12,
        }
    }
}

/// A policy-iteration result.
pub struct PiSolution {
    pub gain: f64,
    /// Relative values over decision states, zero at the all-empty
    /// phase-0 state.
    pub bias: Vec<f64>,
    pub policy: DeterministicPolicyTable,
    pub iterations: usize,
    /// Optimality-equation residual of the final pair, as in
    /// [`AreSolution::residual`].
    pub residual: f64,
}

/// Howard policy iteration: exact linear-system evaluation (gain plus
/// bias pinned at the reference state) alternating with greedy
/// improvement. Independent of [`solve_average_reward`] except for the
/// shared kernel tables, which makes it a genuine cross-check.
pub fn policy_iteration(
    tables: &MdpTables,
    weights: &[f64],
    opts: &PiOptions,
) -> Result<PiSolution> {
    let total = tables.decision_states();
    check_weights(tables, weights)?;
    let scale = weights.iter().cloned().fold(0.0f64, f64::max);
    if scale == 0.0 {
        let idle = idle_solution(tables);
        return Ok(PiSolution {
            gain: idle.gain,
            bias: idle.bias,
            policy: idle.policy,
            iterations: 0,
            residual: idle.residual,
        });
    }
    let scaled: Vec<f64> = weights.iter().map(|w| w / scale).collect();
    let u = tables.rewards(&scaled);
    let s = tables.chain.space.size;

    let mut actions = vec![0usize; total];
    let mut iterations = 0;
    loop {
        iterations += 1;
        if iterations > opts.max_iterations {
            return Err(Error::SolverStalled {
                sweeps: iterations - 1,
                residual: f64::NAN,
                tolerance: opts.margin,
            });
        }
        let (gain, bias) = evaluate_deterministic(tables, &u, &actions)?;

        // Q-values via one expected-value contraction per phase
        let mut changed = false;
        for phase in 0..tables.chain.phases {
            let next_phase = (phase + 1) % tables.chain.phases;
            let g = tables
                .chain
                .backup_composed(next_phase, &bias[next_phase * s..(next_phase + 1) * s]);
            for w_rank in 0..s {
                let feas = &tables.chain.feasible[w_rank];
                let ranks = &tables.consumed_rank[w_rank];
                let idx = phase * s + w_rank;
                let mut best = f64::NEG_INFINITY;
                let mut current_q = f64::NEG_INFINITY;
                for i in 0..feas.len() {
                    let val = u[feas[i]] + g[ranks[i]];
                    best = best.max(val);
                    if feas[i] == actions[idx] {
                        current_q = val;
                    }
                }
                // lex-largest within the tie band of the max; adopt only
                // on strict improvement so iterations cannot dither
                let cut = best - TIE_EPS * (1.0 + best.abs());
                let mut candidate = actions[idx];
                let mut candidate_q = current_q;
                for (&k, &y) in feas.iter().zip(ranks).rev() {
                    let val = u[k] + g[y];
                    if val >= cut {
                        candidate = k;
                        candidate_q = val;
                        break;
                    }
                }
                if candidate != actions[idx] && candidate_q > current_q + opts.margin {
                    actions[idx] = candidate;
                    changed = true;
                }
            }
        }

        if !changed {
            let mut tv = vec![0.0; total];
            tables.backup(&u, &bias, &mut tv, None);
            let residual = tv
                .iter()
                .zip(&bias)
                .map(|(t, b)| (t - b - gain).abs())
                .fold(0.0f64, f64::max);
            let policy = DeterministicPolicyTable::new(
                tables.chain.space.clone(),
                tables.chain.phases,
                actions,
            );
            return Ok(PiSolution {
                gain: gain * scale,
                bias: bias.iter().map(|x| x * scale).collect(),
                policy,
                iterations,
                residual: residual * scale,
            });
        }
    }
}

/// Gain and bias of a fixed deterministic policy by direct linear
/// solve: `(I - P_pi) h + g 1 = u_pi` with `h(0) = 0`, folded into one
/// square system by writing `g` into the reference column.
fn evaluate_deterministic(
    tables: &MdpTables,
    u: &[f64],
    actions: &[usize],
) -> Result<(f64, Vec<f64>)> {
    let s = tables.chain.space.size;
    let total = tables.decision_states();
    let mut a = DMatrix::<f64>::identity(total, total);
    let mut rhs = DVector::<f64>::zeros(total);
    let mut row_buf = vec![0.0; s];
    for phase in 0..tables.chain.phases {
        let next_phase = (phase + 1) % tables.chain.phases;
        for w_rank in 0..s {
            let idx = phase * s + w_rank;
            let k = actions[idx];
            let schedule = &tables.chain.schedules[k];
            let w = tables.chain.space.unrank(w_rank);
            if !schedule.feasible_at(&w) {
                return Err(Error::InfeasibleSchedule {
                    slot: 0,
                    detail: format!(
                        "policy action {:?} infeasible at counts {:?}",
                        schedule.batches(),
                        w
                    ),
                });
            }
            let y = tables.chain.consume(&w, schedule);
            tables.chain.composed_row_into(next_phase, &y, &mut row_buf);
            for (w2, &p) in row_buf.iter().enumerate() {
                if p != 0.0 {
                    a[(idx, next_phase * s + w2)] -= p;
                }
            }
            rhs[idx] = u[k];
        }
    }
    // column 0 now carries the gain unknown; h(0) := 0
    for i in 0..total {
        a[(i, 0)] = 1.0;
    }
    let lu = a.lu();
    let sol = lu
        .solve(&rhs)
        .ok_or_else(|| Error::Numeric("singular policy evaluation system".into()))?;
    let gain = sol[0];
    let mut bias: Vec<f64> = sol.iter().cloned().collect();
    bias[0] = 0.0;
    Ok((gain, bias))
}

fn check_weights(tables: &MdpTables, weights: &[f64]) -> Result<()> {
    if weights.len() != tables.chain.topology.num_requests() {
        return Err(Error::Config(format!(
            "{} weights for {} request types",
            weights.len(),
            tables.chain.topology.num_requests()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(Error::Numeric(format!(
            "weights must be finite and nonnegative, got {w}"
        )));
    }
    Ok(())
}

fn idle_solution(tables: &MdpTables) -> AreSolution {
    let total = tables.decision_states();
    AreSolution {
        gain: 0.0,
        bias: vec![0.0; total],
        policy: DeterministicPolicyTable::new(
            tables.chain.space.clone(),
            tables.chain.phases,
            vec![0; total],
        ),
        sweeps: 0,
        residual: 0.0,
    }
}

/// Stationary behaviour of an agnostic policy: the pre-arrival
/// distribution over `(z, phase)` and the long-run service rate per
/// request type (`gamma_r` times the expected scheduled batch).
pub struct StationaryAnalysis {
    /// Indexed by `phase * |Z| + rank(z)`.
    pub distribution: Vec<f64>,
    pub service_rates: Vec<f64>,
    /// `||mu P - mu||_1` of the returned distribution.
    pub residual: f64,
}

impl StationaryAnalysis {
    /// Long-run reward rate for the given weights,
    /// `sum_r weights_r * service_rate_r`.
    pub fn reward_rate(&self, weights: &[f64]) -> f64 {
        self.service_rates
            .iter()
            .zip(weights)
            .map(|(s, w)| s * w)
            .sum()
    }
}

/// Solve for the stationary distribution of the pre-arrival chain under
/// `policy` and integrate the service rates against it.
pub fn evaluate_policy(
    tables: &MdpTables,
    policy: &dyn AgnosticPolicy,
) -> Result<StationaryAnalysis> {
    let chain = &tables.chain;
    let p = pre_arrival_matrix(chain, policy)?;
    let mut mu = stationary_distribution(&p)?;

    // polish: the power step is exact contraction toward mu
    let mut residual = stationary_residual(&p, &mu);
    for _ in 0..64 {
        if residual <= 1e-13 {
            break;
        }
        let next = step_left(&p, &mu);
        mu = next;
        residual = stationary_residual(&p, &mu);
    }
    if residual > 1e-9 {
        return Err(Error::Numeric(format!(
            "stationary solve residual {residual:.3e} exceeds 1e-9"
        )));
    }

    let s = chain.space.size;
    let mut service = vec![0.0; chain.topology.num_requests()];
    let mut dist_buf = Vec::new();
    for phase in 0..chain.phases {
        for z_rank in 0..s {
            let mass = mu[phase * s + z_rank];
            if mass == 0.0 {
                continue;
            }
            let z = chain.space.unrank(z_rank);
            for w_rank in 0..s {
                let w = chain.space.unrank(w_rank);
                let a_prob = chain.arrival_prob(phase, &z, &w);
                if a_prob == 0.0 {
                    continue;
                }
                policy.distribution(&w, phase, &mut dist_buf);
                for &(k, prob) in dist_buf.iter() {
                    if prob == 0.0 {
                        continue;
                    }
                    let coeff = &tables.service_coeff[k];
                    let weight = mass * a_prob * prob;
                    for (acc, &c) in service.iter_mut().zip(coeff) {
                        *acc += weight * c;
                    }
                }
            }
        }
    }

    Ok(StationaryAnalysis {
        distribution: mu,
        service_rates: service,
        residual,
    })
}

/// Unique stationary row vector of a unichain stochastic matrix via a
/// direct solve of `mu (P - I) = 0`, `sum mu = 1`.
pub fn stationary_distribution(p: &DMatrix<f64>) -> Result<Vec<f64>> {
    let n = p.nrows();
    if n == 0 || p.ncols() != n {
        return Err(Error::Numeric("empty or non-square matrix".into()));
    }
    // transpose system; last equation replaced by normalization
    let mut a = p.transpose();
    for i in 0..n {
        a[(i, i)] -= 1.0;
    }
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut rhs = DVector::<f64>::zeros(n);
    rhs[n - 1] = 1.0;
    let sol = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numeric("singular stationary system".into()))?;
    let mut mu: Vec<f64> = sol.iter().cloned().collect();
    let mut worst = 0.0f64;
    for x in mu.iter_mut() {
        if *x < 0.0 {
            worst = worst.max(-*x);
            *x = 0.0;
        }
    }
    if worst > 1e-9 {
        return Err(Error::Numeric(format!(
            "stationary solve produced negative mass {worst:.3e}"
        )));
    }
    let total: f64 = mu.iter().sum();
    if !(total.is_finite() && total > 0.0) {
        return Err(Error::Numeric("stationary solve lost all mass".into()));
    }
    mu.iter_mut().for_each(|x| *x /= total);
    Ok(mu)
}

fn step_left(p: &DMatrix<f64>, mu: &[f64]) -> Vec<f64> {
    let n = p.nrows();
    let mut out = vec![0.0; n];
    for i in 0..n {
        let m = mu[i];
        if m == 0.0 {
            continue;
        }
        for j in 0..n {
            out[j] += m * p[(i, j)];
        }
    }
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= total);
    out
}

fn stationary_residual(p: &DMatrix<f64>, mu: &[f64]) -> f64 {
    step_left(p, mu)
        .iter()
        .zip(mu)
        .map(|(a, b)| (a - b).abs())
        .sum()
}
