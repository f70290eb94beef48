//! Mixing diagnostics, fluid-limit integration, and drift estimation.
//!
//! Three lenses on the same chain. The mixing half measures how fast
//! the LLE process forgets its start: the Dobrushin coefficient of a
//! one-slot kernel, checked against the regeneration bound that the
//! all-links-decohere event forces on every policy. The fluid half
//! integrates the deterministic large-scale approximation
//! `dQbar/dt = lambda - service(pi*(Qbar))` and compares rescaled
//! simulations against it. The drift half estimates the slope of the
//! quadratic potential `L(Q) = sum Q_r^2 / 2` from recorded traces,
//! which is the standing stability diagnostic for the batched policy
//! versus queue-greedy scheduling.

use nalgebra::DMatrix;

use crate::dynamics::{run, SimTrace, SwitchState};
use crate::error::{Error, Result};
use crate::mdp::{
    evaluate_policy, solve_average_reward, stationary_distribution, AreOptions, MdpTables,
};
use crate::model::{ArrivalSpec, SwitchTopology};
use crate::schedulers::AreScheduler;

/// Mixing summary for a family of one-slot kernels.
#[derive(Debug, Clone)]
pub struct MixingReport {
    /// Worst (largest) Dobrushin coefficient across the family.
    pub rho: f64,
    /// Regeneration bound `1 - prod_l d_l^B`: all buffered LLEs decohere
    /// in one slot with at least the complementary probability, landing
    /// the chain in the empty state no matter what was scheduled.
    pub rho_bound: f64,
    /// Coefficient per supplied weight direction, same order as input.
    pub rhos: Vec<f64>,
    /// Worst-start total-variation distance to stationarity per step,
    /// for the slowest kernel in the family. Stops once below 1e-12 or
    /// after 256 steps.
    pub tv_curve: Vec<f64>,
}

/// Total-variation distance `max_A |a(A) - b(A)| = sum |a - b| / 2`.
pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / 2.0
}

/// Dobrushin coefficient of ergodicity
/// `1 - min_{i,j} sum_k min(P[i][k], P[j][k])`.
///
/// Equals the worst-case one-step TV contraction factor: for any
/// distributions mu, nu, `TV(mu P, nu P) <= rho(P) * TV(mu, nu)`.
pub fn dobrushin_coefficient(p: &DMatrix<f64>) -> Result<f64> {
    validate_stochastic(p)?;
    Ok(dobrushin_with_pair(p).0)
}

fn dobrushin_with_pair(p: &DMatrix<f64>) -> (f64, (usize, usize)) {
    let n = p.nrows();
    let mut least = f64::INFINITY;
    let mut pair = (0, 0);
    for i in 0..n {
        for j in i + 1..n {
            let overlap: f64 = (0..n).map(|k| p[(i, k)].min(p[(j, k)])).sum();
            if overlap < least {
                least = overlap;
                pair = (i, j);
            }
        }
    }
    if n <= 1 {
        // a single state is already stationary
        return (0.0, (0, 0));
    }
    ((1.0 - least).clamp(0.0, 1.0), pair)
}

fn validate_stochastic(p: &DMatrix<f64>) -> Result<()> {
    if p.nrows() != p.ncols() {
        return Err(Error::Numeric(format!(
            "kernel must be square, got {}x{}",
            p.nrows(),
            p.ncols()
        )));
    }
    for row in 0..p.nrows() {
        let sum: f64 = p.row(row).iter().sum();
        if (sum - 1.0).abs() > 1e-10 || p.row(row).iter().any(|&x| x < -1e-12) {
            return Err(Error::NotStochastic { row, sum });
        }
    }
    Ok(())
}

/// Check the one-step regeneration bound over a family of weight
/// directions: for each `q`, solve the batching problem at weights `q`,
/// form the induced one-slot kernel, and require its Dobrushin
/// coefficient to stay below `1 - prod_l d_l^B + 1e-12`.
///
/// Periodic link arrivals are rejected: the phase component of the
/// product chain never mixes, so the coefficient degenerates to 1 for
/// reasons that have nothing to do with scheduling.
pub fn verify_uniform_mixing(
    topology: &SwitchTopology,
    arrivals: &ArrivalSpec,
    directions: &[Vec<f64>],
    state_cap: usize,
) -> Result<MixingReport> {
    let period = arrivals.link_period();
    if period != 1 {
        return Err(Error::PeriodicArrivals {
            op: "verify_uniform_mixing",
            period,
        });
    }
    if directions.is_empty() {
        return Err(Error::Config("empty direction family".into()));
    }
    let b = topology.buffer() as i32;
    let rho_bound = 1.0
        - topology
            .decoherence()
            .iter()
            .map(|d| d.powi(b))
            .product::<f64>();

    let tables = MdpTables::build(topology, arrivals, state_cap)?;
    let opts = AreOptions::default();
    let mut warm: Option<Vec<f64>> = None;
    let mut rhos = Vec::with_capacity(directions.len());
    let mut worst: Option<(f64, DMatrix<f64>)> = None;
    for q in directions {
        let sol = solve_average_reward(&tables, q, &opts, warm.as_deref())?;
        let kernel = crate::dynamics::pre_arrival_matrix(&tables.chain, &sol.policy)?;
        warm = Some(sol.bias);
        let (rho, pair) = dobrushin_with_pair(&kernel);
        if rho > rho_bound + 1e-12 {
            return Err(Error::Numeric(format!(
                "one-step mixing bound violated at weights {q:?}: \
                 coefficient {rho} > bound {rho_bound} \
                 (least-overlap rows {} and {})",
                pair.0, pair.1
            )));
        }
        if worst.as_ref().is_none_or(|(r, _)| rho > *r) {
            worst = Some((rho, kernel));
        }
        rhos.push(rho);
    }
    let (rho, kernel) = worst.expect("nonempty family");
    let tv_curve = worst_start_tv_curve(&kernel)?;
    Ok(MixingReport {
        rho,
        rho_bound,
        rhos,
        tv_curve,
    })
}

/// TV distance to stationarity after t steps, maximized over start
/// states, for t = 0, 1, ... until below 1e-12 (or 256 steps).
fn worst_start_tv_curve(p: &DMatrix<f64>) -> Result<Vec<f64>> {
    let mu = stationary_distribution(p)?;
    let n = p.nrows();
    let mut power = DMatrix::<f64>::identity(n, n);
    let mut curve = Vec::new();
    for _ in 0..=256 {
        let tv = (0..n)
            .map(|row| {
                let r: Vec<f64> = power.row(row).iter().copied().collect();
                total_variation(&r, &mu)
            })
            .fold(0.0, f64::max);
        curve.push(tv);
        if tv <= 1e-12 {
            break;
        }
        power = &power * p;
    }
    Ok(curve)
}

/// One grid point of the fluid trajectory.
#[derive(Debug, Clone)]
pub struct FluidState {
    /// Fluid queue vector, componentwise nonnegative.
    pub qbar: Vec<f64>,
    /// Cumulative fluid departures, nondecreasing.
    pub dbar: Vec<f64>,
    pub time: f64,
}

/// Fluid integrator knobs.
#[derive(Debug, Clone)]
pub struct FluidOptions {
    /// Re-solve the batching problem every this many steps (the optimal
    /// policy is piecewise constant in the queue direction, so slots
    /// between re-solves reuse the cached rates).
    pub resolve_every: usize,
    /// Largest allowed sup-norm disagreement between the requested step
    /// and a half-step integration, checked on the coarse grid.
    pub halving_tolerance: f64,
}

impl Default for FluidOptions {
    fn default() -> Self {
        FluidOptions {
            resolve_every: 10,
            halving_tolerance: 1e-2,
        }
    }
}

/// Quadratic potential `sum q_r^2 / 2` of a real-valued queue vector.
pub fn quadratic_potential(q: &[f64]) -> f64 {
    q.iter().map(|x| x * x).sum::<f64>() / 2.0
}

/// Drain envelope `(sqrt(l0) - eps t / (2 sqrt(R)))_+^2`: the potential
/// of a fluid path started at potential `l0` under a rate vector with
/// uniform slack `eps` must stay below this curve.
pub fn drain_bound(l0: f64, epsilon: f64, num_types: usize, t: f64) -> f64 {
    let root = l0.max(0.0).sqrt() - epsilon * t / (2.0 * (num_types as f64).sqrt());
    root.max(0.0).powi(2)
}

/// Forward-Euler integration of the fluid approximation
/// `dQbar_r/dt = lambda_r - service_r(pi*(Qbar))`, where the service
/// rates are the stationary rates of the gain-optimal policy at weights
/// `Qbar`. On the boundary `Qbar_r = 0` departures are capped at
/// `lambda_r` so the fluid queue cannot go negative.
///
/// The policy is re-solved every [`FluidOptions::resolve_every`] steps
/// and whenever a component enters or leaves zero; once every component
/// is absorbed at zero the last interior policy's rates are kept (the
/// limit of the optimal policy along the path) so the boundary cap, not
/// a re-tie-broken idle solution, governs the absorbed regime. The
/// whole integration is repeated at half the step and compared on the
/// requested grid; disagreement beyond the tolerance means the step is
/// too coarse to trust and fails the call rather than returning a
/// trajectory with invisible policy-switching error.
pub fn integrate_fluid(
    tables: &MdpTables,
    lambda: &[f64],
    qbar0: &[f64],
    horizon: f64,
    dt: f64,
    opts: &FluidOptions,
) -> Result<Vec<FluidState>> {
    let r_count = tables.chain.topology.num_requests();
    check_rates(lambda, r_count, "arrival rates")?;
    check_rates(qbar0, r_count, "initial fluid queues")?;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Config(format!("step must be positive, got {dt}")));
    }
    if !(horizon >= 0.0 && horizon.is_finite()) {
        return Err(Error::Config(format!(
            "horizon must be nonnegative, got {horizon}"
        )));
    }
    if opts.resolve_every == 0 {
        return Err(Error::Config("resolve_every must be >= 1".into()));
    }
    let steps = (horizon / dt).ceil() as usize;
    let coarse = euler_path(tables, lambda, qbar0, dt, steps, opts.resolve_every)?;
    let fine = euler_path(tables, lambda, qbar0, dt / 2.0, steps * 2, opts.resolve_every)?;
    let mut disagreement = 0.0f64;
    for (i, state) in coarse.iter().enumerate() {
        let twin = &fine[2 * i];
        for r in 0..r_count {
            disagreement = disagreement.max((state.qbar[r] - twin.qbar[r]).abs());
        }
    }
    if disagreement > opts.halving_tolerance {
        return Err(Error::DtTooCoarse {
            disagreement,
            tolerance: opts.halving_tolerance,
        });
    }
    Ok(coarse)
}

fn check_rates(xs: &[f64], want: usize, what: &str) -> Result<()> {
    if xs.len() != want {
        return Err(Error::Config(format!(
            "{} {what} for {} request types",
            xs.len(),
            want
        )));
    }
    if let Some(bad) = xs.iter().find(|x| !x.is_finite() || **x < 0.0) {
        return Err(Error::Config(format!(
            "{what} must be finite and nonnegative, got {bad}"
        )));
    }
    Ok(())
}

fn euler_path(
    tables: &MdpTables,
    lambda: &[f64],
    qbar0: &[f64],
    dt: f64,
    steps: usize,
    resolve_every: usize,
) -> Result<Vec<FluidState>> {
    let r_count = lambda.len();
    let mut qbar = qbar0.to_vec();
    let mut dbar = vec![0.0; r_count];
    let mut out = Vec::with_capacity(steps + 1);
    out.push(FluidState {
        qbar: qbar.clone(),
        dbar: dbar.clone(),
        time: 0.0,
    });
    let opts = AreOptions::default();
    let mut warm: Option<Vec<f64>> = None;
    let mut rates = vec![0.0; r_count];
    let mut crossed = true;
    for step in 0..steps {
        // Re-solving at all-zero weights would tie-break to the idle
        // policy and stall the absorbed state (departures would stop,
        // arrivals would lift the queue off the boundary, and the path
        // would chatter at O(lambda dt)). Keep the last interior
        // policy's rates instead: they are the limit of pi*(Qbar) along
        // the trajectory, and the boundary cap governs from there.
        let interior = qbar.iter().any(|&q| q > 0.0);
        if (step % resolve_every == 0 || crossed) && interior {
            let sol = solve_average_reward(tables, &qbar, &opts, warm.as_deref())?;
            rates = evaluate_policy(tables, &sol.policy)?.service_rates;
            warm = Some(sol.bias);
        }
        crossed = false;
        for r in 0..r_count {
            let dep_rate = if qbar[r] <= 0.0 {
                rates[r].min(lambda[r])
            } else {
                rates[r]
            };
            let next = (qbar[r] + dt * (lambda[r] - dep_rate)).max(0.0);
            // exact bookkeeping: whatever did not stay in the queue left it
            dbar[r] += qbar[r] + dt * lambda[r] - next;
            if (qbar[r] > 0.0) != (next > 0.0) {
                crossed = true;
            }
            qbar[r] = next;
        }
        out.push(FluidState {
            qbar: qbar.clone(),
            dbar: dbar.clone(),
            time: (step + 1) as f64 * dt,
        });
    }
    Ok(out)
}

/// Windowed drift of the quadratic potential along a recorded trace.
#[derive(Debug, Clone)]
pub struct DriftReport {
    /// Least-squares slope of `L(Q)` against the slot index, one entry
    /// per window (windows with fewer than two samples are skipped).
    pub slopes: Vec<f64>,
    /// NaN when no window had enough samples.
    pub median_slope: f64,
    pub positive_windows: usize,
    pub negative_windows: usize,
}

/// Estimate per-window drift of `L(Q) = sum Q_r^2 / 2` from a trace.
/// `window` is a slot count; rows are grouped by `t / window`.
pub fn lyapunov_drift(trace: &SimTrace, window: u64) -> DriftReport {
    let window = window.max(1);
    let mut slopes = Vec::new();
    let mut i = 0;
    let rows = &trace.rows;
    while i < rows.len() {
        let bucket = rows[i].t / window;
        let mut j = i;
        while j < rows.len() && rows[j].t / window == bucket {
            j += 1;
        }
        if j - i >= 2 {
            let pts: Vec<(f64, f64)> = rows[i..j]
                .iter()
                .map(|row| {
                    let l = row.q.iter().map(|&q| (q as f64) * (q as f64)).sum::<f64>() / 2.0;
                    (row.t as f64, l)
                })
                .collect();
            slopes.push(least_squares_slope(&pts));
        }
        i = j;
    }
    let median_slope = median(&slopes);
    let positive_windows = slopes.iter().filter(|s| **s > 0.0).count();
    let negative_windows = slopes.iter().filter(|s| **s < 0.0).count();
    DriftReport {
        slopes,
        median_slope,
        positive_windows,
        negative_windows,
    }
}

fn least_squares_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mean_t = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_l = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for &(t, l) in pts {
        num += (t - mean_t) * (l - mean_l);
        den += (t - mean_t) * (t - mean_t);
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Median of a slice; NaN when empty. Ties average the two middles.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("no NaN samples"));
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    }
}

/// One scale's distance between rescaled simulation and the fluid path.
#[derive(Debug, Clone)]
pub struct ScaleError {
    pub scale: f64,
    /// Re-solve window used at this scale.
    pub tau: u64,
    /// Sup-norm distance between `Q(ct)/c` and the fluid trajectory on
    /// the shared time grid, averaged over seeds.
    pub sup_error: f64,
    pub per_seed: Vec<f64>,
    /// `max_{t, l} Z_l(t) / c` — collapses like B/c, witnessing that
    /// the LLE process vanishes in the fluid scaling.
    pub max_scaled_lle: f64,
}

/// Convergence harness: for each scale `c`, simulate from initial
/// queues `c * qbar0` under the batched policy with window
/// `tau(c) = ceil(ln(c)^2)`, rescale time and space by `c`, and measure
/// the sup-norm distance to the fluid trajectory on a fixed grid.
/// Reports one [`ScaleError`] per scale; judging the trend is the
/// caller's job.
#[allow(clippy::too_many_arguments)]
pub fn fluid_convergence_check(
    topology: &SwitchTopology,
    arrivals: &ArrivalSpec,
    qbar0: &[f64],
    scales: &[f64],
    horizon: f64,
    dt: f64,
    seeds: &[u64],
    state_cap: usize,
) -> Result<Vec<ScaleError>> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed required".into()));
    }
    if let Some(bad) = scales.iter().find(|c| !(c.is_finite() && **c >= 1.0)) {
        return Err(Error::Config(format!("scales must be >= 1, got {bad}")));
    }
    let lambda = arrivals.request_rates();
    let tables = MdpTables::build(topology, arrivals, state_cap)?;
    let fluid = integrate_fluid(&tables, &lambda, qbar0, horizon, dt, &FluidOptions::default())?;

    let mut out = Vec::with_capacity(scales.len());
    for &c in scales {
        let tau = crate::model::window_for_scale(c) as u64;
        let initial_q: Vec<u64> = qbar0.iter().map(|&q| (q * c).round() as u64).collect();
        // slot index observed for each fluid grid point
        let targets: Vec<u64> = fluid.iter().map(|f| (f.time * c).round() as u64).collect();
        let horizon_slots = targets.last().copied().unwrap_or(0) + 1;
        let mut per_seed = Vec::with_capacity(seeds.len());
        let mut max_lle = 0u32;
        for &seed in seeds {
            let mut chooser = AreScheduler::new(topology, arrivals, tau.max(1), state_cap)?;
            let mut sup = 0.0f64;
            let mut next = 0usize;
            let initial = SwitchState::new(
                topology,
                initial_q.clone(),
                vec![0; topology.num_links()],
            )?;
            run(
                topology,
                arrivals,
                initial,
                horizon_slots,
                seed,
                &mut chooser,
                |slot, state, outcome| {
                    while next < targets.len() && targets[next] == slot {
                        for (r, f) in fluid[next].qbar.iter().enumerate() {
                            sup = sup.max((state.q[r] as f64 / c - f).abs());
                        }
                        next += 1;
                    }
                    for &z in &outcome.next.z {
                        max_lle = max_lle.max(z);
                    }
                },
            )?;
            per_seed.push(sup);
        }
        let sup_error = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
        out.push(ScaleError {
            scale: c,
            tau,
            sup_error,
            per_seed,
            max_scaled_lle: max_lle as f64 / c,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::TraceRow;
    use crate::model::ArrivalDistribution;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn kernel(rows: &[&[f64]]) -> DMatrix<f64> {
        DMatrix::from_row_slice(
            rows.len(),
            rows[0].len(),
            &rows.iter().flat_map(|r| r.iter().copied()).collect::<Vec<_>>(),
        )
    }

    fn single_type(p: f64, d: f64) -> (SwitchTopology, ArrivalSpec) {
        let t = SwitchTopology::new(vec![vec![0]], vec![1.0], 1, vec![d], vec![1]).unwrap();
        let a = ArrivalSpec::new(
            vec![ArrivalDistribution::Bernoulli { p: 0.0 }],
            vec![ArrivalDistribution::Bernoulli { p }],
        )
        .unwrap();
        (t, a)
    }

    #[test]
    fn dobrushin_limit_cases() {
        let eye = DMatrix::<f64>::identity(3, 3);
        assert_eq!(dobrushin_coefficient(&eye).unwrap(), 1.0);

        let flat = kernel(&[&[0.2, 0.3, 0.5], &[0.2, 0.3, 0.5], &[0.2, 0.3, 0.5]]);
        assert_eq!(dobrushin_coefficient(&flat).unwrap(), 0.0);

        // frozen two-state value: overlap 0.5 + 0.25 = 0.75
        let two = kernel(&[&[0.75, 0.25], &[0.5, 0.5]]);
        assert_eq!(dobrushin_coefficient(&two).unwrap(), 0.25);
    }

    #[test]
    fn dobrushin_rejects_bad_kernels() {
        let off = kernel(&[&[0.7, 0.2], &[0.5, 0.5]]);
        assert!(matches!(
            dobrushin_coefficient(&off),
            Err(Error::NotStochastic { row: 0, .. })
        ));
        let rect = DMatrix::<f64>::from_row_slice(1, 2, &[0.5, 0.5]);
        assert!(dobrushin_coefficient(&rect).is_err());
    }

    proptest! {
        /// The coefficient really is a TV contraction factor.
        #[test]
        fn contraction_inequality(raw in prop::collection::vec(1e-3f64..1.0, 4 * 4 + 8)) {
            let n = 4;
            let mut rows = Vec::new();
            for i in 0..n {
                let chunk = &raw[i * n..(i + 1) * n];
                let total: f64 = chunk.iter().sum();
                rows.extend(chunk.iter().map(|x| x / total));
            }
            let p = DMatrix::from_row_slice(n, n, &rows);
            let rho = dobrushin_coefficient(&p).unwrap();
            prop_assert!((0.0..=1.0).contains(&rho));

            let norm = |xs: &[f64]| {
                let s: f64 = xs.iter().sum();
                xs.iter().map(|x| x / s).collect::<Vec<_>>()
            };
            let mu = norm(&raw[n * n..n * n + 4]);
            let nu = norm(&raw[n * n + 4..]);
            let push = |v: &[f64]| {
                (0..n)
                    .map(|k| (0..n).map(|i| v[i] * p[(i, k)]).sum::<f64>())
                    .collect::<Vec<_>>()
            };
            let lhs = total_variation(&push(&mu), &push(&nu));
            let rhs = rho * total_variation(&mu, &nu);
            prop_assert!(lhs <= rhs + 1e-12, "tv {} > rho-bound {}", lhs, rhs);
        }
    }

    /// Weight direction 0 induces the idle policy, whose single-link
    /// kernel is ((1-p(1-d), p(1-d)), (d, 1-d)). At p = d = 1/2 that is
    /// ((0.75, 0.25), (0.5, 0.5)) with coefficient exactly 0.25 and
    /// regeneration bound 1 - d^B = 0.5.
    #[test]
    fn idle_policy_kernel_matches_hand_computation() {
        let (t, a) = single_type(0.5, 0.5);
        let report = verify_uniform_mixing(&t, &a, &[vec![0.0], vec![1.0]], 64).unwrap();
        assert_eq!(report.rhos[0], 0.25);
        assert_eq!(report.rho_bound, 0.5);
        assert!(report.rho <= report.rho_bound);
        // curve starts at the worst-start TV and contracts geometrically
        let tv0 = report.tv_curve[0];
        for (t_step, &tv) in report.tv_curve.iter().enumerate() {
            assert!(
                tv <= tv0 * report.rho.powi(t_step as i32) + 1e-12,
                "step {t_step}: {tv} above geometric envelope"
            );
        }
        assert!(*report.tv_curve.last().unwrap() <= 1e-12);
    }

    #[test]
    fn full_decoherence_mixes_in_one_step() {
        let (t, a) = single_type(0.5, 1.0);
        let report = verify_uniform_mixing(&t, &a, &[vec![0.0], vec![3.0]], 64).unwrap();
        assert_eq!(report.rho, 0.0);
        assert_eq!(report.rho_bound, 0.0);
    }

    #[test]
    fn mixing_bound_holds_across_served_directions() {
        let t = SwitchTopology::new(
            vec![vec![0], vec![1], vec![0, 1]],
            vec![0.9, 0.8, 0.7],
            1,
            vec![0.4, 0.6],
            vec![1, 1, 1],
        )
        .unwrap();
        let a = ArrivalSpec::new(
            vec![ArrivalDistribution::Bernoulli { p: 0.0 }; 3],
            vec![
                ArrivalDistribution::Bernoulli { p: 0.55 },
                ArrivalDistribution::Bernoulli { p: 0.45 },
            ],
        )
        .unwrap();
        let grid = vec![
            vec![0.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![1.0, 1.0, 1.0],
        ];
        let report = verify_uniform_mixing(&t, &a, &grid, 256).unwrap();
        assert_eq!(report.rhos.len(), 5);
        let max = report.rhos.iter().copied().fold(0.0, f64::max);
        assert_eq!(report.rho, max);
        assert!(report.rho <= report.rho_bound + 1e-12);
        // bound: 1 - 0.4 * 0.6
        assert_abs_diff_eq!(report.rho_bound, 0.76, epsilon = 1e-15);
    }

    #[test]
    fn mixing_rejects_periodic_streams() {
        let t = SwitchTopology::new(vec![vec![0]], vec![1.0], 1, vec![0.5], vec![1]).unwrap();
        let a = ArrivalSpec::new(
            vec![ArrivalDistribution::Bernoulli { p: 0.0 }],
            vec![ArrivalDistribution::Periodic {
                pattern: vec![1, 0],
            }],
        )
        .unwrap();
        assert!(matches!(
            verify_uniform_mixing(&t, &a, &[vec![0.0]], 64),
            Err(Error::PeriodicArrivals { .. })
        ));
    }

    /// With no fluid arrivals the queue drains at the gain-optimal
    /// rate. For one type at gamma = 1, B = 1, Bernoulli(1/2) LLEs the
    /// serve-on-sight rate is exactly 1/2, so the path is the clamped
    /// line max(0, 1 - t/2) and Euler reproduces it exactly between
    /// grid points.
    #[test]
    fn fluid_drains_linearly_without_arrivals() {
        let (t, a) = single_type(0.5, 0.5);
        let tables = MdpTables::build(&t, &a, 64).unwrap();
        let path = integrate_fluid(
            &tables,
            &[0.0],
            &[1.0],
            3.0,
            0.01,
            &FluidOptions::default(),
        )
        .unwrap();
        for state in &path {
            let expect = (1.0 - 0.5 * state.time).max(0.0);
            assert_abs_diff_eq!(state.qbar[0], expect, epsilon = 1e-9);
            // conservation: qbar - qbar0 - lambda t + dbar = 0
            let balance = state.qbar[0] - 1.0 - 0.0 * state.time + state.dbar[0];
            assert_abs_diff_eq!(balance, 0.0, epsilon = 1e-12);
        }
        // departures nondecreasing with slope at most B
        for w in path.windows(2) {
            let inc = w[1].dbar[0] - w[0].dbar[0];
            assert!(inc >= -1e-15);
            assert!(inc <= 1.0 * 0.01 + 1e-12);
        }
        assert_eq!(path.last().unwrap().qbar[0], 0.0);
    }

    /// On the boundary the departure rate is capped at the arrival
    /// rate: after draining, dbar grows at exactly lambda.
    #[test]
    fn fluid_boundary_caps_departures_at_arrivals() {
        let (t, a) = single_type(0.5, 0.5);
        let tables = MdpTables::build(&t, &a, 64).unwrap();
        let path = integrate_fluid(
            &tables,
            &[0.3],
            &[0.5],
            4.0,
            0.005,
            &FluidOptions::default(),
        )
        .unwrap();
        // drains at 0.5 - 0.3 = 0.2/time until t = 2.5
        for state in path.iter().filter(|s| s.time < 2.4) {
            assert_abs_diff_eq!(state.qbar[0], 0.5 - 0.2 * state.time, epsilon = 1e-9);
        }
        let late: Vec<&FluidState> = path.iter().filter(|s| s.time > 2.6).collect();
        for w in late.windows(2) {
            assert_abs_diff_eq!(w[1].qbar[0], 0.0, epsilon = 1e-12);
            let rate = (w[1].dbar[0] - w[0].dbar[0]) / (w[1].time - w[0].time);
            assert_abs_diff_eq!(rate, 0.3, epsilon = 1e-9);
        }
    }

    /// The potential of the integrated path stays below the drain
    /// envelope built from the uniform capacity slack.
    #[test]
    fn fluid_path_respects_drain_envelope() {
        let (t, a) = single_type(0.5, 0.5);
        let tables = MdpTables::build(&t, &a, 64).unwrap();
        let lambda = [0.3];
        let (eps, _, _) = crate::capacity::max_min_slack(&tables, &lambda).unwrap();
        assert!((eps - 0.2).abs() < 1e-8);
        let path = integrate_fluid(
            &tables,
            &lambda,
            &[0.5],
            4.0,
            0.005,
            &FluidOptions::default(),
        )
        .unwrap();
        let l0 = quadratic_potential(&[0.5]);
        for state in &path {
            let l = quadratic_potential(&state.qbar);
            let bound = drain_bound(l0, eps, 1, state.time);
            assert!(
                l <= bound + 1e-9,
                "t {}: potential {} above envelope {}",
                state.time,
                l,
                bound
            );
        }
    }

    fn shared_link_pair() -> (SwitchTopology, ArrivalSpec) {
        // two types competing for link 0; type 1 also needs link 1
        let t = SwitchTopology::new(
            vec![vec![0], vec![0, 1]],
            vec![1.0, 1.0],
            1,
            vec![0.5, 0.5],
            vec![1, 1],
        )
        .unwrap();
        let a = ArrivalSpec::new(
            vec![ArrivalDistribution::Bernoulli { p: 0.0 }; 2],
            vec![
                ArrivalDistribution::Bernoulli { p: 0.6 },
                ArrivalDistribution::Bernoulli { p: 0.5 },
            ],
        )
        .unwrap();
        (t, a)
    }

    /// Competing types make the optimal policy switch as the queue
    /// direction rotates; a coarse step misplaces the switch and the
    /// half-step check must catch it.
    #[test]
    fn halving_check_flags_coarse_steps() {
        let (t, a) = shared_link_pair();
        let tables = MdpTables::build(&t, &a, 64).unwrap();
        let tight = FluidOptions {
            resolve_every: 10,
            halving_tolerance: 1e-7,
        };
        let err = integrate_fluid(&tables, &[0.0, 0.0], &[0.2, 1.0], 4.0, 0.25, &tight)
            .unwrap_err();
        assert!(matches!(err, Error::DtTooCoarse { .. }));

        let fine = integrate_fluid(
            &tables,
            &[0.0, 0.0],
            &[0.2, 1.0],
            4.0,
            0.004,
            &FluidOptions::default(),
        );
        assert!(fine.is_ok());
    }

    /// Along the fluid path the weighted departure rate dominates every
    /// fixed policy's weighted service rate (checked at re-solve steps,
    /// where the cached rates are exactly gain-optimal for the current
    /// weights). Boundary clamping perturbs a step by at most
    /// R * B^2 * dt in the weighted sum.
    #[test]
    fn fluid_departures_dominate_fixed_policies() {
        let (t, a) = shared_link_pair();
        let tables = MdpTables::build(&t, &a, 64).unwrap();
        let dt = 0.005;
        let path = integrate_fluid(
            &tables,
            &[0.0, 0.0],
            &[0.2, 1.0],
            3.0,
            dt,
            &FluidOptions::default(),
        )
        .unwrap();
        let opts = AreOptions::default();
        let fixed: Vec<Vec<f64>> = [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]
            .iter()
            .map(|q| {
                let sol = solve_average_reward(&tables, q, &opts, None).unwrap();
                evaluate_policy(&tables, &sol.policy).unwrap().service_rates
            })
            .collect();
        let slack = 2.0 * 1.0 * dt + 1e-7;
        for k in (0..path.len() - 1).step_by(10) {
            let here = &path[k];
            let next = &path[k + 1];
            let lhs: f64 = (0..2)
                .map(|r| here.qbar[r] * (next.dbar[r] - here.dbar[r]) / dt)
                .sum();
            for rates in &fixed {
                let rhs: f64 = (0..2).map(|r| here.qbar[r] * rates[r]).sum();
                assert!(
                    lhs >= rhs - slack,
                    "t {}: weighted departures {} below fixed policy {}",
                    here.time,
                    lhs,
                    rhs
                );
            }
        }
    }

    fn synthetic_trace(rows: Vec<TraceRow>) -> SimTrace {
        SimTrace {
            seed: 0,
            stride: 1,
            horizon: rows.len() as u64,
            rows,
            final_state: SwitchState {
                q: vec![0],
                z: vec![0],
            },
            departures_requests: vec![0],
            departures_lles: vec![0],
            arrivals_requests: vec![0],
            arrivals_links: vec![0],
        }
    }

    fn row(t: u64, q: Vec<u64>) -> TraceRow {
        TraceRow {
            t,
            q,
            z: vec![0],
            n: vec![0],
            nhat: vec![0],
            sigma: vec![0],
        }
    }

    #[test]
    fn drift_of_constant_trace_is_zero() {
        let trace = synthetic_trace((0..100).map(|t| row(t, vec![7, 3])).collect());
        let report = lyapunov_drift(&trace, 25);
        assert_eq!(report.slopes.len(), 4);
        assert!(report.slopes.iter().all(|s| *s == 0.0));
        assert_eq!(report.median_slope, 0.0);
        assert_eq!(report.positive_windows, 0);
        assert_eq!(report.negative_windows, 0);
    }

    /// Pure arrivals at rate 1 grow L = t^2 / 2; the least-squares
    /// slope over a uniform window equals the derivative at the window
    /// midpoint exactly (quadratic regressed on a symmetric grid).
    #[test]
    fn drift_of_pure_growth_matches_quadratic_derivative() {
        let trace = synthetic_trace((0..200).map(|t| row(t, vec![t])).collect());
        let report = lyapunov_drift(&trace, 50);
        assert_eq!(report.slopes.len(), 4);
        for (k, slope) in report.slopes.iter().enumerate() {
            let midpoint = 50.0 * k as f64 + 24.5;
            assert_abs_diff_eq!(*slope, midpoint, epsilon = 1e-9);
        }
        assert_eq!(report.positive_windows, 4);
    }

    #[test]
    fn median_handles_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    /// Deterministic arrivals and service make the rescaled path sit on
    /// the fluid line exactly, at every scale.
    #[test]
    fn deterministic_system_has_zero_scaling_error() {
        let t = SwitchTopology::new(vec![vec![0]], vec![1.0], 1, vec![0.5], vec![1]).unwrap();
        let a = ArrivalSpec::new(
            vec![ArrivalDistribution::Periodic { pattern: vec![1] }],
            vec![ArrivalDistribution::Periodic { pattern: vec![1] }],
        )
        .unwrap();
        let report =
            fluid_convergence_check(&t, &a, &[0.5], &[2.0, 4.0], 1.0, 0.25, &[11, 12], 64)
                .unwrap();
        assert_eq!(report.len(), 2);
        for scale in &report {
            assert_eq!(scale.sup_error, 0.0);
            assert!(scale.max_scaled_lle <= 1.0 / scale.scale);
        }
        assert!(report[1].sup_error <= report[0].sup_error);
    }

    /// Stochastic smoke: rescaled noise shrinks with the scale on a
    /// fast-mixing single-type system.
    #[test]
    fn scaling_error_stays_bounded_on_stochastic_system() {
        let (t, a) = single_type(0.5, 0.5);
        // no request arrivals: fluid drains from 0.4 at rate 1/2
        let seeds: Vec<u64> = (0..6).collect();
        let report =
            fluid_convergence_check(&t, &a, &[0.4], &[8.0, 64.0], 0.8, 0.05, &seeds, 64).unwrap();
        assert!(report[0].sup_error.is_finite());
        // c = 64 concentrates near the fluid line; c = 8 need not
        assert!(
            report[1].sup_error < report[0].sup_error + 0.05,
            "errors {} vs {}",
            report[0].sup_error,
            report[1].sup_error
        );
        for scale in &report {
            assert!(scale.max_scaled_lle <= 1.0 / scale.scale + 1e-15);
        }
    }

    #[test]
    fn fluid_rejects_bad_inputs() {
        let (t, a) = single_type(0.5, 0.5);
        let tables = MdpTables::build(&t, &a, 64).unwrap();
        let opts = FluidOptions::default();
        assert!(integrate_fluid(&tables, &[0.1], &[1.0], 1.0, 0.0, &opts).is_err());
        assert!(integrate_fluid(&tables, &[-0.1], &[1.0], 1.0, 0.1, &opts).is_err());
        assert!(integrate_fluid(&tables, &[0.1, 0.2], &[1.0], 1.0, 0.1, &opts).is_err());
        assert!(integrate_fluid(&tables, &[0.1], &[1.0], f64::NAN, 0.1, &opts).is_err());
    }
}
