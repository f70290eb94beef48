//! Capacity-region membership through occupation measures.
//!
//! A rate vector is sustainable iff some request-agnostic policy's
//! stationary service rates dominate it. Over the finite LLE decision
//! chain that is a linear program in the occupation measure
//! `x(state, schedule)`: probability mass one, flow balance under the
//! induced kernel, and service-rate constraints. [`max_min_slack`]
//! maximizes the uniform slack `t` with service `>= lambda_r + t`; the
//! sign of the optimum classifies the point, and conditioning `x` on
//! its state marginal recovers an explicit witness policy.
//!
//! The support function of the region is computed twice on purpose:
//! once as the gain of the average-reward solver and once as the same
//! occupation LP with a linear objective. The two routes share nothing
//! but the kernel tables, so their agreement is a real cross-check of
//! both.

use crate::dynamics::RandomizedPolicyTable;
use crate::error::{Error, Result};
use crate::mdp::{solve_average_reward, AreOptions, MdpTables};
use crate::simplex::{solve_standard, LpSolution, StandardLp};

/// Region classification at numeric tolerance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CapacityVerdict {
    /// Strictly sustainable: positive slack.
    InsideStrict,
    /// On the boundary within tolerance.
    Boundary,
    /// Not sustainable: negative slack.
    Outside,
}

/// Result of a membership test.
pub struct CapacityQuery {
    pub lambda: Vec<f64>,
    pub epsilon: f64,
    /// Optimal uniform slack `t`: the service margin of the best
    /// agnostic policy.
    pub slack: f64,
    pub verdict: CapacityVerdict,
    /// Whether `slack >= epsilon` (the epsilon-deep membership test).
    pub meets_epsilon: bool,
    /// Maximizing randomized policy over decision states.
    pub witness: RandomizedPolicyTable,
    /// Service rates the optimizer attributes to the witness.
    pub witness_rates: Vec<f64>,
}

const BOUNDARY_TOL: f64 = 1e-9;

/// Cap on tableau entries so a mis-sized query fails fast instead of
/// allocating gigabytes.
const MAX_TABLEAU_ENTRIES: usize = 25_000_000;

/// Classify `lambda` and return slack, verdict, and witness policy.
pub fn capacity_query(
    tables: &MdpTables,
    lambda: &[f64],
    epsilon: f64,
) -> Result<CapacityQuery> {
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(Error::Config(format!(
            "epsilon must be finite and nonnegative, got {epsilon}"
        )));
    }
    let (slack, witness, witness_rates) = max_min_slack(tables, lambda)?;
    let verdict = if slack > BOUNDARY_TOL {
        CapacityVerdict::InsideStrict
    } else if slack < -BOUNDARY_TOL {
        CapacityVerdict::Outside
    } else {
        CapacityVerdict::Boundary
    };
    Ok(CapacityQuery {
        lambda: lambda.to_vec(),
        epsilon,
        slack,
        verdict,
        meets_epsilon: slack >= epsilon,
        witness,
        witness_rates,
    })
}

/// Maximize the uniform service slack over agnostic policies:
/// `max t` over occupation measures with
/// `service_r(x) >= lambda_r + t` for every request type. Returns the
/// optimal slack, the witness policy, and the witness's service rates.
pub fn max_min_slack(
    tables: &MdpTables,
    lambda: &[f64],
) -> Result<(f64, RandomizedPolicyTable, Vec<f64>)> {
    let chain = &tables.chain;
    let r_count = chain.topology.num_requests();
    if lambda.len() != r_count {
        return Err(Error::Config(format!(
            "{} rates for {} request types",
            lambda.len(),
            r_count
        )));
    }
    if let Some(bad) = lambda.iter().find(|x| !x.is_finite() || **x < 0.0) {
        return Err(Error::Config(format!(
            "arrival rates must be finite and nonnegative, got {bad}"
        )));
    }

    let occ = OccupationProgram::build(tables)?;
    // variables: [x..., t_plus, t_minus, surplus_0..surplus_{R-1}]
    let n_x = occ.num_vars;
    let n = n_x + 2 + r_count;
    let mut rows = occ.balance_rows(n);
    let mut rhs = vec![0.0; rows.len()];
    // normalization
    let mut norm = vec![0.0; n];
    norm[..n_x].fill(1.0);
    rows.push(norm);
    rhs.push(1.0);
    // service_r(x) - t - surplus_r = lambda_r
    for r in 0..r_count {
        let mut row = vec![0.0; n];
        for (j, &(_, _, k)) in occ.vars.iter().enumerate() {
            let coeff = tables.service_coeff(k)[r];
            if coeff != 0.0 {
                row[j] = coeff;
            }
        }
        row[n_x] = -1.0;
        row[n_x + 1] = 1.0;
        row[n_x + 2 + r] = -1.0;
        rows.push(row);
        rhs.push(lambda[r]);
    }
    let mut objective = vec![0.0; n];
    objective[n_x] = -1.0;
    objective[n_x + 1] = 1.0;

    check_size(rows.len(), n)?;
    let sol = solve_standard(&StandardLp {
        objective,
        rows,
        rhs,
    })?;
    let slack = sol.x[n_x] - sol.x[n_x + 1];
    let witness = occ.witness(tables, &sol);
    let rates = occ.rates(tables, &sol);
    Ok((slack, witness, rates))
}

/// Largest achievable weighted service rate in direction `q`, computed
/// by the average-reward solver.
pub fn support_function(tables: &MdpTables, q: &[f64]) -> Result<f64> {
    Ok(solve_average_reward(tables, q, &AreOptions::default(), None)?.gain)
}

/// The same support value from the occupation-measure program. Kept
/// separate from [`support_function`] so the two derivations stay
/// independent.
pub fn support_function_lp(tables: &MdpTables, q: &[f64]) -> Result<f64> {
    let chain = &tables.chain;
    let r_count = chain.topology.num_requests();
    if q.len() != r_count {
        return Err(Error::Config(format!(
            "{} weights for {} request types",
            q.len(),
            r_count
        )));
    }
    if let Some(bad) = q.iter().find(|x| !x.is_finite() || **x < 0.0) {
        return Err(Error::Config(format!(
            "directions must be finite and nonnegative, got {bad}"
        )));
    }
    let occ = OccupationProgram::build(tables)?;
    let n = occ.num_vars;
    let mut rows = occ.balance_rows(n);
    let mut rhs = vec![0.0; rows.len()];
    rows.push(vec![1.0; n]);
    rhs.push(1.0);
    let rewards = tables.rewards(q);
    let objective: Vec<f64> = occ.vars.iter().map(|&(_, _, k)| -rewards[k]).collect();
    check_size(rows.len(), n)?;
    let sol = solve_standard(&StandardLp {
        objective,
        rows,
        rhs,
    })?;
    Ok(-sol.objective)
}

/// Evenly spread directions on the probability simplex: all length-`r`
/// nonnegative integer vectors summing to `m`, scaled by `1/m`.
pub fn direction_grid(r: usize, m: u32) -> Vec<Vec<f64>> {
    fn rec(r: usize, left: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<f64>>, m: u32) {
        if r == 1 {
            prefix.push(left);
            out.push(prefix.iter().map(|&k| k as f64 / m as f64).collect());
            prefix.pop();
            return;
        }
        for k in 0..=left {
            prefix.push(k);
            rec(r - 1, left - k, prefix, out, m);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if r == 0 || m == 0 {
        return out;
    }
    rec(r, m, &mut Vec::new(), &mut out, m);
    out
}

/// Shared occupation-measure scaffolding: variable enumeration and
/// flow-balance rows over the decision chain.
struct OccupationProgram {
    /// (decision state, feasible slot, schedule index) per variable.
    vars: Vec<(usize, usize, usize)>,
    num_vars: usize,
    /// `var_base[s]..var_base[s] + feasible(s).len()` are state `s`'s
    /// variables.
    var_base: Vec<usize>,
    /// Dense kernel rows per variable over decision states.
    kernel: Vec<Vec<f64>>,
    states: usize,
}

impl OccupationProgram {
    fn build(tables: &MdpTables) -> Result<Self> {
        let chain = &tables.chain;
        let s = chain.space.size;
        let states = chain.decision_states();
        let mut vars = Vec::new();
        let mut var_base = Vec::with_capacity(states);
        for phase in 0..chain.phases {
            for w_rank in 0..s {
                var_base.push(vars.len());
                for (i, &k) in chain.feasible[w_rank].iter().enumerate() {
                    vars.push((phase * s + w_rank, i, k));
                }
            }
        }
        let num_vars = vars.len();
        let mut kernel = Vec::with_capacity(num_vars);
        let mut row_buf = vec![0.0; s];
        for &(state, i, _) in &vars {
            let phase = state / s;
            let w_rank = state % s;
            let next_phase = (phase + 1) % chain.phases;
            let y_rank = tables.consumed_ranks(w_rank)[i];
            let y = chain.space.unrank(y_rank);
            chain.composed_row_into(next_phase, &y, &mut row_buf);
            let mut dense = vec![0.0; states];
            for (w2, &p) in row_buf.iter().enumerate() {
                if p != 0.0 {
                    dense[next_phase * s + w2] = p;
                }
            }
            kernel.push(dense);
        }
        Ok(OccupationProgram {
            vars,
            num_vars,
            var_base,
            kernel,
            states,
        })
    }

    /// Flow-balance rows (one per decision state, last dropped as
    /// redundant with normalization), padded to `n` columns.
    fn balance_rows(&self, n: usize) -> Vec<Vec<f64>> {
        let mut rows = Vec::with_capacity(self.states - 1);
        for target in 0..self.states - 1 {
            let mut row = vec![0.0; n];
            for (j, &(state, _, _)) in self.vars.iter().enumerate() {
                if state == target {
                    row[j] += 1.0;
                }
                let p = self.kernel[j][target];
                if p != 0.0 {
                    row[j] -= p;
                }
            }
            rows.push(row);
        }
        rows
    }

    /// Condition the occupation measure on its state marginal.
    /// States that carry no mass idle.
    fn witness(&self, tables: &MdpTables, sol: &LpSolution) -> RandomizedPolicyTable {
        let chain = &tables.chain;
        let s = chain.space.size;
        let mut rows = Vec::with_capacity(self.states);
        for state in 0..self.states {
            let base = self.var_base[state];
            let w_rank = state % s;
            let count = chain.feasible[w_rank].len();
            let mass: f64 = (0..count).map(|i| sol.x[base + i]).sum();
            if mass <= 1e-12 {
                rows.push(Vec::new());
                continue;
            }
            let mut row = Vec::new();
            for i in 0..count {
                let p = sol.x[base + i] / mass;
                if p > 0.0 {
                    row.push((chain.feasible[w_rank][i], p));
                }
            }
            rows.push(row);
        }
        RandomizedPolicyTable::new(chain.space.clone(), chain.phases, rows)
    }

    /// Service rates the measure claims.
    fn rates(&self, tables: &MdpTables, sol: &LpSolution) -> Vec<f64> {
        let r_count = tables.chain.topology.num_requests();
        let mut rates = vec![0.0; r_count];
        for (j, &(_, _, k)) in self.vars.iter().enumerate() {
            let mass = sol.x[j];
            if mass == 0.0 {
                continue;
            }
            for (acc, &c) in rates.iter_mut().zip(tables.service_coeff(k)) {
                *acc += mass * c;
            }
        }
        rates
    }
}

fn check_size(rows: usize, cols: usize) -> Result<()> {
    let entries = (rows + 2).saturating_mul(cols + rows + 1);
    if entries > MAX_TABLEAU_ENTRIES {
        return Err(Error::Lp(format!(
            "occupation program too large for the dense solver \
             ({rows} rows x {cols} columns); reduce the state cap"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::evaluate_policy;
    use crate::model::{ArrivalDistribution, ArrivalSpec, SwitchTopology};
    use crate::rng::{SlotRng, Stream};

    fn single_type(p: f64, d: f64) -> MdpTables {
        let t = SwitchTopology::new(vec![vec![0]], vec![1.0], 1, vec![d], vec![1]).unwrap();
        let a = ArrivalSpec::new(
            vec![ArrivalDistribution::Bernoulli { p: 0.0 }],
            vec![ArrivalDistribution::Bernoulli { p }],
        )
        .unwrap();
        MdpTables::build(&t, &a, 4096).unwrap()
    }

    fn fork() -> MdpTables {
        let t = SwitchTopology::new(
            vec![vec![0], vec![1], vec![0, 1]],
            vec![0.9, 0.8, 0.7],
            1,
            vec![0.4, 0.6],
            vec![1, 1, 1],
        )
        .unwrap();
        let a = ArrivalSpec::new(
            vec![
                ArrivalDistribution::Bernoulli { p: 0.0 },
                ArrivalDistribution::Bernoulli { p: 0.0 },
                ArrivalDistribution::Bernoulli { p: 0.0 },
            ],
            vec![
                ArrivalDistribution::Bernoulli { p: 0.55 },
                ArrivalDistribution::Bernoulli { p: 0.45 },
            ],
        )
        .unwrap();
        MdpTables::build(&t, &a, 4096).unwrap()
    }

    /// Closed-form boundary: one type, gamma = 1, Bernoulli(p) LLEs,
    /// B = 1. Serving on sight wastes nothing (the buffer caps stacked
    /// arrivals), so the best service rate is exactly p, independent of
    /// decoherence.
    #[test]
    fn single_type_boundary_is_arrival_rate() {
        let tables = single_type(0.35, 0.4);
        let (slack, witness, rates) = max_min_slack(&tables, &[0.0]).unwrap();
        assert!((slack - 0.35).abs() < 1e-8, "slack {slack}");
        assert!((rates[0] - 0.35).abs() < 1e-8);
        let eval = evaluate_policy(&tables, &witness).unwrap();
        assert!((eval.service_rates[0] - 0.35).abs() < 1e-8);

        let q = capacity_query(&tables, &[0.2], 0.0).unwrap();
        assert_eq!(q.verdict, CapacityVerdict::InsideStrict);
        assert!((q.slack - 0.15).abs() < 1e-8);
        assert!(q.meets_epsilon);

        let q = capacity_query(&tables, &[0.35], 0.0).unwrap();
        assert_eq!(q.verdict, CapacityVerdict::Boundary);

        let q = capacity_query(&tables, &[0.5], 0.0).unwrap();
        assert_eq!(q.verdict, CapacityVerdict::Outside);
        assert!((q.slack + 0.15).abs() < 1e-8);
    }

    /// Deterministic-periodic streams: pattern [1, 0] with full
    /// decoherence serves at most every other slot, so the boundary
    /// sits at rate 1/2.
    #[test]
    fn periodic_pattern_boundary() {
        let t = SwitchTopology::new(vec![vec![0]], vec![1.0], 1, vec![1.0], vec![1]).unwrap();
        let a = ArrivalSpec::new(
            vec![ArrivalDistribution::Bernoulli { p: 0.0 }],
            vec![ArrivalDistribution::Periodic {
                pattern: vec![1, 0],
            }],
        )
        .unwrap();
        let tables = MdpTables::build(&t, &a, 4096).unwrap();
        let (slack, _, _) = max_min_slack(&tables, &[0.3]).unwrap();
        assert!((slack - 0.2).abs() < 1e-8, "slack {slack}");
    }

    /// The two support-function routes must agree in every direction.
    #[test]
    fn support_function_routes_agree() {
        let tables = fork();
        let rng = SlotRng::new(0xCAFE);
        for case in 0..25u64 {
            let q: Vec<f64> = (0..3)
                .map(|r| rng.unit(Stream::Policy, case, r, 0) * 3.0)
                .collect();
            let via_rvi = support_function(&tables, &q).unwrap();
            let via_lp = support_function_lp(&tables, &q).unwrap();
            assert!(
                (via_rvi - via_lp).abs() < 1e-7,
                "case {case} q {q:?}: rvi {via_rvi} lp {via_lp}"
            );
        }
        assert_eq!(support_function(&tables, &[0.0, 0.0, 0.0]).unwrap(), 0.0);
    }

    /// Membership duality: any sustainable rate vector satisfies
    /// `q . lambda <= support(q)` for every nonnegative direction.
    #[test]
    fn sustainable_rates_respect_support_hyperplanes() {
        let tables = fork();
        let lambda = [0.2, 0.15, 0.1];
        let (slack, _, _) = max_min_slack(&tables, &lambda).unwrap();
        assert!(slack > 0.0, "test point must be inside, slack {slack}");
        let rng = SlotRng::new(0xD0D0);
        for case in 0..20u64 {
            let q: Vec<f64> = (0..3)
                .map(|r| rng.unit(Stream::Policy, case, r, 1) * 2.0)
                .collect();
            let support = support_function(&tables, &q).unwrap();
            let dot: f64 = q.iter().zip(&lambda).map(|(a, b)| a * b).sum();
            assert!(
                dot <= support + 1e-7,
                "case {case}: q.lambda {dot} > support {support}"
            );
        }
    }

    /// The witness policy must actually deliver the rates the LP
    /// claims, under the exact stationary analysis.
    #[test]
    fn witness_policy_reproduces_lp_rates() {
        let tables = fork();
        let (slack, witness, rates) = max_min_slack(&tables, &[0.25, 0.2, 0.05]).unwrap();
        let eval = evaluate_policy(&tables, &witness).unwrap();
        for r in 0..3 {
            assert!(
                (eval.service_rates[r] - rates[r]).abs() < 1e-8,
                "type {r}: stationary {} vs lp {}",
                eval.service_rates[r],
                rates[r]
            );
            assert!(rates[r] + 1e-9 >= 0.0);
        }
        // slack consistency: min_r (rate - lambda) == slack
        let min_gap = (0..3)
            .map(|r| rates[r] - [0.25, 0.2, 0.05][r])
            .fold(f64::INFINITY, f64::min);
        assert!((min_gap - slack).abs() < 1e-8);
    }

    /// Removing demand can only help.
    #[test]
    fn slack_is_monotone_in_lambda() {
        let tables = fork();
        let (base, _, _) = max_min_slack(&tables, &[0.3, 0.25, 0.08]).unwrap();
        for r in 0..3 {
            let mut reduced = [0.3, 0.25, 0.08];
            reduced[r] *= 0.5;
            let (better, _, _) = max_min_slack(&tables, &reduced).unwrap();
            assert!(
                better >= base - 1e-9,
                "type {r}: slack fell from {base} to {better}"
            );
        }
    }

    #[test]
    fn direction_grid_covers_simplex() {
        let grid = direction_grid(3, 4);
        // C(4 + 2, 2) = 15 compositions
        assert_eq!(grid.len(), 15);
        for q in &grid {
            let total: f64 = q.iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert!(q.iter().all(|&x| x >= 0.0));
        }
        assert!(direction_grid(0, 4).is_empty());
    }

    #[test]
    fn rejects_bad_inputs() {
        let tables = single_type(0.5, 0.5);
        assert!(max_min_slack(&tables, &[-0.1]).is_err());
        assert!(max_min_slack(&tables, &[0.1, 0.2]).is_err());
        assert!(capacity_query(&tables, &[0.1], -1.0).is_err());
        assert!(support_function_lp(&tables, &[f64::INFINITY]).is_err());
    }
}
