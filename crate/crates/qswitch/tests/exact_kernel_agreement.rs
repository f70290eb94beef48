//! The exact chain machinery against long simulations and against
//! itself: empirical occupancies must match the stationary law of the
//! one-slot kernel, and the two average-reward solver routes must agree
//! wherever both apply.

use qswitch::analysis::dobrushin_coefficient;
use qswitch::dynamics::{
    pre_arrival_matrix, run, DeterministicPolicyTable, SwitchState,
};
use qswitch::mdp::{
    evaluate_policy, policy_iteration, solve_average_reward, stationary_distribution, AreOptions,
    MdpTables, PiOptions,
};
use qswitch::model::{ArrivalDistribution, ArrivalSpec, Schedule, SwitchTopology};
use qswitch::rng::SlotRng;

fn fork_instance() -> (SwitchTopology, ArrivalSpec) {
    let topology = SwitchTopology::new(
        vec![vec![0], vec![1], vec![0, 1]],
        vec![1.0, 0.8, 0.9],
        1,
        vec![0.4, 0.3],
        vec![1, 1, 1],
    )
    .unwrap();
    let arrivals = ArrivalSpec::new(
        vec![
            ArrivalDistribution::Bernoulli { p: 0.3 },
            ArrivalDistribution::Bernoulli { p: 0.2 },
            ArrivalDistribution::Bernoulli { p: 0.25 },
        ],
        vec![
            ArrivalDistribution::Bernoulli { p: 0.7 },
            ArrivalDistribution::Bernoulli { p: 0.6 },
        ],
    )
    .unwrap();
    (topology, arrivals)
}

fn clocked_instance() -> (SwitchTopology, ArrivalSpec) {
    let topology = SwitchTopology::new(
        vec![vec![0], vec![0, 1]],
        vec![1.0, 1.0],
        2,
        vec![0.5, 0.4],
        vec![2, 2],
    )
    .unwrap();
    let arrivals = ArrivalSpec::new(
        vec![
            ArrivalDistribution::PhasedBernoulli {
                probs: vec![0.6, 0.0, 0.2],
            },
            ArrivalDistribution::Bernoulli { p: 0.15 },
        ],
        vec![
            ArrivalDistribution::Periodic {
                pattern: vec![1, 0, 1],
            },
            ArrivalDistribution::Bernoulli { p: 0.5 },
        ],
    )
    .unwrap();
    (topology, arrivals)
}

/// Drive a fixed decision table through the simulator.
struct TableChooser {
    table: DeterministicPolicyTable,
    schedules: Vec<Schedule>,
    space: qswitch::dynamics::StateSpace,
    phases: u64,
}

impl qswitch::dynamics::ScheduleChooser for TableChooser {
    fn choose(
        &mut self,
        _state: &SwitchState,
        w: &[u32],
        slot: u64,
        _rng: &SlotRng,
    ) -> qswitch::Result<Schedule> {
        let phase = (slot % self.phases) as usize;
        let idx = phase * self.space.size + self.space.rank(w);
        Ok(self.schedules[self.table.actions[idx]].clone())
    }
}

/// Empirical pre-arrival occupancy over 200k slots versus the exact
/// stationary law of the same policy's kernel. The error bars come from
/// the kernel itself: lag-k autocorrelations are bounded by rho^k with
/// rho the Dobrushin coefficient, so the autocorrelation time is at
/// most (1 + rho)/(1 - rho).
#[test]
fn long_run_occupancy_matches_the_kernel_law() {
    let (topology, arrivals) = fork_instance();
    let tables = MdpTables::build(&topology, &arrivals, 1024).unwrap();
    let sol =
        solve_average_reward(&tables, &[2.0, 1.0, 3.0], &AreOptions::default(), None).unwrap();

    let kernel = pre_arrival_matrix(&tables.chain, &sol.policy).unwrap();
    let law = stationary_distribution(&kernel).unwrap();
    let rho = dobrushin_coefficient(&kernel).unwrap();
    assert!(rho < 1.0, "family kernel must actually mix, got rho = {rho}");

    let slots = 200_000u64;
    let mut chooser = TableChooser {
        table: sol.policy,
        schedules: tables.chain.schedules.clone(),
        space: tables.chain.space.clone(),
        phases: tables.chain.phases as u64,
    };
    let mut counts = vec![0u64; tables.chain.space.size];
    run(
        &topology,
        &arrivals,
        SwitchState::zeros(&topology),
        slots,
        4242,
        &mut chooser,
        |_, state, _| {
            counts[tables.chain.space.rank(&state.z)] += 1;
        },
    )
    .unwrap();

    let iact = (1.0 + rho) / (1.0 - rho);
    for (rank, &hits) in counts.iter().enumerate() {
        let freq = hits as f64 / slots as f64;
        let p = law[rank];
        let sigma = (p * (1.0 - p) * iact / slots as f64).sqrt();
        assert!(
            (freq - p).abs() <= 4.0 * sigma.max(1e-9),
            "state {:?}: empirical {freq} vs exact {p} (sigma {sigma:.2e})",
            tables.chain.space.unrank(rank)
        );
    }
}

/// Value iteration and Howard policy iteration are independent routes
/// to the same gain; on the phased instance the product chain makes the
/// problem genuinely time-inhomogeneous.
#[test]
fn solver_routes_agree_on_fixed_instances() {
    for (topology, arrivals) in [fork_instance(), clocked_instance()] {
        let tables = MdpTables::build(&topology, &arrivals, 1024).unwrap();
        let weights: Vec<f64> = (0..topology.num_requests())
            .map(|r| 1.0 + r as f64)
            .collect();
        let vi = solve_average_reward(&tables, &weights, &AreOptions::default(), None).unwrap();
        let pi = policy_iteration(&tables, &weights, &PiOptions::default()).unwrap();
        assert!(
            (vi.gain - pi.gain).abs() <= 1e-8,
            "gain mismatch: {} vs {}",
            vi.gain,
            pi.gain
        );
        assert!(vi.residual < 1e-9, "vi residual {}", vi.residual);
        assert!(pi.residual < 1e-9, "pi residual {}", pi.residual);

        // third route: the stationary reward rate of either policy
        // equals the optimal gain
        let vi_rate = evaluate_policy(&tables, &vi.policy)
            .unwrap()
            .reward_rate(&weights);
        let pi_rate = evaluate_policy(&tables, &pi.policy)
            .unwrap()
            .reward_rate(&weights);
        assert!(
            (vi_rate - vi.gain).abs() <= 1e-9,
            "stationary rate {vi_rate} vs gain {}",
            vi.gain
        );
        assert!(
            (pi_rate - pi.gain).abs() <= 1e-9,
            "stationary rate {pi_rate} vs gain {}",
            pi.gain
        );
    }
}

/// The kernel rows are probability distributions, for i.i.d. and for
/// phased arrivals alike.
#[test]
fn kernels_are_stochastic() {
    for (topology, arrivals) in [fork_instance(), clocked_instance()] {
        let tables = MdpTables::build(&topology, &arrivals, 1024).unwrap();
        let sol = solve_average_reward(
            &tables,
            &vec![1.0; topology.num_requests()],
            &AreOptions::default(),
            None,
        )
        .unwrap();
        let kernel = pre_arrival_matrix(&tables.chain, &sol.policy).unwrap();
        for i in 0..kernel.nrows() {
            let sum: f64 = (0..kernel.ncols()).map(|j| kernel[(i, j)]).sum();
            assert!((sum - 1.0).abs() < 1e-12, "row {i} sums to {sum}");
            for j in 0..kernel.ncols() {
                assert!(kernel[(i, j)] >= 0.0);
            }
        }
    }
}
