//! Exact chain machinery on the LLE state space.
//!
//! The LLE counts of one slot live in `Z = prod_l {0..=B}`. All one-slot
//! randomness factors per link, so kernels are stored as per-link
//! `(B+1) x (B+1)` tables and applied as tensor mode products instead of
//! dense `|Z| x |Z|` matrices:
//!
//! * arrival tables `A_l^phase[z][w]`: capped arrivals `w = min(z + a, B)`;
//! * survival tables `S_l[y][z']`: binomial thinning with survival
//!   probability `1 - d_l`;
//! * composed tables `C_l^phase[y][w']`: survive, then receive the next
//!   slot's arrivals.
//!
//! Deterministic-periodic streams make the chain time-inhomogeneous; the
//! product construction (state x phase) restores homogeneity, and
//! `phases == 1` collapses to the plain chain.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::{enumerate_schedules, ArrivalSpec, Schedule, SwitchTopology};
use crate::model::ArrivalDistribution;

/// Mixed-radix index over `prod_l {0..=B}`.
#[derive(Debug, Clone)]
pub struct StateSpace {
    pub num_links: usize,
    pub buffer: u32,
    pub size: usize,
    strides: Vec<usize>,
}

impl StateSpace {
    pub fn new(num_links: usize, buffer: u32, cap: usize) -> Result<Self> {
        let m = buffer as usize + 1;
        let mut size: usize = 1;
        let mut strides = Vec::with_capacity(num_links);
        for _ in 0..num_links {
            strides.push(size);
            size = size.checked_mul(m).ok_or(Error::StateSpaceTooLarge {
                size: usize::MAX,
                cap,
            })?;
            if size > cap {
                return Err(Error::StateSpaceTooLarge { size, cap });
            }
        }
        Ok(StateSpace {
            num_links,
            buffer,
            size,
            strides,
        })
    }

    #[inline]
    pub fn rank(&self, z: &[u32]) -> usize {
        let mut idx = 0;
        for (l, &count) in z.iter().enumerate() {
            debug_assert!(count <= self.buffer);
            idx += count as usize * self.strides[l];
        }
        idx
    }

    pub fn unrank(&self, mut idx: usize) -> Vec<u32> {
        let m = self.buffer as usize + 1;
        let mut z = vec![0u32; self.num_links];
        for entry in z.iter_mut() {
            *entry = (idx % m) as u32;
            idx /= m;
        }
        z
    }
}

/// Exact kernels and schedule bookkeeping for one (topology, arrivals)
/// pair.
pub struct LleChain {
    pub topology: SwitchTopology,
    pub space: StateSpace,
    /// Number of arrival phases of the link streams (1 when i.i.d.).
    pub phases: usize,
    /// Full schedule box, lexicographically ascending; index 0 is idle.
    pub schedules: Vec<Schedule>,
    /// Feasible schedule indices per LLE-state rank.
    pub feasible: Vec<Vec<usize>>,
    /// arrival_tables[phase][link]: (B+1)^2 row-major [from][to].
    arrival_tables: Vec<Vec<Vec<f64>>>,
    /// survival_tables[link]: (B+1)^2 row-major [from][to].
    survival_tables: Vec<Vec<f64>>,
    /// composed_tables[next_phase][link]: survive then arrive.
    composed_tables: Vec<Vec<Vec<f64>>>,
}

impl LleChain {
    pub fn build(
        topology: &SwitchTopology,
        arrivals: &ArrivalSpec,
        state_cap: usize,
    ) -> Result<Self> {
        arrivals.check_shape(topology.num_requests(), topology.num_links())?;
        let phases = arrivals.link_period();
        let space = StateSpace::new(topology.num_links(), topology.buffer(), state_cap)?;
        let total = space
            .size
            .checked_mul(phases)
            .ok_or(Error::StateSpaceTooLarge {
                size: usize::MAX,
                cap: state_cap,
            })?;
        if total > state_cap {
            return Err(Error::StateSpaceTooLarge {
                size: total,
                cap: state_cap,
            });
        }

        let m = topology.buffer() as usize + 1;
        let b = topology.buffer();

        let mut arrival_tables = Vec::with_capacity(phases);
        for phase in 0..phases {
            let mut per_link = Vec::with_capacity(topology.num_links());
            for dist in arrivals.link_streams() {
                per_link.push(arrival_table(dist, phase, b));
            }
            arrival_tables.push(per_link);
        }

        let mut survival_tables = Vec::with_capacity(topology.num_links());
        for &d in topology.decoherence() {
            survival_tables.push(survival_table(d, b));
        }

        // composed_tables[phase] pairs survival with the arrivals of that
        // phase: used for transitions landing in a slot of that phase
        let mut composed_tables = Vec::with_capacity(phases);
        for arrivals_of_phase in &arrival_tables {
            let per_link = survival_tables
                .iter()
                .zip(arrivals_of_phase)
                .map(|(survival, arrival)| compose(survival, arrival, m))
                .collect();
            composed_tables.push(per_link);
        }

        let schedules = enumerate_schedules(topology);
        let mut feasible = Vec::with_capacity(space.size);
        for idx in 0..space.size {
            let z = space.unrank(idx);
            let feas: Vec<usize> = schedules
                .iter()
                .enumerate()
                .filter(|(_, s)| s.feasible_at(&z))
                .map(|(k, _)| k)
                .collect();
            feasible.push(feas);
        }

        Ok(LleChain {
            topology: topology.clone(),
            space,
            phases,
            schedules,
            feasible,
            arrival_tables,
            survival_tables,
            composed_tables,
        })
    }

    pub fn decision_states(&self) -> usize {
        self.space.size * self.phases
    }

    #[inline]
    pub fn decision_index(&self, w_rank: usize, phase: usize) -> usize {
        phase * self.space.size + w_rank
    }

    /// `out[y] = sum_{w'} prod_l C_l^{next_phase}[y_l][w'_l] v[w']`:
    /// expected next-slot value as a function of the post-consumption
    /// counts, marginalizing survival and the next slot's arrivals.
    pub fn backup_composed(&self, next_phase: usize, v: &[f64]) -> Vec<f64> {
        self.apply_tables(&self.composed_tables[next_phase], v)
    }

    /// Same contraction against the arrival tables of `phase`:
    /// `out[z] = sum_w prod_l A_l^phase[z_l][w_l] v[w]`.
    pub fn backup_arrivals(&self, phase: usize, v: &[f64]) -> Vec<f64> {
        self.apply_tables(&self.arrival_tables[phase], v)
    }

    /// Tensor mode products contracting the "to" index of each per-link
    /// table, O(|Z| (B+1) L) total.
    fn apply_tables(&self, tables: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.space.size);
        debug_assert_eq!(tables.len(), self.space.num_links);
        let m = self.space.buffer as usize + 1;
        let mut cur = v.to_vec();
        let mut next = vec![0.0; v.len()];
        let mut gathered = vec![0.0; m];
        for (table, &stride) in tables.iter().zip(&self.space.strides) {
            let block = stride * m;
            let mut base_outer = 0;
            while base_outer < cur.len() {
                for inner in 0..stride {
                    let base = base_outer + inner;
                    for (j, slot) in gathered.iter_mut().enumerate() {
                        *slot = cur[base + j * stride];
                    }
                    for k in 0..m {
                        let row = &table[k * m..(k + 1) * m];
                        let mut acc = 0.0;
                        for j in 0..m {
                            acc += row[j] * gathered[j];
                        }
                        next[base + k * stride] = acc;
                    }
                }
                base_outer += block;
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }

    /// Dense row over LLE-state ranks of the product of per-link tables
    /// evaluated from `from`, written into `out`.
    fn product_row_into(&self, tables: &[Vec<f64>], from: &[u32], out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.space.size);
        let m = self.space.buffer as usize + 1;
        out[0] = 1.0;
        let mut filled = 1;
        for l in 0..self.space.num_links {
            let row = &tables[l][from[l] as usize * m..(from[l] as usize + 1) * m];
            // expand: out[0..filled*m) = out[0..filled) x row
            for j in (1..m).rev() {
                let factor = row[j];
                let dst = j * filled;
                if factor == 0.0 {
                    out[dst..dst + filled].iter_mut().for_each(|x| *x = 0.0);
                } else {
                    for i in 0..filled {
                        out[dst + i] = out[i] * factor;
                    }
                }
            }
            let factor = row[0];
            out[..filled].iter_mut().for_each(|x| *x *= factor);
            filled *= m;
        }
        debug_assert_eq!(filled, self.space.size);
    }

    /// Row of "survive, then arrivals of `next_phase`" from
    /// post-consumption counts `y`, over LLE-state ranks.
    pub fn composed_row_into(&self, next_phase: usize, y: &[u32], out: &mut [f64]) {
        self.product_row_into(&self.composed_tables[next_phase], y, out);
    }

    /// Row of the pure survival kernel from `y`, over LLE-state ranks.
    pub fn survival_row_into(&self, y: &[u32], out: &mut [f64]) {
        self.product_row_into(&self.survival_tables, y, out);
    }

    /// Arrival probability `P(w | z)` at `phase`, a single entry.
    pub fn arrival_prob(&self, phase: usize, z: &[u32], w: &[u32]) -> f64 {
        let m = self.space.buffer as usize + 1;
        let mut p = 1.0;
        for l in 0..self.space.num_links {
            p *= self.arrival_tables[phase][l][z[l] as usize * m + w[l] as usize];
            if p == 0.0 {
                return 0.0;
            }
        }
        p
    }

    /// Post-consumption counts `w - sigma` (caller guarantees
    /// feasibility).
    pub fn consume(&self, w: &[u32], schedule: &Schedule) -> Vec<u32> {
        w.iter()
            .zip(schedule.demand())
            .map(|(&avail, &used)| avail - used)
            .collect()
    }
}

/// Policies that look only at the LLE counts (and arrival phase), never
/// at queues: a distribution over schedule indices into the full box,
/// feasible at `w` and summing to one.
pub trait AgnosticPolicy {
    fn distribution(&self, w: &[u32], phase: usize, out: &mut Vec<(usize, f64)>);
}

/// The idle policy: always the zero schedule.
pub struct NeverSchedules;

impl AgnosticPolicy for NeverSchedules {
    fn distribution(&self, _w: &[u32], _phase: usize, out: &mut Vec<(usize, f64)>) {
        out.clear();
        out.push((0, 1.0));
    }
}

/// Deterministic table over decision states (LLE rank x phase).
pub struct DeterministicPolicyTable {
    space: StateSpace,
    phases: usize,
    /// Schedule index per decision index `phase * |Z| + rank(w)`.
    pub actions: Vec<usize>,
}

impl DeterministicPolicyTable {
    pub fn new(space: StateSpace, phases: usize, actions: Vec<usize>) -> Self {
        assert_eq!(actions.len(), space.size * phases);
        DeterministicPolicyTable {
            space,
            phases,
            actions,
        }
    }
}

impl AgnosticPolicy for DeterministicPolicyTable {
    fn distribution(&self, w: &[u32], phase: usize, out: &mut Vec<(usize, f64)>) {
        let idx = (phase % self.phases) * self.space.size + self.space.rank(w);
        out.clear();
        out.push((self.actions[idx], 1.0));
    }
}

/// Randomized table over decision states.
pub struct RandomizedPolicyTable {
    space: StateSpace,
    phases: usize,
    /// Rows of `(schedule index, probability)`; empty rows mean idle.
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl RandomizedPolicyTable {
    pub fn new(space: StateSpace, phases: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        assert_eq!(rows.len(), space.size * phases);
        RandomizedPolicyTable {
            space,
            phases,
            rows,
        }
    }
}

impl AgnosticPolicy for RandomizedPolicyTable {
    fn distribution(&self, w: &[u32], phase: usize, out: &mut Vec<(usize, f64)>) {
        let idx = (phase % self.phases) * self.space.size + self.space.rank(w);
        out.clear();
        let row = &self.rows[idx];
        if row.is_empty() {
            out.push((0, 1.0));
        } else {
            out.extend_from_slice(row);
        }
    }
}

/// Dense transition matrix of the pre-arrival product chain
/// `(z, phase)` under an agnostic policy: arrivals, scheduling at the
/// post-arrival counts, consumption, survival.
pub fn pre_arrival_matrix(chain: &LleChain, policy: &dyn AgnosticPolicy) -> Result<DMatrix<f64>> {
    let s = chain.space.size;
    let total = s * chain.phases;
    let mut p = DMatrix::<f64>::zeros(total, total);
    // memoized survival rows per post-consumption rank
    let mut surv_rows: Vec<Option<Vec<f64>>> = vec![None; s];
    let mut dist = Vec::new();
    for phase in 0..chain.phases {
        let next_phase = (phase + 1) % chain.phases;
        for z_rank in 0..s {
            let z = chain.space.unrank(z_rank);
            let row_base = phase * s + z_rank;
            for w_rank in 0..s {
                let w = chain.space.unrank(w_rank);
                let a_prob = chain.arrival_prob(phase, &z, &w);
                if a_prob == 0.0 {
                    continue;
                }
                policy.distribution(&w, phase, &mut dist);
                let mut total_prob = 0.0;
                for &(k, prob) in dist.iter() {
                    total_prob += prob;
                    if prob == 0.0 {
                        continue;
                    }
                    let schedule = &chain.schedules[k];
                    if !schedule.feasible_at(&w) {
                        return Err(Error::InfeasibleSchedule {
                            slot: 0,
                            detail: format!(
                                "policy put weight {prob} on batches {:?} at counts {:?}",
                                schedule.batches(),
                                w
                            ),
                        });
                    }
                    let y = chain.consume(&w, schedule);
                    let y_rank = chain.space.rank(&y);
                    let row = surv_rows[y_rank].get_or_insert_with(|| {
                        let mut r = vec![0.0; s];
                        chain.survival_row_into(&y, &mut r);
                        r
                    });
                    let weight = a_prob * prob;
                    for (z2, &pr) in row.iter().enumerate() {
                        if pr != 0.0 {
                            p[(row_base, next_phase * s + z2)] += weight * pr;
                        }
                    }
                }
                if (total_prob - 1.0).abs() > 1e-9 {
                    return Err(Error::NotStochastic {
                        row: row_base,
                        sum: total_prob,
                    });
                }
            }
        }
    }
    Ok(p)
}

fn arrival_table(dist: &ArrivalDistribution, phase: usize, buffer: u32) -> Vec<f64> {
    let m = buffer as usize + 1;
    let pmf = dist.pmf(phase);
    let mut table = vec![0.0; m * m];
    for z in 0..=buffer {
        for &(a, prob) in &pmf {
            let w = (z + a).min(buffer);
            table[z as usize * m + w as usize] += prob;
        }
    }
    table
}

fn survival_table(d: f64, buffer: u32) -> Vec<f64> {
    let m = buffer as usize + 1;
    let keep = 1.0 - d;
    let mut table = vec![0.0; m * m];
    for y in 0..=buffer {
        for kept in 0..=y {
            table[y as usize * m + kept as usize] = crate::model::binomial_pmf(y, kept, keep);
        }
    }
    table
}

fn compose(first: &[f64], second: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * m];
    for i in 0..m {
        for k in 0..m {
            let f = first[i * m + k];
            if f == 0.0 {
                continue;
            }
            for j in 0..m {
                out[i * m + j] += f * second[k * m + j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArrivalDistribution;

    fn single_link() -> (SwitchTopology, ArrivalSpec) {
        let t = SwitchTopology::new(
            vec![vec![0]],
            vec![1.0],
            1,
            vec![0.5],
            vec![1],
        )
        .unwrap();
        let a = ArrivalSpec::new(
            vec![ArrivalDistribution::Bernoulli { p: 0.5 }],
            vec![ArrivalDistribution::Bernoulli { p: 0.5 }],
        )
        .unwrap();
        (t, a)
    }

    #[test]
    fn rank_unrank_roundtrip() {
        let space = StateSpace::new(3, 2, 4096).unwrap();
        assert_eq!(space.size, 27);
        for idx in 0..space.size {
            let z = space.unrank(idx);
            assert_eq!(space.rank(&z), idx);
        }
    }

    #[test]
    fn state_cap_is_enforced() {
        assert!(StateSpace::new(13, 1, 4096).is_err()); // 2^13 > 4096
        assert!(StateSpace::new(12, 1, 4096).is_ok()); // 2^12 = 4096
    }

    /// Frozen two-state oracle: single link, B = 1, Bernoulli(1/2)
    /// arrivals, decoherence 1/2, idle policy. Balance equations give
    /// rows (3/4, 1/4) and (1/2, 1/2).
    #[test]
    fn idle_single_link_matrix_matches_hand_rows() {
        let (t, a) = single_link();
        let chain = LleChain::build(&t, &a, 4096).unwrap();
        let p = pre_arrival_matrix(&chain, &NeverSchedules).unwrap();
        assert_eq!(p.nrows(), 2);
        assert!((p[(0, 0)] - 0.75).abs() < 1e-15);
        assert!((p[(0, 1)] - 0.25).abs() < 1e-15);
        assert!((p[(1, 0)] - 0.5).abs() < 1e-15);
        assert!((p[(1, 1)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn backup_contraction_agrees_with_dense_rows() {
        let t = SwitchTopology::new(
            vec![vec![0], vec![0, 1]],
            vec![0.9, 0.8],
            2,
            vec![0.3, 0.6],
            vec![2, 1],
        )
        .unwrap();
        let a = ArrivalSpec::new(
            vec![
                ArrivalDistribution::Bernoulli { p: 0.2 },
                ArrivalDistribution::Bernoulli { p: 0.1 },
            ],
            vec![
                ArrivalDistribution::Binomial { trials: 2, p: 0.4 },
                ArrivalDistribution::Bernoulli { p: 0.7 },
            ],
        )
        .unwrap();
        let chain = LleChain::build(&t, &a, 4096).unwrap();
        let s = chain.space.size;
        let v: Vec<f64> = (0..s).map(|i| (i as f64).sin()).collect();
        let contracted = chain.backup_composed(0, &v);
        let mut row = vec![0.0; s];
        for y_rank in 0..s {
            let y = chain.space.unrank(y_rank);
            chain.composed_row_into(0, &y, &mut row);
            let direct: f64 = row.iter().zip(&v).map(|(p, x)| p * x).sum();
            assert!(
                (direct - contracted[y_rank]).abs() < 1e-12,
                "y_rank {y_rank}: {direct} vs {}",
                contracted[y_rank]
            );
            let total: f64 = row.iter().sum();
            assert!((total - 1.0).abs() < 1e-12, "row sums to {total}");
        }
    }

    #[test]
    fn product_chain_tracks_periodic_pattern() {
        let t = SwitchTopology::new(vec![vec![0]], vec![1.0], 1, vec![1.0], vec![1]).unwrap();
        let a = ArrivalSpec::new(
            vec![ArrivalDistribution::Bernoulli { p: 0.0 }],
            vec![ArrivalDistribution::Periodic {
                pattern: vec![1, 0],
            }],
        )
        .unwrap();
        let chain = LleChain::build(&t, &a, 4096).unwrap();
        assert_eq!(chain.phases, 2);
        let p = pre_arrival_matrix(&chain, &NeverSchedules).unwrap();
        // d = 1: everything decoheres, so z' = 0 regardless; phase
        // advances deterministically
        assert_eq!(p.nrows(), 4);
        for phase in 0..2 {
            for z in 0..2 {
                let row = phase * 2 + z;
                let next = ((phase + 1) % 2) * 2;
                assert!((p[(row, next)] - 1.0).abs() < 1e-15, "row {row}");
            }
        }
    }

    #[test]
    fn rows_are_stochastic_under_randomized_policy() {
        let (t, a) = single_link();
        let chain = LleChain::build(&t, &a, 4096).unwrap();
        // at z = 1 serve with probability 0.3
        let rows = vec![vec![(0, 1.0)], vec![(0, 0.7), (1, 0.3)]];
        let table = RandomizedPolicyTable::new(
            StateSpace::new(1, 1, 4096).unwrap(),
            1,
            rows,
        );
        let p = pre_arrival_matrix(&chain, &table).unwrap();
        for i in 0..p.nrows() {
            let sum: f64 = (0..p.ncols()).map(|j| p[(i, j)]).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}
