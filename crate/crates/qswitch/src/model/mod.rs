//! Switch topology, schedules, arrival processes, and config ingestion.
//!
//! A [`SwitchTopology`] fixes the static data of the problem: which links
//! each request type fuses over, fusion success probabilities, the
//! per-link buffer, per-link decoherence, and per-type batch limits. A
//! [`Schedule`] is a batch vector `n` over request types together with its
//! induced per-link LLE demand `sigma`; the schedule set is the whole
//! batch box, and feasibility at an LLE count vector is the componentwise
//! test `sigma <= z`.

mod arrivals;
mod config;

pub use arrivals::{ArrivalDistribution, ArrivalSpec};
pub use config::{load_config, load_config_str, window_for_scale, RunParams, SwitchConfig};

pub(crate) use arrivals::binomial_pmf;

use crate::error::{Error, Result};
use crate::SCHEDULE_SET_CAP;

/// Static description of a switch: request types, their link sets, and
/// link parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SwitchTopology {
    /// Sorted, duplicate-free link set per request type.
    request_links: Vec<Vec<usize>>,
    /// Fusion success probability per request type, each in (0, 1].
    gamma: Vec<f64>,
    /// Per-link LLE buffer size, >= 1.
    buffer: u32,
    /// Per-slot decoherence probability per link, each in (0, 1].
    decoherence: Vec<f64>,
    /// Largest batch of each request type schedulable in one slot.
    max_batch: Vec<u32>,
    /// 0/1 incidence rows: psi[r][l] = 1 iff link l serves type r.
    psi: Vec<Vec<u32>>,
}

impl SwitchTopology {
    pub fn new(
        request_links: Vec<Vec<usize>>,
        gamma: Vec<f64>,
        buffer: u32,
        decoherence: Vec<f64>,
        max_batch: Vec<u32>,
    ) -> Result<Self> {
        let num_links = decoherence.len();
        let num_requests = request_links.len();
        if num_requests == 0 {
            return Err(Error::InvalidModel("no request types".into()));
        }
        if num_links == 0 {
            return Err(Error::InvalidModel("no links".into()));
        }
        if buffer == 0 {
            return Err(Error::InvalidModel("buffer must be >= 1".into()));
        }
        if gamma.len() != num_requests {
            return Err(Error::InvalidModel(format!(
                "gamma has {} entries for {} request types",
                gamma.len(),
                num_requests
            )));
        }
        if max_batch.len() != num_requests {
            return Err(Error::InvalidModel(format!(
                "max_batch has {} entries for {} request types",
                max_batch.len(),
                num_requests
            )));
        }
        for (r, g) in gamma.iter().enumerate() {
            if !(*g > 0.0 && *g <= 1.0) {
                return Err(Error::InvalidModel(format!(
                    "gamma[{r}] = {g} outside (0, 1]"
                )));
            }
        }
        for (l, d) in decoherence.iter().enumerate() {
            if !(*d > 0.0 && *d <= 1.0) {
                return Err(Error::InvalidModel(format!(
                    "decoherence[{l}] = {d} outside (0, 1]"
                )));
            }
        }
        let mut request_links = request_links;
        for (r, links) in request_links.iter_mut().enumerate() {
            if links.is_empty() {
                return Err(Error::InvalidModel(format!(
                    "request_links[{r}] is empty"
                )));
            }
            links.sort_unstable();
            for pair in links.windows(2) {
                if pair[0] == pair[1] {
                    return Err(Error::InvalidModel(format!(
                        "request_links[{r}] lists link {} twice",
                        pair[0]
                    )));
                }
            }
            if *links.last().unwrap() >= num_links {
                return Err(Error::InvalidModel(format!(
                    "request_links[{r}] references link {} but there are {} links",
                    links.last().unwrap(),
                    num_links
                )));
            }
        }
        let mut box_size: usize = 1;
        for (r, m) in max_batch.iter().enumerate() {
            box_size = box_size
                .checked_mul(*m as usize + 1)
                .ok_or(Error::ScheduleSetTooLarge {
                    size: usize::MAX,
                    cap: SCHEDULE_SET_CAP,
                })?;
            if box_size > SCHEDULE_SET_CAP {
                return Err(Error::ScheduleSetTooLarge {
                    size: box_size,
                    cap: SCHEDULE_SET_CAP,
                });
            }
            let _ = r;
        }
        let psi = request_links
            .iter()
            .map(|links| {
                let mut row = vec![0u32; num_links];
                for &l in links {
                    row[l] = 1;
                }
                row
            })
            .collect();
        Ok(SwitchTopology {
            request_links,
            gamma,
            buffer,
            decoherence,
            max_batch,
            psi,
        })
    }

    pub fn num_requests(&self) -> usize {
        self.request_links.len()
    }

    pub fn num_links(&self) -> usize {
        self.decoherence.len()
    }

    pub fn buffer(&self) -> u32 {
        self.buffer
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn decoherence(&self) -> &[f64] {
        &self.decoherence
    }

    pub fn max_batch(&self) -> &[u32] {
        &self.max_batch
    }

    pub fn links_of(&self, r: usize) -> &[usize] {
        &self.request_links[r]
    }

    pub fn request_links(&self) -> &[Vec<usize>] {
        &self.request_links
    }

    /// Incidence row of type `r`: one entry per link, 1 where `r` draws an
    /// LLE.
    pub fn psi(&self, r: usize) -> &[u32] {
        &self.psi[r]
    }

    /// Per-link LLE demand of the batch vector `n`.
    pub fn sigma_of(&self, n: &[u32]) -> Vec<u32> {
        let mut sigma = vec![0u32; self.num_links()];
        for (r, &count) in n.iter().enumerate() {
            if count > 0 {
                for &l in &self.request_links[r] {
                    sigma[l] += count;
                }
            }
        }
        sigma
    }

    /// Build a schedule, checking the batch vector against `max_batch`.
    pub fn schedule(&self, n: Vec<u32>) -> Result<Schedule> {
        if n.len() != self.num_requests() {
            return Err(Error::InvalidModel(format!(
                "batch vector has {} entries for {} request types",
                n.len(),
                self.num_requests()
            )));
        }
        for (r, &count) in n.iter().enumerate() {
            if count > self.max_batch[r] {
                return Err(Error::InvalidModel(format!(
                    "batch n[{r}] = {count} exceeds max_batch {}",
                    self.max_batch[r]
                )));
            }
        }
        let sigma = self.sigma_of(&n);
        Ok(Schedule { n, sigma })
    }

    pub fn zero_schedule(&self) -> Schedule {
        Schedule {
            n: vec![0; self.num_requests()],
            sigma: vec![0; self.num_links()],
        }
    }
}

/// A batch vector over request types plus its induced per-link demand.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    n: Vec<u32>,
    sigma: Vec<u32>,
}

impl Schedule {
    pub fn batches(&self) -> &[u32] {
        &self.n
    }

    pub fn demand(&self) -> &[u32] {
        &self.sigma
    }

    pub fn is_zero(&self) -> bool {
        self.n.iter().all(|&x| x == 0)
    }

    /// Componentwise feasibility against an LLE count vector.
    pub fn feasible_at(&self, z: &[u32]) -> bool {
        self.sigma.iter().zip(z).all(|(s, avail)| s <= avail)
    }
}

/// Every batch vector in the box `prod_r {0..=max_batch_r}`, sorted
/// lexicographically ascending. Index 0 is always the zero schedule.
pub fn enumerate_schedules(topology: &SwitchTopology) -> Vec<Schedule> {
    let caps = topology.max_batch();
    let r_count = caps.len();
    let mut out = Vec::new();
    let mut n = vec![0u32; r_count];
    loop {
        out.push(Schedule {
            n: n.clone(),
            sigma: topology.sigma_of(&n),
        });
        // lexicographic ascending increment: bump the last coordinate,
        // carrying leftward
        let mut pos = r_count;
        loop {
            if pos == 0 {
                return out;
            }
            pos -= 1;
            if n[pos] < caps[pos] {
                n[pos] += 1;
                for entry in &mut n[pos + 1..] {
                    *entry = 0;
                }
                break;
            }
        }
    }
}

/// The schedules of the box that fit within the LLE counts `z`, sorted
/// lexicographically ascending by batch vector.
pub fn enumerate_feasible_schedules(topology: &SwitchTopology, z: &[u32]) -> Vec<Schedule> {
    enumerate_schedules(topology)
        .into_iter()
        .filter(|s| s.feasible_at(z))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_plus_joint() -> SwitchTopology {
        // three links; types: {l0}, {l1}, {l0,l1,l2}
        SwitchTopology::new(
            vec![vec![0], vec![1], vec![0, 1, 2]],
            vec![1.0, 1.0, 1.0],
            1,
            vec![0.5, 0.5, 0.5],
            vec![1, 1, 1],
        )
        .unwrap()
    }

    #[test]
    fn sigma_accumulates_incidences() {
        let t = two_plus_joint();
        assert_eq!(t.sigma_of(&[1, 0, 0]), vec![1, 0, 0]);
        assert_eq!(t.sigma_of(&[1, 1, 1]), vec![2, 2, 1]);
        assert_eq!(t.psi(2), &[1, 1, 1]);
    }

    #[test]
    fn feasible_set_matches_brute_force_at_full_state() {
        let t = two_plus_joint();
        let z = vec![1, 1, 1];
        let got: Vec<Vec<u32>> = enumerate_feasible_schedules(&t, &z)
            .into_iter()
            .map(|s| s.batches().to_vec())
            .collect();
        // brute force over the whole box
        let mut expect = Vec::new();
        for a in 0..=1u32 {
            for b in 0..=1u32 {
                for c in 0..=1u32 {
                    let n = vec![a, b, c];
                    let sigma = t.sigma_of(&n);
                    if sigma.iter().zip(&z).all(|(s, zl)| s <= zl) {
                        expect.push(n);
                    }
                }
            }
        }
        expect.sort();
        assert_eq!(got, expect);
        // the five schedules: idle, joint type alone, each single type,
        // both single types together
        assert_eq!(
            got,
            vec![
                vec![0, 0, 0],
                vec![0, 0, 1],
                vec![0, 1, 0],
                vec![1, 0, 0],
                vec![1, 1, 0],
            ]
        );
    }

    #[test]
    fn feasible_set_grows_with_state() {
        let t = two_plus_joint();
        let small = enumerate_feasible_schedules(&t, &[1, 0, 0]);
        let large = enumerate_feasible_schedules(&t, &[1, 1, 1]);
        for s in &small {
            assert!(large.contains(s));
        }
        assert_eq!(small.len(), 2); // idle and type 0
    }

    #[test]
    fn zero_schedule_always_first() {
        let t = two_plus_joint();
        let all = enumerate_schedules(&t);
        assert_eq!(all.len(), 8);
        assert!(all[0].is_zero());
        let feas = enumerate_feasible_schedules(&t, &[0, 0, 0]);
        assert_eq!(feas.len(), 1);
        assert!(feas[0].is_zero());
    }

    #[test]
    fn constructor_rejects_bad_inputs() {
        assert!(SwitchTopology::new(vec![], vec![], 1, vec![0.5], vec![]).is_err());
        assert!(
            SwitchTopology::new(vec![vec![0]], vec![0.0], 1, vec![0.5], vec![1]).is_err(),
            "gamma must be > 0"
        );
        assert!(
            SwitchTopology::new(vec![vec![0]], vec![1.0], 1, vec![0.0], vec![1]).is_err(),
            "decoherence must be > 0"
        );
        assert!(
            SwitchTopology::new(vec![vec![1]], vec![1.0], 1, vec![0.5], vec![1]).is_err(),
            "link index out of range"
        );
        assert!(
            SwitchTopology::new(vec![vec![0, 0]], vec![1.0], 1, vec![0.5], vec![1]).is_err(),
            "duplicate link"
        );
        assert!(
            SwitchTopology::new(vec![vec![0]], vec![1.0], 0, vec![0.5], vec![1]).is_err(),
            "zero buffer"
        );
    }

    #[test]
    fn schedule_set_cap_enforced() {
        let err = SwitchTopology::new(
            vec![vec![0], vec![0], vec![0]],
            vec![1.0; 3],
            1,
            vec![0.5],
            vec![100, 100, 100],
        )
        .unwrap_err();
        assert!(matches!(err, Error::ScheduleSetTooLarge { .. }));
    }
}
