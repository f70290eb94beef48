//! Runnable scheduling policies.
//!
//! Every policy implements [`ScheduleChooser`] and is picked by a
//! config string: `"maxweight"`, `"are"`, `"never"`,
//! `"priority:2,0,1"`, or `"static:<table-file>"`.
//!
//! Two deliberately different feasibility conventions coexist here.
//! MaxWeight is the classical queue-aware policy and never schedules
//! more batches of a type than it has pending requests (`n_r <= Q_r`).
//! The batched-resolve policy ([`AreScheduler`]) and static tables are
//! *request-agnostic*: they look only at LLE counts, and consumption
//! proceeds even when a success has no request to serve. The asymmetry
//! is intentional; each policy follows its own definition.

use std::collections::HashMap;
use std::path::Path;

use serde::Deserialize;

use crate::dynamics::{AgnosticPolicy, DeterministicPolicyTable, ScheduleChooser, SwitchState};
use crate::error::{Error, Result};
use crate::mdp::{solve_average_reward, AreOptions, MdpTables};
use crate::model::{ArrivalSpec, Schedule, SwitchTopology};
use crate::rng::{SlotRng, Stream};

/// Parsed policy selector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PolicySpec {
    Never,
    MaxWeight,
    Are,
    Priority(Vec<usize>),
    /// Priority order with resource holding for blocked types.
    ReservingPriority(Vec<usize>),
    /// Path of a static randomized table file.
    Static(String),
}

/// Parse a policy string from config or CLI.
pub fn parse_policy(text: &str) -> Result<PolicySpec> {
    let text = text.trim();
    match text {
        "never" => return Ok(PolicySpec::Never),
        "maxweight" => return Ok(PolicySpec::MaxWeight),
        "are" => return Ok(PolicySpec::Are),
        _ => {}
    }
    if let Some(rest) = text.strip_prefix("priority:") {
        return Ok(PolicySpec::Priority(parse_order(rest)?));
    }
    if let Some(rest) = text.strip_prefix("reserving-priority:") {
        return Ok(PolicySpec::ReservingPriority(parse_order(rest)?));
    }
    if let Some(rest) = text.strip_prefix("static:") {
        if rest.is_empty() {
            return Err(Error::Config("static policy needs a table file".into()));
        }
        return Ok(PolicySpec::Static(rest.to_string()));
    }
    Err(Error::Config(format!(
        "unknown policy {text:?}; expected maxweight | are | never | priority:... | \
         reserving-priority:... | static:FILE"
    )))
}

fn parse_order(rest: &str) -> Result<Vec<usize>> {
    rest.split(',')
        .map(|tok| {
            tok.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad priority entry {tok:?}")))
        })
        .collect()
}

/// Instantiate a chooser for a parsed policy. `tau` is the re-solve
/// window of the batched policy; `state_cap` bounds its solver's state
/// space. Static table paths are resolved as given.
pub fn build_chooser(
    spec: &PolicySpec,
    topology: &SwitchTopology,
    arrivals: &ArrivalSpec,
    tau: u64,
    state_cap: usize,
) -> Result<Box<dyn ScheduleChooser>> {
    match spec {
        PolicySpec::Never => Ok(Box::new(NeverScheduler::new(topology))),
        PolicySpec::MaxWeight => Ok(Box::new(MaxWeightScheduler::new(topology))),
        PolicySpec::Are => Ok(Box::new(AreScheduler::new(
            topology, arrivals, tau, state_cap,
        )?)),
        PolicySpec::Priority(order) => {
            Ok(Box::new(PriorityScheduler::new(topology, order.clone())?))
        }
        PolicySpec::ReservingPriority(order) => Ok(Box::new(ReservingPriorityScheduler::new(
            topology,
            order.clone(),
        )?)),
        PolicySpec::Static(path) => Ok(Box::new(StaticTable::from_file(
            topology,
            arrivals.link_period(),
            Path::new(path),
        )?)),
    }
}

/// Always the zero schedule.
pub struct NeverScheduler {
    zero: Schedule,
}

impl NeverScheduler {
    pub fn new(topology: &SwitchTopology) -> Self {
        NeverScheduler {
            zero: topology.zero_schedule(),
        }
    }
}

impl ScheduleChooser for NeverScheduler {
    fn choose(
        &mut self,
        _state: &SwitchState,
        _w: &[u32],
        _slot: u64,
        _rng: &SlotRng,
    ) -> Result<Schedule> {
        Ok(self.zero.clone())
    }
}

/// Classical MaxWeight: maximize `sum_r Q_r * n_r` over schedules that
/// are feasible for the current counts and do not exceed the queues
/// (`n_r <= Q_r`). Ties break to the lexicographically largest batch
/// vector. Queue lengths and batches are integers, so tie detection is
/// exact.
pub struct MaxWeightScheduler {
    schedules: Vec<Schedule>,
}

impl MaxWeightScheduler {
    pub fn new(topology: &SwitchTopology) -> Self {
        MaxWeightScheduler {
            schedules: crate::model::enumerate_schedules(topology),
        }
    }

    /// The argmax itself, exposed for exact-oracle tests.
    pub fn choose_at(&self, q: &[u64], w: &[u32]) -> Schedule {
        let mut best_weight = -1.0f64;
        let mut best: &Schedule = &self.schedules[0];
        // descending scan with strict improvement keeps the largest
        // index among exact ties
        for s in self.schedules.iter().rev() {
            if !s.feasible_at(w) {
                continue;
            }
            if s.batches().iter().zip(q).any(|(&n, &have)| n as u64 > have) {
                continue;
            }
            let weight: f64 = s
                .batches()
                .iter()
                .zip(q)
                .map(|(&n, &qr)| qr as f64 * n as f64)
                .sum();
            if weight > best_weight {
                best_weight = weight;
                best = s;
            }
        }
        best.clone()
    }
}

impl ScheduleChooser for MaxWeightScheduler {
    fn choose(
        &mut self,
        state: &SwitchState,
        w: &[u32],
        _slot: u64,
        _rng: &SlotRng,
    ) -> Result<Schedule> {
        Ok(self.choose_at(&state.q, w))
    }
}

/// Greedy fixed-priority allocation: walk request types in the given
/// order, granting each `min(Q_r, max_batch_r, LLE availability)`.
pub struct PriorityScheduler {
    topology: SwitchTopology,
    order: Vec<usize>,
}

impl PriorityScheduler {
    pub fn new(topology: &SwitchTopology, order: Vec<usize>) -> Result<Self> {
        let r = topology.num_requests();
        let mut seen = vec![false; r];
        if order.len() != r {
            return Err(Error::Config(format!(
                "priority order has {} entries for {} request types",
                order.len(),
                r
            )));
        }
        for &idx in &order {
            if idx >= r || seen[idx] {
                return Err(Error::Config(format!(
                    "priority order {order:?} is not a permutation of 0..{r}"
                )));
            }
            seen[idx] = true;
        }
        Ok(PriorityScheduler {
            topology: topology.clone(),
            order,
        })
    }

    pub fn choose_at(&self, q: &[u64], w: &[u32]) -> Result<Schedule> {
        let mut remaining = w.to_vec();
        let mut n = vec![0u32; self.topology.num_requests()];
        for &r in &self.order {
            let mut grant = self.topology.max_batch()[r];
            grant = grant.min(q[r].min(u64::from(u32::MAX)) as u32);
            for &l in self.topology.links_of(r) {
                grant = grant.min(remaining[l]);
            }
            n[r] = grant;
            for &l in self.topology.links_of(r) {
                remaining[l] -= grant;
            }
        }
        self.topology.schedule(n)
    }
}

impl ScheduleChooser for PriorityScheduler {
    fn choose(
        &mut self,
        state: &SwitchState,
        w: &[u32],
        _slot: u64,
        _rng: &SlotRng,
    ) -> Result<Schedule> {
        self.choose_at(&state.q, w)
    }
}

/// Fixed-priority allocation with resource holding: like
/// [`PriorityScheduler`], but a backlogged type that cannot be served
/// this slot reserves every link it needs, and lower-priority types may
/// not consume reserved LLEs. Greedy priority spends shared links the
/// moment any low type can use them; holding lets a multi-link type
/// accumulate its inputs, paying only the decoherence risk of the held
/// LLEs.
pub struct ReservingPriorityScheduler {
    topology: SwitchTopology,
    order: Vec<usize>,
}

impl ReservingPriorityScheduler {
    pub fn new(topology: &SwitchTopology, order: Vec<usize>) -> Result<Self> {
        // Same permutation contract as the greedy variant.
        PriorityScheduler::new(topology, order).map(|p| ReservingPriorityScheduler {
            topology: p.topology,
            order: p.order,
        })
    }

    pub fn choose_at(&self, q: &[u64], w: &[u32]) -> Result<Schedule> {
        let mut remaining = w.to_vec();
        let mut reserved = vec![false; self.topology.num_links()];
        let mut n = vec![0u32; self.topology.num_requests()];
        for &r in &self.order {
            if q[r] == 0 {
                continue;
            }
            let mut grant = self.topology.max_batch()[r];
            grant = grant.min(q[r].min(u64::from(u32::MAX)) as u32);
            for &l in self.topology.links_of(r) {
                grant = if reserved[l] {
                    0
                } else {
                    grant.min(remaining[l])
                };
            }
            if grant > 0 {
                n[r] = grant;
                for &l in self.topology.links_of(r) {
                    remaining[l] -= grant;
                }
            } else {
                // Blocked with work pending: hold this type's links.
                for &l in self.topology.links_of(r) {
                    reserved[l] = true;
                }
            }
        }
        self.topology.schedule(n)
    }
}

impl ScheduleChooser for ReservingPriorityScheduler {
    fn choose(
        &mut self,
        state: &SwitchState,
        w: &[u32],
        _slot: u64,
        _rng: &SlotRng,
    ) -> Result<Schedule> {
        self.choose_at(&state.q, w)
    }
}

/// Batched re-solve policy: every `tau` slots, solve the average-reward
/// problem with the current queue lengths as frozen weights, then play
/// the resulting LLE-only policy for the whole window. Request queues
/// are *not* consulted inside the window (agnostic semantics), so a
/// success with no pending request still consumes LLEs.
pub struct AreScheduler {
    tables: MdpTables,
    tau: u64,
    opts: AreOptions,
    policy: Option<DeterministicPolicyTable>,
    bias: Option<Vec<f64>>,
}

impl AreScheduler {
    pub fn new(
        topology: &SwitchTopology,
        arrivals: &ArrivalSpec,
        tau: u64,
        state_cap: usize,
    ) -> Result<Self> {
        if tau == 0 {
            return Err(Error::Config("re-solve window tau must be >= 1".into()));
        }
        Ok(AreScheduler {
            tables: MdpTables::build(topology, arrivals, state_cap)?,
            tau,
            opts: AreOptions::default(),
            policy: None,
            bias: None,
        })
    }

    pub fn window(&self) -> u64 {
        self.tau
    }

    pub fn tables(&self) -> &MdpTables {
        &self.tables
    }

    /// The LLE-only map currently being played, if any window has
    /// started.
    pub fn cached_policy(&self) -> Option<&DeterministicPolicyTable> {
        self.policy.as_ref()
    }

    fn refresh(&mut self, q: &[u64]) -> Result<()> {
        let weights: Vec<f64> = q.iter().map(|&x| x as f64).collect();
        let solution =
            solve_average_reward(&self.tables, &weights, &self.opts, self.bias.as_deref())?;
        self.bias = Some(solution.bias);
        self.policy = Some(solution.policy);
        Ok(())
    }
}

impl ScheduleChooser for AreScheduler {
    fn choose(
        &mut self,
        state: &SwitchState,
        w: &[u32],
        slot: u64,
        _rng: &SlotRng,
    ) -> Result<Schedule> {
        if slot.is_multiple_of(self.tau) || self.policy.is_none() {
            self.refresh(&state.q).map_err(|e| Error::Scheduler {
                slot,
                source: Box::new(e),
            })?;
        }
        let chain = &self.tables.chain;
        let phase = (slot % chain.phases as u64) as usize;
        let idx = chain.decision_index(chain.space.rank(w), phase);
        let policy = self.policy.as_ref().expect("refreshed above");
        let schedule = chain.schedules[policy.actions[idx]].clone();
        // the solved map is feasible by construction; the clip is a
        // guard so a mismatched table can never crash a run
        if schedule.feasible_at(w) {
            Ok(schedule)
        } else {
            clip_to_feasible(&chain.topology, &schedule, w)
        }
    }
}

/// Drop batches type-by-type, highest request index first, until the
/// schedule fits the available counts. Deterministic so that runs stay
/// reproducible if it ever fires.
pub fn clip_to_feasible(
    topology: &SwitchTopology,
    schedule: &Schedule,
    w: &[u32],
) -> Result<Schedule> {
    let mut n = schedule.batches().to_vec();
    for r in (0..n.len()).rev() {
        loop {
            let candidate = topology.schedule(n.clone())?;
            if candidate.feasible_at(w) {
                return Ok(candidate);
            }
            if n[r] == 0 {
                break;
            }
            n[r] -= 1;
        }
    }
    topology.schedule(n)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStaticTable {
    #[serde(default)]
    phases: Option<usize>,
    #[serde(default)]
    rule: Vec<RawRule>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRule {
    #[serde(default)]
    phase: usize,
    lle: Vec<u32>,
    batches: Vec<Vec<u32>>,
    probs: Vec<f64>,
}

/// Static randomized agnostic policy loaded from a TOML table.
///
/// ```toml
/// phases = 1            # arrival phases covered (default 1)
///
/// [[rule]]
/// phase = 0             # default 0
/// lle = [1, 1, 1]       # post-arrival counts the rule applies at
/// batches = [[1, 1, 0], [0, 0, 1]]
/// probs = [0.5, 0.5]
/// ```
///
/// States without a rule idle; probability mass not assigned by a rule
/// goes to the zero schedule.
pub struct StaticTable {
    zero: Schedule,
    schedules: Vec<Schedule>,
    phases: usize,
    rules: RuleMap,
}

/// `(phase, post-arrival LLE counts)` mapped to weighted schedule indices.
type RuleMap = HashMap<(usize, Vec<u32>), Vec<(usize, f64)>>;

impl StaticTable {
    pub fn from_file(topology: &SwitchTopology, phases: usize, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str(topology, phases, &text)
    }

    /// `phases` is the arrival period of the run the table will serve
    /// in; the table must declare the same count (or omit it when 1).
    pub fn from_str(topology: &SwitchTopology, phases: usize, text: &str) -> Result<Self> {
        let raw: RawStaticTable =
            toml::from_str(text).map_err(|e| Error::Config(format!("static table: {e}")))?;
        let declared = raw.phases.unwrap_or(1);
        if declared == 0 {
            return Err(Error::Config("static table: phases must be >= 1".into()));
        }
        if declared != phases {
            return Err(Error::Config(format!(
                "static table declares {declared} phases but the arrival streams have period {phases}"
            )));
        }
        let schedules = crate::model::enumerate_schedules(topology);
        let mut index_of: HashMap<&[u32], usize> = HashMap::new();
        for (k, s) in schedules.iter().enumerate() {
            index_of.insert(s.batches(), k);
        }

        let mut rules = HashMap::new();
        for (i, rule) in raw.rule.iter().enumerate() {
            let label = format!("static table rule {i}");
            if rule.phase >= declared {
                return Err(Error::Config(format!(
                    "{label}: phase {} out of range 0..{declared}",
                    rule.phase
                )));
            }
            if rule.lle.len() != topology.num_links() {
                return Err(Error::Config(format!(
                    "{label}: lle has {} entries for {} links",
                    rule.lle.len(),
                    topology.num_links()
                )));
            }
            if rule.lle.iter().any(|&z| z > topology.buffer()) {
                return Err(Error::Config(format!(
                    "{label}: lle {:?} exceeds buffer {}",
                    rule.lle,
                    topology.buffer()
                )));
            }
            if rule.batches.len() != rule.probs.len() {
                return Err(Error::Config(format!(
                    "{label}: {} batch vectors but {} probabilities",
                    rule.batches.len(),
                    rule.probs.len()
                )));
            }
            let mut row = Vec::with_capacity(rule.batches.len());
            let mut total = 0.0;
            for (n, &prob) in rule.batches.iter().zip(&rule.probs) {
                if !(0.0..=1.0).contains(&prob) {
                    return Err(Error::Config(format!(
                        "{label}: probability {prob} outside [0, 1]"
                    )));
                }
                let schedule = topology.schedule(n.clone()).map_err(|e| {
                    Error::Config(format!("{label}: {e}"))
                })?;
                if !schedule.feasible_at(&rule.lle) {
                    return Err(Error::Config(format!(
                        "{label}: batches {n:?} infeasible at lle {:?}",
                        rule.lle
                    )));
                }
                let k = *index_of
                    .get(schedule.batches())
                    .expect("validated schedule is in the box");
                total += prob;
                row.push((k, prob));
            }
            if total > 1.0 + 1e-9 {
                return Err(Error::Config(format!(
                    "{label}: probabilities sum to {total} > 1"
                )));
            }
            let leftover = 1.0 - total;
            if leftover > 0.0 {
                row.push((0, leftover));
            }
            if rules
                .insert((rule.phase, rule.lle.clone()), row)
                .is_some()
            {
                return Err(Error::Config(format!(
                    "{label}: duplicate rule for phase {} lle {:?}",
                    rule.phase, rule.lle
                )));
            }
        }

        Ok(StaticTable {
            zero: topology.zero_schedule(),
            schedules,
            phases: declared,
            rules,
        })
    }
}

impl ScheduleChooser for StaticTable {
    fn choose(
        &mut self,
        _state: &SwitchState,
        w: &[u32],
        slot: u64,
        rng: &SlotRng,
    ) -> Result<Schedule> {
        let phase = (slot % self.phases as u64) as usize;
        let Some(row) = self.rules.get(&(phase, w.to_vec())) else {
            return Ok(self.zero.clone());
        };
        let draw = rng.unit(Stream::Policy, slot, 0, 0);
        let mut acc = 0.0;
        for &(k, prob) in row {
            acc += prob;
            if draw < acc {
                return Ok(self.schedules[k].clone());
            }
        }
        Ok(self.zero.clone())
    }
}

impl AgnosticPolicy for StaticTable {
    fn distribution(&self, w: &[u32], phase: usize, out: &mut Vec<(usize, f64)>) {
        out.clear();
        match self.rules.get(&(phase % self.phases, w.to_vec())) {
            Some(row) => out.extend_from_slice(row),
            None => out.push((0, 1.0)),
        }
    }
}
