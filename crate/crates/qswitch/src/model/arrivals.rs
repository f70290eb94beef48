//! Arrival processes for request types and links.
//!
//! Each stream is independent across lanes and slots. Bernoulli and
//! binomial streams are i.i.d.; deterministic-periodic streams repeat a
//! fixed integer pattern, which makes the slot phase (slot index modulo
//! the pattern length) part of the chain state for exact analyses.

use crate::error::{Error, Result};
use crate::rng::{SlotRng, Stream};

#[derive(Debug, Clone, PartialEq)]
pub enum ArrivalDistribution {
    /// One arrival with probability `p`, none otherwise.
    Bernoulli { p: f64 },
    /// Sum of `trials` independent Bernoulli(`p`) arrivals per slot.
    Binomial { trials: u32, p: f64 },
    /// Deterministic arrivals repeating `pattern` slot by slot.
    Periodic { pattern: Vec<u32> },
    /// Bernoulli draws whose success probability cycles through `probs`
    /// slot by slot: phase `i` of the cycle arrives with probability
    /// `probs[i]`. Expresses clocked streams such as "one request may
    /// arrive only at the first slot of every cycle".
    PhasedBernoulli { probs: Vec<f64> },
}

impl ArrivalDistribution {
    fn validate(&self, what: &str) -> Result<()> {
        match self {
            ArrivalDistribution::Bernoulli { p } => {
                if !(0.0..=1.0).contains(p) {
                    return Err(Error::InvalidModel(format!(
                        "{what}: bernoulli rate {p} outside [0, 1]"
                    )));
                }
            }
            ArrivalDistribution::Binomial { trials, p } => {
                if *trials == 0 {
                    return Err(Error::InvalidModel(format!(
                        "{what}: binomial needs trials >= 1"
                    )));
                }
                if !(0.0..=1.0).contains(p) {
                    return Err(Error::InvalidModel(format!(
                        "{what}: binomial success probability {p} outside [0, 1]"
                    )));
                }
            }
            ArrivalDistribution::Periodic { pattern } => {
                if pattern.is_empty() {
                    return Err(Error::InvalidModel(format!(
                        "{what}: periodic pattern is empty"
                    )));
                }
            }
            ArrivalDistribution::PhasedBernoulli { probs } => {
                if probs.is_empty() {
                    return Err(Error::InvalidModel(format!(
                        "{what}: phased-bernoulli probability cycle is empty"
                    )));
                }
                if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                    return Err(Error::InvalidModel(format!(
                        "{what}: phased-bernoulli rate {p} outside [0, 1]"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Long-run mean arrivals per slot.
    pub fn mean(&self) -> f64 {
        match self {
            ArrivalDistribution::Bernoulli { p } => *p,
            ArrivalDistribution::Binomial { trials, p } => *trials as f64 * p,
            ArrivalDistribution::Periodic { pattern } => {
                pattern.iter().map(|&x| x as f64).sum::<f64>() / pattern.len() as f64
            }
            ArrivalDistribution::PhasedBernoulli { probs } => {
                probs.iter().sum::<f64>() / probs.len() as f64
            }
        }
    }

    /// Largest increment the stream can produce in one slot.
    pub fn max_increment(&self) -> u32 {
        match self {
            ArrivalDistribution::Bernoulli { .. } => 1,
            ArrivalDistribution::Binomial { trials, .. } => *trials,
            ArrivalDistribution::Periodic { pattern } => *pattern.iter().max().unwrap(),
            ArrivalDistribution::PhasedBernoulli { probs } => {
                u32::from(probs.iter().any(|&p| p > 0.0))
            }
        }
    }

    /// Pattern length (1 for i.i.d. streams).
    pub fn period(&self) -> usize {
        match self {
            ArrivalDistribution::Periodic { pattern } => pattern.len(),
            ArrivalDistribution::PhasedBernoulli { probs } => probs.len(),
            _ => 1,
        }
    }

    /// Exact pmf over increments at the given phase, as
    /// `(increment, probability)` pairs with positive probability, in
    /// increasing increment order.
    pub fn pmf(&self, phase: usize) -> Vec<(u32, f64)> {
        match self {
            ArrivalDistribution::Bernoulli { p } => {
                if *p == 0.0 {
                    vec![(0, 1.0)]
                } else if *p == 1.0 {
                    vec![(1, 1.0)]
                } else {
                    vec![(0, 1.0 - p), (1, *p)]
                }
            }
            ArrivalDistribution::Binomial { trials, p } => {
                let k = *trials;
                let mut out = Vec::new();
                for j in 0..=k {
                    let prob = binomial_pmf(k, j, *p);
                    if prob > 0.0 {
                        out.push((j, prob));
                    }
                }
                out
            }
            ArrivalDistribution::Periodic { pattern } => {
                vec![(pattern[phase % pattern.len()], 1.0)]
            }
            ArrivalDistribution::PhasedBernoulli { probs } => {
                let p = probs[phase % probs.len()];
                if p == 0.0 {
                    vec![(0, 1.0)]
                } else if p == 1.0 {
                    vec![(1, 1.0)]
                } else {
                    vec![(0, 1.0 - p), (1, p)]
                }
            }
        }
    }

    /// Sample the slot's increment. Draw indices are unique per
    /// `(stream, slot, lane)` so coupled runs stay aligned.
    pub fn sample(&self, rng: &SlotRng, stream: Stream, slot: u64, lane: u64) -> u32 {
        match self {
            ArrivalDistribution::Bernoulli { p } => {
                u32::from(rng.bernoulli(stream, slot, lane, 0, *p))
            }
            ArrivalDistribution::Binomial { trials, p } => {
                rng.binomial(stream, slot, lane, *trials, *p)
            }
            ArrivalDistribution::Periodic { pattern } => pattern[(slot % pattern.len() as u64) as usize],
            ArrivalDistribution::PhasedBernoulli { probs } => {
                let p = probs[(slot % probs.len() as u64) as usize];
                u32::from(rng.bernoulli(stream, slot, lane, 0, p))
            }
        }
    }
}

/// Exact binomial pmf via multiplicative updates; `trials` is small by
/// construction (it bounds one slot's arrivals).
pub(crate) fn binomial_pmf(trials: u32, hits: u32, p: f64) -> f64 {
    if hits > trials {
        return 0.0;
    }
    // C(trials, hits) p^hits (1-p)^(trials-hits), computed stably in
    // log-free form because trials is small
    let mut value = 1.0f64;
    for i in 0..hits {
        value *= (trials - i) as f64 / (i + 1) as f64;
        value *= p;
    }
    for _ in 0..(trials - hits) {
        value *= 1.0 - p;
    }
    value
}

/// Arrival processes for every request type and link.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrivalSpec {
    request: Vec<ArrivalDistribution>,
    link: Vec<ArrivalDistribution>,
}

impl ArrivalSpec {
    pub fn new(
        request: Vec<ArrivalDistribution>,
        link: Vec<ArrivalDistribution>,
    ) -> Result<Self> {
        for (r, d) in request.iter().enumerate() {
            d.validate(&format!("request stream {r}"))?;
        }
        for (l, d) in link.iter().enumerate() {
            d.validate(&format!("link stream {l}"))?;
        }
        Ok(ArrivalSpec { request, link })
    }

    /// Check stream counts against a topology's shape.
    pub fn check_shape(&self, num_requests: usize, num_links: usize) -> Result<()> {
        if self.request.len() != num_requests {
            return Err(Error::InvalidModel(format!(
                "{} request streams for {} request types",
                self.request.len(),
                num_requests
            )));
        }
        if self.link.len() != num_links {
            return Err(Error::InvalidModel(format!(
                "{} link streams for {} links",
                self.link.len(),
                num_links
            )));
        }
        Ok(())
    }

    pub fn request_streams(&self) -> &[ArrivalDistribution] {
        &self.request
    }

    pub fn link_streams(&self) -> &[ArrivalDistribution] {
        &self.link
    }

    pub fn request_rates(&self) -> Vec<f64> {
        self.request.iter().map(|d| d.mean()).collect()
    }

    pub fn link_rates(&self) -> Vec<f64> {
        self.link.iter().map(|d| d.mean()).collect()
    }

    /// Least common period of the link streams. This is the phase count
    /// of the LLE chain; request streams never enter the LLE state.
    pub fn link_period(&self) -> usize {
        self.link.iter().map(|d| d.period()).fold(1, lcm)
    }

    /// Least common period across all streams (used by the simulator's
    /// phase bookkeeping and by fluid rates).
    pub fn full_period(&self) -> usize {
        self.request
            .iter()
            .chain(self.link.iter())
            .map(|d| d.period())
            .fold(1, lcm)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    fn gcd(mut a: usize, mut b: usize) -> usize {
        while b != 0 {
            let t = a % b;
            a = b;
            b = t;
        }
        a
    }
    a / gcd(a, b) * b
}
