//! Config file ingestion.
//!
//! Configs are TOML with three sections. `[topology]` and `[arrivals]`
//! are required, `[run]` is optional and everything in it has a default:
//!
//! ```toml
//! [topology]
//! request_links = [[0], [1], [0, 1, 2]]
//! gamma = [1.0, 1.0, 1.0]
//! buffer = 1
//! decoherence = [0.00001, 0.00001, 0.99999]
//! max_batch = [1, 1, 1]            # optional, defaults to buffer
//!
//! [arrivals]
//! request = [
//!     { dist = "bernoulli", p = 0.005 },
//!     { dist = "bernoulli", p = 0.005 },
//!     { dist = "bernoulli", p = 0.004 },
//! ]
//! link = [
//!     { dist = "bernoulli", p = 0.02 },
//!     { dist = "bernoulli", p = 0.02 },
//!     { dist = "bernoulli", p = 0.01 },
//! ]
//!
//! [run]
//! policy = "maxweight"             # maxweight | are | never | priority:2,0,1 | static:FILE
//! horizon = 100000
//! seed = 1
//! scale = 200.0                    # congestion scale c
//! are_tau = 29                     # optional; default ceil(ln(c)^2)
//! initial_queues = [67, 67, 67]    # optional, default zeros
//! initial_lles = [0, 0, 0]         # optional, default zeros
//! stride = 1                       # trace recording stride
//! state_cap = 4096                 # dense state-space cap
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ArrivalDistribution, ArrivalSpec, SwitchTopology};
use crate::DEFAULT_STATE_CAP;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawConfig {
    topology: RawTopology,
    arrivals: RawArrivals,
    #[serde(default)]
    run: RawRun,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawTopology {
    request_links: Vec<Vec<usize>>,
    gamma: Vec<f64>,
    buffer: u32,
    decoherence: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_batch: Option<Vec<u32>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawArrivals {
    request: Vec<RawDistribution>,
    link: Vec<RawDistribution>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "lowercase", deny_unknown_fields)]
enum RawDistribution {
    Bernoulli { p: f64 },
    Binomial { trials: u32, p: f64 },
    Periodic { pattern: Vec<u32> },
    #[serde(rename = "phased-bernoulli")]
    PhasedBernoulli { probs: Vec<f64> },
}

impl From<RawDistribution> for ArrivalDistribution {
    fn from(raw: RawDistribution) -> Self {
        match raw {
            RawDistribution::Bernoulli { p } => ArrivalDistribution::Bernoulli { p },
            RawDistribution::Binomial { trials, p } => {
                ArrivalDistribution::Binomial { trials, p }
            }
            RawDistribution::Periodic { pattern } => ArrivalDistribution::Periodic { pattern },
            RawDistribution::PhasedBernoulli { probs } => {
                ArrivalDistribution::PhasedBernoulli { probs }
            }
        }
    }
}

impl From<&ArrivalDistribution> for RawDistribution {
    fn from(d: &ArrivalDistribution) -> Self {
        match d {
            ArrivalDistribution::Bernoulli { p } => RawDistribution::Bernoulli { p: *p },
            ArrivalDistribution::Binomial { trials, p } => RawDistribution::Binomial {
                trials: *trials,
                p: *p,
            },
            ArrivalDistribution::Periodic { pattern } => RawDistribution::Periodic {
                pattern: pattern.clone(),
            },
            ArrivalDistribution::PhasedBernoulli { probs } => RawDistribution::PhasedBernoulli {
                probs: probs.clone(),
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct RawRun {
    policy: String,
    horizon: u64,
    seed: u64,
    scale: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    are_tau: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    initial_queues: Option<Vec<u64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    initial_lles: Option<Vec<u32>>,
    stride: u64,
    state_cap: usize,
}

impl Default for RawRun {
    fn default() -> Self {
        RawRun {
            policy: "maxweight".into(),
            horizon: 10_000,
            seed: 0,
            scale: 1.0,
            are_tau: None,
            initial_queues: None,
            initial_lles: None,
            stride: 1,
            state_cap: DEFAULT_STATE_CAP,
        }
    }
}

/// Validated run parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RunParams {
    pub policy: String,
    pub horizon: u64,
    pub seed: u64,
    /// Congestion scale `c`; sets the default re-solve window
    /// `ceil(ln(c)^2)` for the re-solving MDP policy.
    pub scale: f64,
    pub are_tau: Option<u32>,
    pub initial_queues: Vec<u64>,
    pub initial_lles: Vec<u32>,
    pub stride: u64,
    pub state_cap: usize,
}

impl RunParams {
    /// Re-solve window: the explicit override if given, else
    /// `ceil(ln(scale)^2)`, floored at 1.
    pub fn are_window(&self) -> u32 {
        match self.are_tau {
            Some(tau) => tau.max(1),
            None => window_for_scale(self.scale),
        }
    }
}

/// `ceil(ln(c)^2)`, floored at 1 slot.
pub fn window_for_scale(scale: f64) -> u32 {
    if scale <= 1.0 {
        return 1;
    }
    let w = scale.ln().powi(2).ceil();
    (w as u32).max(1)
}

/// A fully validated configuration.
#[derive(Debug, Clone)]
pub struct SwitchConfig {
    pub topology: SwitchTopology,
    pub arrivals: ArrivalSpec,
    pub run: RunParams,
}

impl SwitchConfig {
    pub fn new(topology: SwitchTopology, arrivals: ArrivalSpec, run: RunParams) -> Result<Self> {
        arrivals.check_shape(topology.num_requests(), topology.num_links())?;
        let cfg = SwitchConfig {
            topology,
            arrivals,
            run,
        };
        cfg.validate_run()?;
        Ok(cfg)
    }

    fn validate_run(&self) -> Result<()> {
        let run = &self.run;
        if run.initial_queues.len() != self.topology.num_requests() {
            return Err(Error::Config(format!(
                "run.initial_queues has {} entries for {} request types",
                run.initial_queues.len(),
                self.topology.num_requests()
            )));
        }
        if run.initial_lles.len() != self.topology.num_links() {
            return Err(Error::Config(format!(
                "run.initial_lles has {} entries for {} links",
                run.initial_lles.len(),
                self.topology.num_links()
            )));
        }
        for (l, &z) in run.initial_lles.iter().enumerate() {
            if z > self.topology.buffer() {
                return Err(Error::Config(format!(
                    "run.initial_lles[{l}] = {z} exceeds buffer {}",
                    self.topology.buffer()
                )));
            }
        }
        if run.stride == 0 {
            return Err(Error::Config("run.stride must be >= 1".into()));
        }
        if !(run.scale.is_finite() && run.scale > 0.0) {
            return Err(Error::Config(format!(
                "run.scale = {} must be finite and positive",
                run.scale
            )));
        }
        Ok(())
    }

    /// Normalized TOML echo of this configuration (defaults filled in,
    /// link sets sorted).
    pub fn to_toml_string(&self) -> String {
        let raw = RawConfig {
            topology: RawTopology {
                request_links: self.topology.request_links().to_vec(),
                gamma: self.topology.gamma().to_vec(),
                buffer: self.topology.buffer(),
                decoherence: self.topology.decoherence().to_vec(),
                max_batch: Some(self.topology.max_batch().to_vec()),
            },
            arrivals: RawArrivals {
                request: self
                    .arrivals
                    .request_streams()
                    .iter()
                    .map(RawDistribution::from)
                    .collect(),
                link: self
                    .arrivals
                    .link_streams()
                    .iter()
                    .map(RawDistribution::from)
                    .collect(),
            },
            run: RawRun {
                policy: self.run.policy.clone(),
                horizon: self.run.horizon,
                seed: self.run.seed,
                scale: self.run.scale,
                are_tau: self.run.are_tau,
                initial_queues: Some(self.run.initial_queues.clone()),
                initial_lles: Some(self.run.initial_lles.clone()),
                stride: self.run.stride,
                state_cap: self.run.state_cap,
            },
        };
        toml::to_string(&raw).expect("config serialization cannot fail")
    }
}

/// Parse and validate a config document.
pub fn load_config_str(text: &str) -> Result<SwitchConfig> {
    let raw: RawConfig =
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let max_batch = raw
        .topology
        .max_batch
        .clone()
        .unwrap_or_else(|| vec![raw.topology.buffer; raw.topology.request_links.len()]);
    let topology = SwitchTopology::new(
        raw.topology.request_links,
        raw.topology.gamma,
        raw.topology.buffer,
        raw.topology.decoherence,
        max_batch,
    )?;
    let arrivals = ArrivalSpec::new(
        raw.arrivals.request.into_iter().map(Into::into).collect(),
        raw.arrivals.link.into_iter().map(Into::into).collect(),
    )?;
    let run = RunParams {
        policy: raw.run.policy,
        horizon: raw.run.horizon,
        seed: raw.run.seed,
        scale: raw.run.scale,
        are_tau: raw.run.are_tau,
        initial_queues: raw
            .run
            .initial_queues
            .unwrap_or_else(|| vec![0; topology.num_requests()]),
        initial_lles: raw
            .run
            .initial_lles
            .unwrap_or_else(|| vec![0; topology.num_links()]),
        stride: raw.run.stride,
        state_cap: raw.run.state_cap,
    };
    SwitchConfig::new(topology, arrivals, run)
}

/// Read a config file from disk.
pub fn load_config(path: &Path) -> Result<SwitchConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    load_config_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"
        [topology]
        request_links = [[0], [1], [2, 1, 0]]
        gamma = [1.0, 1.0, 1.0]
        buffer = 1
        decoherence = [0.00001, 0.00001, 0.99999]

        [arrivals]
        request = [
            { dist = "bernoulli", p = 0.005 },
            { dist = "bernoulli", p = 0.005 },
            { dist = "bernoulli", p = 0.004 },
        ]
        link = [
            { dist = "bernoulli", p = 0.02 },
            { dist = "bernoulli", p = 0.02 },
            { dist = "bernoulli", p = 0.01 },
        ]

        [run]
        policy = "are"
        horizon = 1000
        seed = 7
        scale = 200.0
    "#;

    #[test]
    fn good_config_loads_with_defaults() {
        let cfg = load_config_str(GOOD).unwrap();
        assert_eq!(cfg.topology.num_requests(), 3);
        assert_eq!(cfg.topology.num_links(), 3);
        // unsorted link list got normalized
        assert_eq!(cfg.topology.links_of(2), &[0, 1, 2]);
        // max_batch defaulted to buffer
        assert_eq!(cfg.topology.max_batch(), &[1, 1, 1]);
        assert_eq!(cfg.run.initial_queues, vec![0, 0, 0]);
        assert_eq!(cfg.run.are_window(), 29); // ceil(ln(200)^2)
    }

    #[test]
    fn echo_round_trips() {
        let cfg = load_config_str(GOOD).unwrap();
        let echoed = cfg.to_toml_string();
        let again = load_config_str(&echoed).unwrap();
        assert_eq!(again.topology, cfg.topology);
        assert_eq!(again.arrivals, cfg.arrivals);
        assert_eq!(again.run, cfg.run);
        // echoing the echo is a fixed point (byte identical)
        assert_eq!(again.to_toml_string(), echoed);
    }

    #[test]
    fn bad_rate_is_named_in_error() {
        let bad = GOOD.replace("p = 0.02", "p = 1.5");
        let err = load_config_str(&bad).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("link stream 0"), "got: {msg}");
        assert!(msg.contains("1.5"), "got: {msg}");
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let bad = GOOD.replace(
            "{ dist = \"bernoulli\", p = 0.004 },",
            "",
        );
        let err = load_config_str(&bad).unwrap_err();
        assert!(err.to_string().contains("2 request streams"), "{err}");
    }

    #[test]
    fn initial_lles_above_buffer_rejected() {
        let bad = format!("{GOOD}\ninitial_lles = [2, 0, 0]\n");
        let err = load_config_str(&bad).unwrap_err();
        assert!(err.to_string().contains("exceeds buffer"), "{err}");
    }

    #[test]
    fn window_scale_examples() {
        assert_eq!(window_for_scale(200.0), 29);
        assert_eq!(window_for_scale(50.0), 16); // ln(50)^2 = 15.30 -> 16
        assert_eq!(window_for_scale(800.0), 45); // ln(800)^2 = 44.67 -> 45
        assert_eq!(window_for_scale(1.0), 1);
    }
}
