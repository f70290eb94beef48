//! Implementations behind the CLI subcommands.
//!
//! Each command loads a validated config, does its work, writes CSV
//! artifacts plus a `report.txt` into the output directory, and returns
//! the report so the binary can echo it to stdout. Artifacts carry no
//! timestamps or host paths: a rerun with the same inputs reproduces
//! them byte for byte.

use std::path::Path;

use qswitch::analysis::{drain_bound, integrate_fluid, lyapunov_drift, quadratic_potential, verify_uniform_mixing, FluidOptions};
use qswitch::capacity::{capacity_query, direction_grid, max_min_slack, support_function, support_function_lp, CapacityVerdict};
use qswitch::dynamics::{simulate, write_trace_csv, SimTrace};
use qswitch::mdp::{evaluate_policy, policy_iteration, solve_average_reward, AreOptions, MdpTables, PiOptions};
use qswitch::model::{load_config_str, SwitchConfig};
use qswitch::schedulers::{build_chooser, parse_policy};
use qswitch::{Error, Result};

use crate::pool::run_jobs;
use crate::presets::seeded_directions;
use crate::report::{csv_row, write_csv, Report};

pub fn verdict_label(v: CapacityVerdict) -> &'static str {
    match v {
        CapacityVerdict::InsideStrict => "inside-strict",
        CapacityVerdict::Boundary => "boundary",
        CapacityVerdict::Outside => "outside",
    }
}

fn ensure_dir(out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    Ok(())
}

fn write_config_echo(cfg: &SwitchConfig, out_dir: &Path) -> Result<()> {
    std::fs::write(out_dir.join("config.toml"), cfg.to_toml_string())?;
    Ok(())
}

fn run_configured_policy(cfg: &SwitchConfig, policy: &str, seed: u64) -> Result<SimTrace> {
    let spec = parse_policy(policy)?;
    let mut chooser = build_chooser(
        &spec,
        &cfg.topology,
        &cfg.arrivals,
        cfg.run.are_window() as u64,
        cfg.run.state_cap,
    )?;
    let initial = qswitch::dynamics::SwitchState::new(
        &cfg.topology,
        cfg.run.initial_queues.clone(),
        cfg.run.initial_lles.clone(),
    )?;
    simulate(
        &cfg.topology,
        &cfg.arrivals,
        initial,
        cfg.run.horizon,
        seed,
        chooser.as_mut(),
        cfg.run.stride,
    )
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

pub fn simulate_cmd(cfg: &SwitchConfig, out_dir: &Path) -> Result<Report> {
    ensure_dir(out_dir)?;
    write_config_echo(cfg, out_dir)?;
    let trace = run_configured_policy(cfg, &cfg.run.policy, cfg.run.seed)?;

    let mut file = std::io::BufWriter::new(std::fs::File::create(out_dir.join("trace.csv"))?);
    write_trace_csv(&trace, &mut file)?;
    drop(file);

    let drift = lyapunov_drift(&trace, (cfg.run.horizon / 20).max(1));
    let mut report = Report::new();
    report.push("policy", &cfg.run.policy);
    report.push("horizon", trace.horizon);
    report.push("seed", trace.seed);
    report.push("stride", trace.stride);
    report.push_slice(
        "final_queues",
        &trace.final_state.q.iter().map(|&q| q as f64).collect::<Vec<_>>(),
    );
    report.push_slice(
        "final_lles",
        &trace.final_state.z.iter().map(|&z| z as f64).collect::<Vec<_>>(),
    );
    report.push("final_total", trace.final_state.total_queue());
    let horizon = trace.horizon.max(1) as f64;
    report.push_slice(
        "request_arrival_rate",
        &trace
            .arrivals_requests
            .iter()
            .map(|&a| a as f64 / horizon)
            .collect::<Vec<_>>(),
    );
    report.push_slice(
        "request_departure_rate",
        &trace
            .departures_requests
            .iter()
            .map(|&d| d as f64 / horizon)
            .collect::<Vec<_>>(),
    );
    report.push_slice(
        "lle_consumption_rate",
        &trace
            .departures_lles
            .iter()
            .map(|&d| d as f64 / horizon)
            .collect::<Vec<_>>(),
    );
    report.push("median_potential_drift", drift.median_slope);
    report.push("drift_windows_positive", drift.positive_windows);
    report.push("drift_windows_negative", drift.negative_windows);
    report.write_file(&out_dir.join("report.txt"))?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// mdp-solve
// ---------------------------------------------------------------------------

pub fn mdp_solve_cmd(
    cfg: &SwitchConfig,
    weights: Option<Vec<f64>>,
    out_dir: &Path,
) -> Result<Report> {
    ensure_dir(out_dir)?;
    write_config_echo(cfg, out_dir)?;
    let r = cfg.topology.num_requests();
    let weights = match weights {
        Some(w) => {
            if w.len() != r {
                return Err(Error::Config(format!(
                    "{} weights for {} request types",
                    w.len(),
                    r
                )));
            }
            w
        }
        None => {
            let q: Vec<f64> = cfg.run.initial_queues.iter().map(|&q| q as f64).collect();
            if q.iter().any(|x| *x > 0.0) {
                q
            } else {
                vec![1.0; r]
            }
        }
    };

    let tables = MdpTables::build(&cfg.topology, &cfg.arrivals, cfg.run.state_cap)?;
    let sol = solve_average_reward(&tables, &weights, &AreOptions::default(), None)?;
    let pi = policy_iteration(&tables, &weights, &PiOptions::default())?;
    let eval = evaluate_policy(&tables, &sol.policy)?;

    let chain = &tables.chain;
    let size = chain.space.size;
    let mut rows = Vec::new();
    for phase in 0..chain.phases {
        for w_rank in 0..size {
            let idx = chain.decision_index(w_rank, phase);
            let w = chain.space.unrank(w_rank);
            let action = sol.policy.actions[idx];
            let batches = chain.schedules[action].batches();
            let mut fields = vec![idx.to_string(), phase.to_string()];
            fields.extend(w.iter().map(|x| x.to_string()));
            fields.extend(batches.iter().map(|x| x.to_string()));
            fields.push(sol.bias[idx].to_string());
            rows.push(csv_row(&fields));
        }
    }
    let l = cfg.topology.num_links();
    let mut header = vec!["decision_index".to_string(), "phase".to_string()];
    header.extend((0..l).map(|i| format!("w_{i}")));
    header.extend((0..r).map(|i| format!("n_{i}")));
    header.push("bias".to_string());
    write_csv(
        &out_dir.join("policy.csv"),
        "solved-policy",
        &[("states", chain.decision_states().to_string())],
        &header.join(","),
        &rows,
    )?;

    let mut report = Report::new();
    report.push_slice("weights", &weights);
    report.push("decision_states", chain.decision_states());
    report.push("gain", sol.gain);
    report.push("bellman_residual", sol.residual);
    report.push("sweeps", sol.sweeps);
    report.push("pi_gain", pi.gain);
    report.push("gain_gap", (sol.gain - pi.gain).abs());
    report.push("pi_iterations", pi.iterations);
    report.push_slice("service_rates", &eval.service_rates);
    report.push(
        "reward_rate_gap",
        (eval.reward_rate(&weights) - sol.gain).abs(),
    );
    report.write_file(&out_dir.join("report.txt"))?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// capacity
// ---------------------------------------------------------------------------

pub fn capacity_cmd(
    cfg: &SwitchConfig,
    directions: usize,
    grid: Option<u32>,
    epsilon: f64,
    out_dir: &Path,
) -> Result<Report> {
    ensure_dir(out_dir)?;
    write_config_echo(cfg, out_dir)?;
    let tables = MdpTables::build(&cfg.topology, &cfg.arrivals, cfg.run.state_cap)?;
    let r = cfg.topology.num_requests();
    let dirs = match grid {
        Some(m) => direction_grid(r, m),
        None => seeded_directions(r, directions, cfg.run.seed),
    };

    let mut rows = Vec::new();
    let mut max_diff = 0.0f64;
    for q in &dirs {
        let rvi = support_function(&tables, q)?;
        let lp = support_function_lp(&tables, q)?;
        let diff = (rvi - lp).abs();
        max_diff = max_diff.max(diff);
        let mut fields: Vec<String> = q.iter().map(|x| x.to_string()).collect();
        fields.push(rvi.to_string());
        fields.push(lp.to_string());
        fields.push(diff.to_string());
        rows.push(csv_row(&fields));
    }
    let mut header: Vec<String> = (0..r).map(|i| format!("q_{i}")).collect();
    header.push("support_rvi".to_string());
    header.push("support_lp".to_string());
    header.push("abs_diff".to_string());
    write_csv(
        &out_dir.join("boundary.csv"),
        "support-sweep",
        &[("directions", dirs.len().to_string())],
        &header.join(","),
        &rows,
    )?;

    let lambda = cfg.arrivals.request_rates();
    let query = capacity_query(&tables, &lambda, epsilon)?;
    let mut report = Report::new();
    report.push_slice("arrival_rates", &lambda);
    report.push("epsilon", epsilon);
    report.push("slack", query.slack);
    report.push("verdict", verdict_label(query.verdict));
    report.push("meets_epsilon", query.meets_epsilon);
    report.push_slice("witness_rates", &query.witness_rates);
    report.push("directions", dirs.len());
    report.push("max_support_gap", max_diff);
    report.write_file(&out_dir.join("report.txt"))?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// mixing
// ---------------------------------------------------------------------------

pub fn mixing_cmd(cfg: &SwitchConfig, directions: usize, out_dir: &Path) -> Result<Report> {
    ensure_dir(out_dir)?;
    write_config_echo(cfg, out_dir)?;
    let r = cfg.topology.num_requests();
    let dirs = seeded_directions(r, directions, cfg.run.seed);
    let mix = verify_uniform_mixing(&cfg.topology, &cfg.arrivals, &dirs, cfg.run.state_cap)?;

    let mut rows = Vec::new();
    for (q, rho) in dirs.iter().zip(&mix.rhos) {
        let mut fields: Vec<String> = q.iter().map(|x| x.to_string()).collect();
        fields.push(rho.to_string());
        rows.push(csv_row(&fields));
    }
    let mut header: Vec<String> = (0..r).map(|i| format!("q_{i}")).collect();
    header.push("rho".to_string());
    write_csv(
        &out_dir.join("rho.csv"),
        "mixing-coefficients",
        &[("directions", dirs.len().to_string())],
        &header.join(","),
        &rows,
    )?;

    let tv_rows: Vec<String> = mix
        .tv_curve
        .iter()
        .enumerate()
        .map(|(step, tv)| csv_row(&[(step + 1).to_string(), tv.to_string()]))
        .collect();
    write_csv(
        &out_dir.join("tv.csv"),
        "tv-decay",
        &[],
        "step,worst_tv",
        &tv_rows,
    )?;

    let mut report = Report::new();
    report.push("directions", dirs.len());
    report.push("rho", mix.rho);
    report.push("rho_bound", mix.rho_bound);
    report.push("margin", mix.rho_bound - mix.rho);
    report.push("tv_steps_recorded", mix.tv_curve.len());
    report.write_file(&out_dir.join("report.txt"))?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// fluid
// ---------------------------------------------------------------------------

pub fn fluid_cmd(
    cfg: &SwitchConfig,
    qbar0: Option<Vec<f64>>,
    horizon: f64,
    dt: f64,
    out_dir: &Path,
) -> Result<Report> {
    ensure_dir(out_dir)?;
    write_config_echo(cfg, out_dir)?;
    let r = cfg.topology.num_requests();
    let qbar0 = match qbar0 {
        Some(q) => {
            if q.len() != r {
                return Err(Error::Config(format!(
                    "{} initial fluid queues for {} request types",
                    q.len(),
                    r
                )));
            }
            q
        }
        None => cfg
            .run
            .initial_queues
            .iter()
            .map(|&q| q as f64 / cfg.run.scale)
            .collect(),
    };

    let lambda = cfg.arrivals.request_rates();
    let tables = MdpTables::build(&cfg.topology, &cfg.arrivals, cfg.run.state_cap)?;
    let path = integrate_fluid(&tables, &lambda, &qbar0, horizon, dt, &FluidOptions::default())?;

    let mut rows = Vec::new();
    for state in &path {
        let mut fields = vec![state.time.to_string()];
        fields.extend(state.qbar.iter().map(|x| x.to_string()));
        fields.extend(state.dbar.iter().map(|x| x.to_string()));
        rows.push(csv_row(&fields));
    }
    let mut header = vec!["time".to_string()];
    header.extend((0..r).map(|i| format!("qbar_{i}")));
    header.extend((0..r).map(|i| format!("dbar_{i}")));
    write_csv(
        &out_dir.join("fluid.csv"),
        "fluid-path",
        &[("dt", dt.to_string())],
        &header.join(","),
        &rows,
    )?;

    // Slack-certified drain envelope: when the rates sit strictly
    // inside the region, the potential must stay under the square-root
    // drain curve and hit zero by the implied deadline.
    let (slack, _, _) = max_min_slack(&tables, &lambda)?;
    let l0 = quadratic_potential(&qbar0);
    let mut report = Report::new();
    report.push_slice("qbar0", &qbar0);
    report.push("horizon", horizon);
    report.push("dt", dt);
    report.push("slack", slack);
    report.push("initial_potential", l0);
    let last = path.last().expect("integration returns at least one state");
    report.push_slice("final_qbar", &last.qbar);
    report.push_slice("final_dbar", &last.dbar);
    let drained = path
        .iter()
        .find(|s| s.qbar.iter().all(|&q| q <= 1e-9))
        .map(|s| s.time);
    report.push(
        "drained_at",
        drained.map_or("never".to_string(), |t| t.to_string()),
    );
    if slack > 0.0 {
        let deadline = 2.0 * (r as f64).sqrt() * l0.sqrt() / slack;
        let envelope_ok = path.iter().all(|s| {
            quadratic_potential(&s.qbar) <= drain_bound(l0, slack, r, s.time) + 1e-9
        });
        report.push("drain_deadline", deadline);
        report.push("drain_envelope_holds", envelope_ok);
    }
    report.write_file(&out_dir.join("report.txt"))?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

/// One accessor step of a parameter path: a table key or an array index.
#[derive(Debug, Clone, PartialEq)]
enum Access {
    Key(String),
    Index(usize),
}

/// Parse `arrivals.request[2].p` into table/array accessors.
fn parse_path(path: &str) -> Result<Vec<Access>> {
    let mut out = Vec::new();
    if path.is_empty() {
        return Err(Error::Config("empty parameter path".into()));
    }
    for part in path.split('.') {
        let mut rest = part;
        let key_end = rest.find('[').unwrap_or(rest.len());
        let key = &rest[..key_end];
        if key.is_empty() {
            return Err(Error::Config(format!(
                "parameter path {path:?}: segment {part:?} has no key"
            )));
        }
        out.push(Access::Key(key.to_string()));
        rest = &rest[key_end..];
        while let Some(stripped) = rest.strip_prefix('[') {
            let close = stripped.find(']').ok_or_else(|| {
                Error::Config(format!("parameter path {path:?}: unclosed index in {part:?}"))
            })?;
            let idx: usize = stripped[..close].parse().map_err(|_| {
                Error::Config(format!(
                    "parameter path {path:?}: bad index {:?}",
                    &stripped[..close]
                ))
            })?;
            out.push(Access::Index(idx));
            rest = &stripped[close + 1..];
        }
        if !rest.is_empty() {
            return Err(Error::Config(format!(
                "parameter path {path:?}: trailing {rest:?} in segment {part:?}"
            )));
        }
    }
    Ok(out)
}

/// Replace the value at `path` inside a parsed TOML document. The path
/// must resolve to an existing entry; creating new keys is refused so
/// typos fail loudly instead of silently sweeping nothing.
fn set_path(root: &mut toml::Value, path: &str, value: toml::Value) -> Result<()> {
    let accessors = parse_path(path)?;
    let mut cur = root;
    for (i, acc) in accessors.iter().enumerate() {
        let last = i + 1 == accessors.len();
        match acc {
            Access::Key(k) => {
                let table = cur.as_table_mut().ok_or_else(|| {
                    Error::Config(format!("parameter path {path:?}: {k:?} is not inside a table"))
                })?;
                let slot = table.get_mut(k).ok_or_else(|| {
                    Error::Config(format!("parameter path {path:?}: no key {k:?}"))
                })?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                cur = slot;
            }
            Access::Index(idx) => {
                let arr = cur.as_array_mut().ok_or_else(|| {
                    Error::Config(format!(
                        "parameter path {path:?}: index [{idx}] into a non-array"
                    ))
                })?;
                let len = arr.len();
                let slot = arr.get_mut(*idx).ok_or_else(|| {
                    Error::Config(format!(
                        "parameter path {path:?}: index [{idx}] out of range 0..{len}"
                    ))
                })?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                cur = slot;
            }
        }
    }
    unreachable!("loop returns on the last accessor")
}

/// Parse one `--values` token as a TOML literal, falling back to a
/// plain string when it is not valid TOML on its own.
fn parse_value(token: &str) -> toml::Value {
    let wrapped = format!("v = {token}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut table) => table.remove("v").expect("key v just parsed"),
        Err(_) => toml::Value::String(token.to_string()),
    }
}

pub struct SweepArgs {
    pub axis: String,
    pub values: Vec<String>,
    pub replications: u64,
    pub policies: Vec<String>,
}

pub fn sweep_cmd(
    config_text: &str,
    seed_override: Option<u64>,
    args: &SweepArgs,
    threads: usize,
    out_dir: &Path,
) -> Result<Report> {
    ensure_dir(out_dir)?;
    let base: toml::Value = config_text
        .parse()
        .map_err(|e| Error::Config(format!("sweep base config: {e}")))?;
    let base_cfg = load_config_str(config_text)?;
    let base_seed = seed_override.unwrap_or(base_cfg.run.seed);
    let r = base_cfg.topology.num_requests();
    if args.policies.is_empty() {
        return Err(Error::Config("sweep needs at least one policy".into()));
    }
    for policy in &args.policies {
        parse_policy(policy)?;
    }
    let values: Vec<String> = args
        .values
        .iter()
        .filter(|v| !v.is_empty())
        .cloned()
        .collect();
    if args.replications == 0 {
        return Err(Error::Config("sweep needs at least one replication".into()));
    }

    // Resolve every swept config up front so a bad axis value fails
    // before any simulation starts.
    let mut configs: Vec<(String, SwitchConfig)> = Vec::new();
    for token in &values {
        let mut doc = base.clone();
        set_path(&mut doc, &args.axis, parse_value(token))?;
        let text = toml::to_string(&doc)
            .map_err(|e| Error::Config(format!("sweep config serialization: {e}")))?;
        let cfg = load_config_str(&text)?;
        if cfg.topology.num_requests() != r {
            return Err(Error::Config(format!(
                "axis {:?} changes the number of request types; sweep rows would not align",
                args.axis
            )));
        }
        configs.push((token.clone(), cfg));
    }

    let reps = args.replications;
    let jobs = configs.len() * reps as usize;
    let results = run_jobs(jobs, threads, |i| -> Result<Vec<String>> {
        let (token, cfg) = &configs[i / reps as usize];
        let rep = (i % reps as usize) as u64;
        let seed = base_seed + rep;
        let mut rows = Vec::new();
        for policy in &args.policies {
            let trace = run_configured_policy(cfg, policy, seed)?;
            let mut fields = vec![
                token.clone(),
                rep.to_string(),
                policy.clone(),
                seed.to_string(),
            ];
            fields.extend(trace.arrivals_requests.iter().map(|x| x.to_string()));
            fields.extend(trace.departures_requests.iter().map(|x| x.to_string()));
            fields.extend(trace.final_state.q.iter().map(|x| x.to_string()));
            fields.push(trace.final_state.total_queue().to_string());
            rows.push(csv_row(&fields));
        }
        Ok(rows)
    });

    let mut rows = Vec::new();
    for chunk in results {
        rows.extend(chunk?);
    }
    let mut header = vec![
        "value".to_string(),
        "replication".to_string(),
        "policy".to_string(),
        "seed".to_string(),
    ];
    header.extend((0..r).map(|i| format!("arrivals_{i}")));
    header.extend((0..r).map(|i| format!("departures_{i}")));
    header.extend((0..r).map(|i| format!("final_q_{i}")));
    header.push("final_total".to_string());
    write_csv(
        &out_dir.join("sweep.csv"),
        "sweep",
        &[
            ("axis", args.axis.clone()),
            ("replications", reps.to_string()),
        ],
        &header.join(","),
        &rows,
    )?;

    let mut report = Report::new();
    report.push("axis", &args.axis);
    report.push("values", values.len());
    report.push("replications", reps);
    report.push("policies", args.policies.join(","));
    report.push("rows", rows.len());
    report.write_file(&out_dir.join("report.txt"))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_parser_handles_keys_and_indices() {
        assert_eq!(
            parse_path("arrivals.request[2].p").unwrap(),
            vec![
                Access::Key("arrivals".into()),
                Access::Key("request".into()),
                Access::Index(2),
                Access::Key("p".into()),
            ]
        );
        assert!(parse_path("").is_err());
        assert!(parse_path("a.[2]").is_err());
        assert!(parse_path("a[xyz]").is_err());
        assert!(parse_path("a[2").is_err());
        assert!(parse_path("a[2]b").is_err());
    }

    #[test]
    fn set_path_replaces_existing_entries_only() {
        let mut doc: toml::Value = "x = 1\n[t]\ny = [1, 2, 3]\n".parse().unwrap();
        set_path(&mut doc, "x", parse_value("5")).unwrap();
        set_path(&mut doc, "t.y[1]", parse_value("9")).unwrap();
        assert_eq!(doc["x"].as_integer(), Some(5));
        assert_eq!(doc["t"]["y"][1].as_integer(), Some(9));
        assert!(set_path(&mut doc, "missing", parse_value("1")).is_err());
        assert!(set_path(&mut doc, "t.y[7]", parse_value("1")).is_err());
        assert!(set_path(&mut doc, "x.y", parse_value("1")).is_err());
    }

    #[test]
    fn value_tokens_parse_as_toml_literals() {
        assert_eq!(parse_value("0.25").as_float(), Some(0.25));
        assert_eq!(parse_value("12").as_integer(), Some(12));
        assert_eq!(parse_value("true").as_bool(), Some(true));
        assert_eq!(parse_value("\"are\"").as_str(), Some("are"));
        // Bare words are not TOML literals; they fall back to strings.
        assert_eq!(parse_value("maxweight").as_str(), Some("maxweight"));
    }
}
