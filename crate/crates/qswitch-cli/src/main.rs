//! `qswitch`: simulate scheduling policies on entanglement switches,
//! solve their average-reward scheduling problems, test capacity-region
//! membership, and reproduce the bundled experiments.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use qswitch::model::{load_config, SwitchConfig};
use qswitch::{Error, Result};
use qswitch_cli::commands::{self, SweepArgs};
use qswitch_cli::presets::{self, PresetOptions};

#[derive(Parser)]
#[command(name = "qswitch", version, about = "Quantum-switch scheduling laboratory")]
struct Cli {
    /// Config file (TOML). Required by every subcommand except `scenario`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for reports and CSV artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Worker threads for replicated runs.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the configured policy and write the trace.
    Simulate,

    /// Solve the average-reward scheduling problem at fixed weights.
    MdpSolve {
        /// Queue weights, comma separated; defaults to the config's
        /// initial queues (or all ones when those are zero).
        #[arg(long, value_delimiter = ',')]
        weights: Option<Vec<f64>>,
    },

    /// Capacity membership test plus a support-function sweep.
    Capacity {
        /// Number of sampled simplex directions.
        #[arg(long, default_value_t = 64)]
        directions: usize,

        /// Use the integer composition grid with this resolution
        /// instead of sampled directions.
        #[arg(long)]
        grid: Option<u32>,

        /// Required uniform slack for the epsilon-deep membership test.
        #[arg(long, default_value_t = 0.0)]
        epsilon: f64,
    },

    /// Dobrushin coefficients of solved-policy LLE kernels.
    Mixing {
        /// Number of sampled weight directions.
        #[arg(long, default_value_t = 8)]
        directions: usize,
    },

    /// Integrate the fluid trajectory of the re-solving policy.
    Fluid {
        /// Initial fluid queues, comma separated; defaults to the
        /// config's initial queues divided by its scale.
        #[arg(long, value_delimiter = ',')]
        qbar0: Option<Vec<f64>>,

        #[arg(long, default_value_t = 2.0)]
        horizon: f64,

        #[arg(long, default_value_t = 0.01)]
        dt: f64,
    },

    /// Run a bundled, self-checking experiment preset.
    Scenario {
        /// One of the bundled preset names.
        name: String,

        /// Step parameter of the small-step priority counterexample.
        #[arg(long)]
        h: Option<f64>,
    },

    /// Cross-product parameter sweep with common random numbers
    /// across policies.
    Sweep {
        /// Dotted config path to vary, e.g. `arrivals.request[2].p`.
        #[arg(long)]
        axis: String,

        /// Comma-separated axis values, parsed as TOML literals.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,

        #[arg(long, default_value_t = 1)]
        replications: u64,

        /// Policies to pair at common random numbers.
        #[arg(long, value_delimiter = ',', default_value = "maxweight,are")]
        policies: Vec<String>,
    },
}

fn load_required_config(cli: &Cli) -> Result<SwitchConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("this subcommand needs --config".into()))?;
    let mut cfg = load_config(path)?;
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
    }
    Ok(cfg)
}

/// Returns whether all checks passed (non-scenario commands have none).
fn dispatch(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Simulate => {
            let cfg = load_required_config(cli)?;
            let report = commands::simulate_cmd(&cfg, &cli.out)?;
            print!("{}", report.render());
            Ok(true)
        }
        Command::MdpSolve { weights } => {
            let cfg = load_required_config(cli)?;
            let report = commands::mdp_solve_cmd(&cfg, weights.clone(), &cli.out)?;
            print!("{}", report.render());
            Ok(true)
        }
        Command::Capacity {
            directions,
            grid,
            epsilon,
        } => {
            let cfg = load_required_config(cli)?;
            let report = commands::capacity_cmd(&cfg, *directions, *grid, *epsilon, &cli.out)?;
            print!("{}", report.render());
            Ok(true)
        }
        Command::Mixing { directions } => {
            let cfg = load_required_config(cli)?;
            let report = commands::mixing_cmd(&cfg, *directions, &cli.out)?;
            print!("{}", report.render());
            Ok(true)
        }
        Command::Fluid { qbar0, horizon, dt } => {
            let cfg = load_required_config(cli)?;
            let report = commands::fluid_cmd(&cfg, qbar0.clone(), *horizon, *dt, &cli.out)?;
            print!("{}", report.render());
            Ok(true)
        }
        Command::Scenario { name, h } => {
            if cli.config.is_some() {
                return Err(Error::Config(
                    "scenario expands its own bundled config; --config is not accepted".into(),
                ));
            }
            let opts = PresetOptions {
                seed: cli.seed,
                h: *h,
                threads: cli.threads,
            };
            let outcome = presets::run_preset(name, &opts, &cli.out)?;
            print!("{}", outcome.report.render());
            for check in &outcome.checks {
                println!(
                    "{}: {} ({})",
                    check.name,
                    if check.passed { "pass" } else { "FAIL" },
                    check.detail
                );
            }
            println!(
                "scenario {name}: {}",
                if outcome.passed() { "PASS" } else { "FAIL" }
            );
            Ok(outcome.passed())
        }
        Command::Sweep {
            axis,
            values,
            replications,
            policies,
        } => {
            let path = cli
                .config
                .as_ref()
                .ok_or_else(|| Error::Config("this subcommand needs --config".into()))?;
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let args = SweepArgs {
                axis: axis.clone(),
                values: values.clone(),
                replications: *replications,
                policies: policies.clone(),
            };
            let report = commands::sweep_cmd(&text, cli.seed, &args, cli.threads, &cli.out)?;
            print!("{}", report.render());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let started = Instant::now();
    match dispatch(&cli) {
        Ok(true) => {
            eprintln!("done in {:.2}s", started.elapsed().as_secs_f64());
            ExitCode::SUCCESS
        }
        Ok(false) => {
            eprintln!("checks failed after {:.2}s", started.elapsed().as_secs_f64());
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
