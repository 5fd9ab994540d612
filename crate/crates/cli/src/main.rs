use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gsl_cli::{CliError, Experiment};
use gsl_core::PolicyName;

#[derive(Parser)]
#[command(name = "gslsim", version, about = "GPU serverless policy simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file, or the name of a bundled config.
    #[arg(long)]
    config: String,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dotted-path override, e.g. `cluster.gpus=4`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one policy and write summary.json, invocations.csv, memory.csv.
    Run {
        #[command(flatten)]
        common: Common,
        /// Policy to run; defaults to the first one in the config.
        #[arg(long)]
        policy: Option<PolicyName>,
    },
    /// Run several policies on the same arrivals and write compare.json.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Restrict to these policies (repeatable).
        #[arg(long)]
        policy: Vec<PolicyName>,
    },
    /// Search for the largest stable Poisson rate.
    Peak {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        policy: Option<PolicyName>,
    },
    /// Per-stage resnet50 latency check.
    Validate {
        /// Defaults to the bundled `validate_table5`.
        #[arg(long, default_value = "validate_table5")]
        config: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Trace utilities.
    Trace {
        #[command(subcommand)]
        command: TraceCommand,
    },
    /// List bundled configs.
    ListConfigs,
}

#[derive(Subcommand)]
enum TraceCommand {
    /// Spread per-minute invocation counts into a `timestamp_ms,function` trace.
    Flatten {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Column naming the function (default `HashFunction`, else the first).
        #[arg(long)]
        id_column: Option<String>,
    },
}

fn load(common: &Common) -> Result<Experiment, CliError> {
    let mut exp = gsl_cli::load(&common.config, &common.overrides)?;
    if let Some(seed) = common.seed {
        exp.config.seed = seed;
    }
    Ok(exp)
}

fn execute(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Run { common, policy } => {
            let mut exp = load(&common)?;
            if let Some(p) = policy {
                exp.select_policies(&[p]);
            }
            let out = gsl_cli::run(&exp, common.out.as_deref())?;
            println!("{}", gsl_cli::digest(&out.summary));
        }
        Command::Compare { common, policy } => {
            let mut exp = load(&common)?;
            if !policy.is_empty() {
                exp.select_policies(&policy);
            }
            let rows = gsl_cli::compare(&exp, common.out.as_deref())?;
            println!(
                "{:<20} {:>12} {:>12} {:>12} {:>12} {:>8} {:>8}",
                "policy", "mean_ms", "p99_ms", "thr/s", "mem_mb", "lat_x", "mem_x"
            );
            let f = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
            for r in rows {
                println!(
                    "{:<20} {:>12} {:>12} {:>12.3} {:>12.1} {:>8} {:>8}",
                    r.policy,
                    f(r.mean_latency_ms),
                    f(r.p99_latency_ms),
                    r.throughput_per_s,
                    r.mean_gpu_memory_mb,
                    f(r.mean_latency_ratio),
                    f(r.memory_ratio)
                );
            }
        }
        Command::Peak { common, policy } => {
            let mut exp = load(&common)?;
            if let Some(p) = policy {
                exp.select_policies(&[p]);
            }
            let label = exp.config.policies[0].label();
            let res = gsl_cli::peak(&exp, common.out.as_deref())?;
            let note = if res.hit_ceiling { " (ceiling)" } else { "" };
            println!(
                "{label}: peak {:.3}/s{note} after {} probes",
                res.rate,
                res.trajectory.len()
            );
            if let Some(d) = &res.diagnostic {
                eprintln!("{d}");
            }
        }
        Command::Validate {
            config,
            out,
            overrides,
        } => {
            let exp = gsl_cli::load(&config, &overrides)?;
            let report = gsl_cli::validate(&exp, out.as_deref())?;
            println!(
                "{:<10} {:>10} {:>12} {:>8}",
                "row", "expected", "simulated", "error"
            );
            for r in &report.rows {
                println!(
                    "{:<10} {:>10.1} {:>12.3} {:>8.3}",
                    r.label,
                    r.expected_ms,
                    r.simulated_ms,
                    r.error_ms()
                );
            }
            if let (Some(mean), Some(min)) = (report.mean_warm_speedup, report.min_warm_speedup) {
                println!("warm speedup: mean {mean:.3}x min {min:.3}x");
            }
            if !report.pass {
                return Err(CliError::Simulation(format!(
                    "a row is off by more than {} ms",
                    report.tolerance_ms
                )));
            }
        }
        Command::Trace {
            command:
                TraceCommand::Flatten {
                    input,
                    output,
                    id_column,
                },
        } => {
            let n = gsl_cli::trace_flatten(&input, &output, id_column.as_deref())?;
            println!("{n} rows written to {}", output.display());
        }
        Command::ListConfigs => {
            for (name, text) in gsl_cli::BUNDLED {
                let desc = serde_json::from_str::<serde_json::Value>(text)
                    .ok()
                    .and_then(|v| v["description"].as_str().map(str::to_string))
                    .unwrap_or_default();
                println!("{name:<22} {desc}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gslsim: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
