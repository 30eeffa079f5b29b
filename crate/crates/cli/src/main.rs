//! `focus` runs simulation configs, prices deployments, and summarizes runs.
//!
//! Exit codes: 0 on success, 2 for configuration problems, 3 for scenario
//! execution failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use focus_core::cost::{federated_device_tally, icl_device_tally, NetworkSpec};
use focus_core::config::load_config;
use focus_core::domain::ModelSpec;
use focus_core::runner::run_all;
use focus_core::Error;

#[derive(Parser)]
#[command(name = "focus", version, about = "Federated learning versus local in-context learning, costed and ledgered")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute every scenario in a config file and write run artifacts.
    Run {
        /// Path to the JSON run configuration.
        config: PathBuf,
        /// Base directory for outputs; artifacts land in <out>/<run name>.
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Price a deployment without running anything.
    Cost(CostArgs),
    /// Summarize a finished run directory.
    Report {
        /// Directory previously produced by `focus run`.
        dir: PathBuf,
    },
}

#[derive(Args)]
struct CostArgs {
    /// Trained or downloaded model parameter count (scientific notation ok).
    #[arg(long)]
    params: f64,
    /// Federated rounds.
    #[arg(long, default_value_t = 100)]
    rounds: u64,
    /// Local optimizer steps per device over the whole run.
    #[arg(long, default_value_t = 1000)]
    steps: u64,
    /// Examples per optimizer step.
    #[arg(long, default_value_t = 32)]
    batch: u64,
    /// Tokens per training example.
    #[arg(long, default_value_t = 512)]
    seq_len: u64,
    /// Forward passes served on the device.
    #[arg(long, default_value_t = 1000)]
    inference_calls: u64,
    /// Tokens per forward pass.
    #[arg(long, default_value_t = 512)]
    inference_len: u64,
    /// Downlink in megabits per second.
    #[arg(long, default_value_t = 61.0)]
    down_mbps: f64,
    /// Uplink in megabits per second.
    #[arg(long, default_value_t = 8.0)]
    up_mbps: f64,
    /// Bytes per parameter on the wire and on disk.
    #[arg(long, default_value_t = 4)]
    bytes_per_param: u64,
    /// Independent personal tasks the device serves.
    #[arg(long, default_value_t = 1)]
    tasks: u64,
}

fn run(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Run { config, out } => {
            let cfg = load_config(&config)?;
            let dir = out.join(&cfg.name);
            let outputs = run_all(&cfg, &dir)?;
            println!("run `{}` complete: {}", cfg.name, dir.display());
            for oc in &outputs.outcomes {
                for v in &oc.variants {
                    let variant = match (v.policy, v.k) {
                        (Some(p), Some(k)) => format!(" {}/k={k}", p.name()),
                        (None, Some(k)) => format!(" k={k}"),
                        _ => String::new(),
                    };
                    println!(
                        "  {} seed={} [{}]{}: macro_acc={:.4} micro_acc={:.4} secrecy={}",
                        oc.scenario,
                        oc.seed,
                        oc.method_tag,
                        variant,
                        v.report.macro_accuracy,
                        v.report.micro_accuracy,
                        if oc.secrecy.holds() { "holds" } else { "violated" },
                    );
                }
            }
            Ok(())
        }
        Command::Cost(args) => {
            if !(args.params.is_finite() && args.params >= 1.0) {
                return Err(Error::Config {
                    path: "--params".into(),
                    message: "must be a positive parameter count".into(),
                });
            }
            let spec = ModelSpec::new(args.params as u64, args.bytes_per_param, 1024)?;
            let network = NetworkSpec {
                down_bps: args.down_mbps * 1e6,
                up_bps: args.up_mbps * 1e6,
            };
            let federated = federated_device_tally(
                &spec,
                args.rounds,
                args.steps,
                args.batch,
                args.seq_len,
                args.inference_calls,
                args.inference_len,
                &network,
            )
            .for_tasks(args.tasks);
            let in_context =
                icl_device_tally(&spec, args.inference_calls, args.inference_len, &network)
                    .for_tasks(args.tasks);
            let doc = serde_json::json!({
                "federated": federated,
                "in_context": in_context,
            });
            println!("{}", serde_json::to_string_pretty(&doc)?);
            Ok(())
        }
        Command::Report { dir } => {
            let metrics_path = dir.join("metrics.json");
            let text = std::fs::read_to_string(&metrics_path)?;
            let rows: serde_json::Value = serde_json::from_str(&text)?;
            let rows = rows.as_array().cloned().unwrap_or_default();
            println!(
                "{:<18} {:<26} {:>6} {:<16} {:>4} {:>10} {:>10} {:>9}",
                "scenario", "method", "seed", "policy", "k", "macro_acc", "micro_acc", "secrecy"
            );
            for r in &rows {
                let s = |k: &str| r[k].as_str().unwrap_or("-").to_string();
                let f = |k: &str| {
                    r[k].as_f64().map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
                };
                println!(
                    "{:<18} {:<26} {:>6} {:<16} {:>4} {:>10} {:>10} {:>9}",
                    s("scenario"),
                    s("method"),
                    r["seed"].as_u64().unwrap_or(0),
                    r["policy"].as_str().unwrap_or("-"),
                    r["k"].as_u64().map(|k| k.to_string()).unwrap_or_else(|| "-".into()),
                    f("macro_accuracy"),
                    f("micro_accuracy"),
                    if r["secrecy_holds"].as_bool().unwrap_or(false) { "holds" } else { "violated" },
                );
            }
            let cost_path = dir.join("cost.json");
            if let Ok(text) = std::fs::read_to_string(&cost_path) {
                let costs: serde_json::Value = serde_json::from_str(&text)?;
                println!();
                println!(
                    "{:<18} {:>6} {:<12} {:>12} {:>12} {:>12} {:>10}",
                    "scenario", "seed", "kind", "train_flops", "infer_flops", "bytes_down", "xfer_h"
                );
                for r in costs.as_array().cloned().unwrap_or_default() {
                    println!(
                        "{:<18} {:>6} {:<12} {:>12.3e} {:>12.3e} {:>12.3e} {:>10.3}",
                        r["scenario"].as_str().unwrap_or("-"),
                        r["seed"].as_u64().unwrap_or(0),
                        r["kind"].as_str().unwrap_or("-"),
                        r["training_flops"].as_f64().unwrap_or(0.0),
                        r["inference_flops"].as_f64().unwrap_or(0.0),
                        r["bytes_down"].as_f64().unwrap_or(0.0),
                        r["transfer_seconds_total"].as_f64().unwrap_or(0.0) / 3600.0,
                    );
                }
            }
            Ok(())
        }
    }
}

/// Die silently when the consumer of our stdout goes away, as line-oriented
/// Unix tools do, instead of panicking on the broken pipe.
#[cfg(unix)]
fn restore_default_sigpipe() {
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
}

#[cfg(not(unix))]
fn restore_default_sigpipe() {}

fn main() -> ExitCode {
    restore_default_sigpipe();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
