use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use digest_cli::{cmd_analyze, cmd_compare, cmd_train, load_spec, CliError, Overrides};

#[derive(Parser)]
#[command(name = "digest", version, about = "Partitioned GCN training with stale halo representations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Replaces the spec's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// `dotted.key=value`, applied after includes. Repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration.
    Train { spec: PathBuf },
    /// Full-graph, sync and async runs on simulated time.
    Compare { spec: PathBuf },
    /// Bound, cost model and staleness report for a finished run.
    Analyze { run_dir: PathBuf },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let overrides = Overrides {
        pairs: cli.overrides,
        seed: cli.seed,
        out: cli.out.clone(),
    };
    match cli.command {
        Command::Train { spec } => {
            let s = cmd_train(&load_spec(&spec, &overrides)?)?;
            println!(
                "loss {:.4} -> {:.4}, train F1 {:.3}, simulated time {:.2}",
                s.initial_loss, s.final_loss, s.final_train_f1, s.simulated_time
            );
        }
        Command::Compare { spec } => {
            let r = cmd_compare(&load_spec(&spec, &overrides)?)?;
            println!("target loss {:.4}", r.target_loss);
            for m in &r.methods {
                let t = m.time_to_target.map_or_else(|| "-".to_string(), |t| format!("{t:.2}"));
                println!("{:<12} final loss {:.4}  time to target {t}", m.name, m.final_loss);
            }
        }
        Command::Analyze { run_dir } => {
            let r = cmd_analyze(&run_dir, cli.out.as_deref())?;
            println!(
                "eps {:?}, bound holds on {}/{} probes (certified: {}), cost model exact: {}",
                r.staleness_eps,
                r.bound.checks.iter().filter(|c| c.holds).count(),
                r.bound.checks.len(),
                r.bound.certified,
                r.cost_check.exact_match
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
