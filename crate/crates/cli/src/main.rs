//! `dpf`: run scheduling simulations, parameter sweeps, privacy curve
//! tables and counter statistics.
//!
//! Exit codes: 0 ok, 1 runtime error, 2 bad config, 3 ledger audit failure.

mod counter;
mod curves;
mod io;
mod simulate;
mod sweep;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "dpf", version, about = "DP budget scheduling simulator")]
struct Cli {
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, env = "DPF_LOG", default_value = "warn")]
    log_level: log::LevelFilter,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one simulation and write metrics.csv, metrics.json, events.jsonl.
    Simulate(simulate::SimulateArgs),
    /// Run a grid of simulations and write sweep.csv, sweep.json.
    Sweep(sweep::SweepArgs),
    /// Print an RDP curve and its (ε, δ) translation as CSV.
    Curves(curves::CurvesArgs),
    /// Run counter trials and write counter_trace.csv, counter_stats.json.
    Counter(counter::CounterArgs),
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    env_logger::Builder::new().filter_level(cli.log_level).init();
    let result = match &cli.command {
        Command::Simulate(a) => simulate::run(a),
        Command::Sweep(a) => sweep::run(a),
        Command::Curves(a) => curves::run(a),
        Command::Counter(a) => counter::run(a),
    };
    if let Err(e) = result {
        eprintln!("dpf: {e}");
        std::process::exit(e.exit_code());
    }
}
