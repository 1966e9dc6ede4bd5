use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::Args;
use dpf_core::sim::{self, parse_trace_jsonl, SimConfig, Workload, SCHEMA_VERSION};

use crate::io::{ensure_dir, io_err, load_json, write_csv, write_json, CliError};

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Simulation config (JSON).
    pub config: PathBuf,
    /// Overrides the config seed (and the generated workload's seed).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Pipelines as JSON lines; replaces the config workload.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

pub fn apply_seed(cfg: &mut SimConfig, seed: u64) {
    cfg.seed = seed;
    if let Workload::Generate(w) = &mut cfg.workload {
        w.seed = seed;
    }
}

pub fn run(args: &SimulateArgs) -> Result<(), CliError> {
    let mut cfg: SimConfig = load_json(&args.config)?;
    if let Some(s) = args.seed {
        apply_seed(&mut cfg, s);
    }
    if let Some(t) = &args.trace {
        let text = fs::read_to_string(t)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", t.display())))?;
        cfg.workload = Workload::Pipelines(parse_trace_jsonl(&text)?);
    }
    cfg.validate()?;
    log::info!("simulating {} for {} ticks", cfg.policy.policy.name(), cfg.horizon);
    let r = sim::run(&cfg)?;

    ensure_dir(&args.out)?;
    write_csv(&args.out.join("metrics.csv"), &[r.metrics.summary()])?;
    write_json(&args.out.join("metrics.json"), &r.metrics)?;
    write_events(&args.out.join("events.jsonl"), &r.events)?;

    let m = &r.metrics;
    println!(
        "{}: granted {} denied {} waiting {} of {} (mean delay {:.2})",
        m.policy.name(),
        m.granted,
        m.denied,
        m.waiting,
        m.n_pipelines,
        m.delay.mean
    );
    Ok(())
}

fn write_events(path: &Path, events: &[sim::SimEvent]) -> Result<(), CliError> {
    let f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    // first line carries the schema version, the rest are events
    writeln!(w, "{{\"schema_version\":{SCHEMA_VERSION}}}").map_err(|e| io_err(path, e))?;
    for e in events {
        writeln!(w, "{}", e.to_json_line()).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}
