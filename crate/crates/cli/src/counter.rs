use std::path::PathBuf;
use std::str::FromStr;

use clap::Args;
use dpf_core::semantics::{BinaryCounter, CounterConfig, CounterTraceRow};
use dpf_core::sim::SCHEMA_VERSION;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::Serialize;

use crate::io::{ensure_dir, write_csv, write_json, CliError};

/// New users per interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Stream {
    /// `fixed:K`
    Fixed(u64),
    /// `poisson:RATE`
    Poisson(f64),
    /// `uniform:LO:HI`, a Poisson stream whose rate is drawn per trial.
    Uniform(f64, f64),
}

impl FromStr for Stream {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |x: &str| x.parse::<f64>().map_err(|e| format!("{x}: {e}"));
        let stream = match parts.as_slice() {
            ["fixed", k] => Stream::Fixed(k.parse().map_err(|e| format!("{k}: {e}"))?),
            ["poisson", r] => Stream::Poisson(num(r)?),
            ["uniform", lo, hi] => Stream::Uniform(num(lo)?, num(hi)?),
            _ => return Err(format!("unknown stream `{s}`, expected fixed:K, poisson:R or uniform:LO:HI")),
        };
        match stream {
            Stream::Poisson(r) if !(r >= 0.0 && r.is_finite()) => Err(format!("bad rate in `{s}`")),
            Stream::Uniform(lo, hi) if !(lo >= 0.0 && hi >= lo && hi.is_finite()) => {
                Err(format!("bad range in `{s}`"))
            }
            _ => Ok(stream),
        }
    }
}

#[derive(Debug, Args)]
pub struct CounterArgs {
    #[arg(long, default_value_t = 0.1)]
    pub eps: f64,
    /// Horizon in intervals; must be a power of two.
    #[arg(long = "T", default_value_t = 1 << 15)]
    pub horizon: u64,
    #[arg(long, default_value_t = 0.001)]
    pub beta: f64,
    #[arg(long, default_value_t = 1000)]
    pub trials: u64,
    #[arg(long, default_value = "uniform:0:10")]
    pub stream: Stream,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Zero noise: releases equal the true counts.
    #[arg(long)]
    pub noiseless: bool,
    /// Use base-10 logarithms in the error bound.
    #[arg(long)]
    pub log10_bound: bool,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
struct TraceRow {
    schema_version: u32,
    tick: u64,
    true_count: u64,
    released: f64,
    lower: u64,
    upper: u64,
}

impl From<CounterTraceRow> for TraceRow {
    fn from(r: CounterTraceRow) -> Self {
        TraceRow {
            schema_version: SCHEMA_VERSION,
            tick: r.tick,
            true_count: r.true_count,
            released: r.released,
            lower: r.lower,
            upper: r.upper,
        }
    }
}

#[derive(Debug, Serialize)]
struct CounterStats {
    schema_version: u32,
    eps: f64,
    horizon: u64,
    beta: f64,
    trials: u64,
    bound_offset: f64,
    covered: u64,
    coverage: f64,
    mean_error: f64,
    std_error: f64,
}

struct Trial {
    covered: bool,
    error: f64,
    trace: Vec<CounterTraceRow>,
}

fn trial(cfg: &CounterConfig, stream: Stream, seed: u64, i: u64, keep: bool) -> Result<Trial, CliError> {
    let rt = |e: dpf_core::semantics::SemanticsError| CliError::Runtime(e.into());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i + 1);
    let rate = match stream {
        Stream::Fixed(_) => 0.0,
        Stream::Poisson(r) => r,
        Stream::Uniform(lo, hi) => {
            if hi > lo {
                rng.random_range(lo..hi)
            } else {
                lo
            }
        }
    };
    let pois = (rate > 0.0).then(|| Poisson::new(rate).expect("positive finite rate"));
    let mut c = BinaryCounter::new(cfg.clone(), seed.wrapping_add(i)).map_err(rt)?;
    let mut covered = true;
    let mut trace = Vec::new();
    for t in 1..=cfg.horizon {
        let n = match stream {
            Stream::Fixed(k) => k,
            _ => pois.as_ref().map_or(0, |p| p.sample(&mut rng) as u64),
        };
        c.counter_update(n).map_err(rt)?;
        if c.lower_bound(t).map_err(rt)? > c.true_count() {
            covered = false;
        }
        if keep {
            trace.push(c.trace_row(t).map_err(rt)?);
        }
    }
    let error = c.counter_release(cfg.horizon).map_err(rt)? - c.true_count() as f64;
    Ok(Trial {
        covered,
        error,
        trace,
    })
}

pub fn run(args: &CounterArgs) -> Result<(), CliError> {
    let mut cfg = CounterConfig::new(args.eps, args.horizon, args.beta);
    cfg.noiseless = args.noiseless;
    cfg.log10_bound = args.log10_bound;
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    if args.trials == 0 {
        return Err(CliError::Config("--trials must be at least 1".into()));
    }
    log::info!("running {} counter trials over {} intervals", args.trials, args.horizon);

    let trials: Vec<Trial> = (0..args.trials)
        .into_par_iter()
        .map(|i| trial(&cfg, args.stream, args.seed, i, i == 0))
        .collect::<Result<_, _>>()?;

    let n = trials.len() as f64;
    let covered = trials.iter().filter(|t| t.covered).count() as u64;
    let mean = trials.iter().map(|t| t.error).sum::<f64>() / n;
    let std_error = if trials.len() > 1 {
        let var = trials.iter().map(|t| (t.error - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    let stats = CounterStats {
        schema_version: SCHEMA_VERSION,
        eps: args.eps,
        horizon: args.horizon,
        beta: args.beta,
        trials: args.trials,
        bound_offset: cfg.bound_offset(),
        covered,
        coverage: covered as f64 / n,
        mean_error: mean,
        std_error,
    };

    ensure_dir(&args.out)?;
    let trace: Vec<TraceRow> = trials
        .into_iter()
        .next()
        .map(|t| t.trace.into_iter().map(TraceRow::from).collect())
        .unwrap_or_default();
    write_csv(&args.out.join("counter_trace.csv"), &trace)?;
    write_json(&args.out.join("counter_stats.json"), &stats)?;
    println!(
        "coverage {:.4} ({covered}/{}), mean error {:.3} (SE {:.3}), bound offset {:.1}",
        stats.coverage, args.trials, mean, std_error, stats.bound_offset
    );
    Ok(())
}
