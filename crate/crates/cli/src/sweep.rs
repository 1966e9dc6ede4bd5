use std::path::PathBuf;

use clap::Args;
use dpf_core::scheduler::PolicyKind;
use dpf_core::sim::{self, SimConfig, Workload, SCHEMA_VERSION};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::io::{ensure_dir, load_json, write_csv, write_json, CliError};
use crate::simulate::apply_seed;

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Sweep config (JSON) with `base` and `grid`.
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub base: SimConfig,
    pub grid: SweepGrid,
}

/// Axes left out keep the base config's value.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    #[serde(default)]
    pub n: Option<Vec<u32>>,
    #[serde(default)]
    pub mice_fraction: Option<Vec<f64>>,
    #[serde(default)]
    pub policy: Option<Vec<PolicyKind>>,
    /// Number of generated pipelines.
    #[serde(default)]
    pub load: Option<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub schema_version: u32,
    pub n: u32,
    pub mice_fraction: Option<f64>,
    pub policy: String,
    pub load: Option<u64>,
    pub granted: u64,
    pub granted_mice: u64,
    pub granted_elephants: u64,
    pub denied: u64,
    pub waiting: u64,
    pub delay_mean: f64,
    pub delay_median: f64,
    pub delay_p95: f64,
    pub delay_max: f64,
}

struct Point {
    n: u32,
    mice: Option<f64>,
    policy: PolicyKind,
    load: Option<u64>,
    cfg: SimConfig,
}

fn axis<T: Clone>(name: &str, values: &Option<Vec<T>>, base: Option<T>) -> Result<Vec<Option<T>>, CliError> {
    match values {
        None => Ok(vec![base]),
        Some(v) if v.is_empty() => Err(CliError::Config(format!("grid.{name} is empty"))),
        Some(v) => Ok(v.iter().cloned().map(Some).collect()),
    }
}

fn points(cfg: &SweepConfig) -> Result<Vec<Point>, CliError> {
    let g = &cfg.grid;
    if g.n.is_none() && g.mice_fraction.is_none() && g.policy.is_none() && g.load.is_none() {
        return Err(CliError::Config("grid has no axes".into()));
    }
    let generated = match &cfg.base.workload {
        Workload::Generate(w) => Some(w),
        Workload::Pipelines(_) => None,
    };
    if generated.is_none() && (g.mice_fraction.is_some() || g.load.is_some()) {
        return Err(CliError::Config(
            "grid.mice_fraction and grid.load need a generated workload".into(),
        ));
    }
    let ns = axis("n", &g.n, Some(cfg.base.policy.n))?;
    let mice = axis("mice_fraction", &g.mice_fraction, generated.map(|w| w.mice_fraction))?;
    let policies = axis("policy", &g.policy, Some(cfg.base.policy.policy))?;
    let loads = axis("load", &g.load, generated.map(|w| w.n_pipelines))?;

    let mut out = Vec::new();
    for n in ns.iter().flatten().copied() {
        for m in &mice {
            for p in policies.iter().flatten().copied() {
                for l in &loads {
                    let mut c = cfg.base.with_policy(p);
                    c.policy.n = n;
                    if let Workload::Generate(w) = &mut c.workload {
                        w.mice_fraction = m.unwrap_or(w.mice_fraction);
                        w.n_pipelines = l.unwrap_or(w.n_pipelines);
                    }
                    out.push(Point {
                        n,
                        mice: *m,
                        policy: p,
                        load: *l,
                        cfg: c,
                    });
                }
            }
        }
    }
    Ok(out)
}

pub fn run(args: &SweepArgs) -> Result<(), CliError> {
    let mut cfg: SweepConfig = load_json(&args.config)?;
    if let Some(s) = args.seed {
        apply_seed(&mut cfg.base, s);
    }
    let pts: Vec<Point> = points(&cfg)
        .map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", args.config.display())),
            e => e,
        })?
        .into_iter()
        .map(|p| p.cfg.validate().map(|_| p))
        .collect::<Result<_, _>>()?;
    log::info!("sweeping {} grid points", pts.len());

    let mut rows: Vec<SweepRow> = pts
        .par_iter()
        .map(|p| {
            let m = sim::run(&p.cfg)?.metrics;
            let s = m.summary();
            Ok(SweepRow {
                schema_version: SCHEMA_VERSION,
                n: p.n,
                mice_fraction: p.mice,
                policy: p.policy.name().to_string(),
                load: p.load,
                granted: s.granted,
                granted_mice: s.granted_mice,
                granted_elephants: s.granted_elephants,
                denied: s.denied,
                waiting: s.waiting,
                delay_mean: s.delay_mean,
                delay_median: s.delay_median,
                delay_p95: s.delay_p95,
                delay_max: s.delay_max,
            })
        })
        .collect::<Result<_, CliError>>()?;
    rows.sort_by(|a, b| {
        a.n.cmp(&b.n)
            .then(a.mice_fraction.unwrap_or(0.0).total_cmp(&b.mice_fraction.unwrap_or(0.0)))
            .then(a.policy.cmp(&b.policy))
            .then(a.load.cmp(&b.load))
    });

    ensure_dir(&args.out)?;
    write_csv(&args.out.join("sweep.csv"), &rows)?;
    write_json(&args.out.join("sweep.json"), &rows)?;
    for r in &rows {
        println!(
            "N={} mice={} policy={} load={}: granted {}",
            r.n,
            r.mice_fraction.map_or("-".into(), |m| m.to_string()),
            r.policy,
            r.load.map_or("-".into(), |l| l.to_string()),
            r.granted
        );
    }
    Ok(())
}
