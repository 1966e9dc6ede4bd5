use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, ValueEnum};
use dpf_core::rdp::{self, AlphaGrid, RdpCurve};
use dpf_core::semantics::binary_mechanism_rdp_curve;
use dpf_core::sim::SCHEMA_VERSION;
use serde::Serialize;

use crate::io::CliError;

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CurveMechanism {
    Gaussian,
    Laplace,
    Pure,
    /// Binary-tree counter; `--param` is its ε, `--horizon` its T.
    Counter,
}

#[derive(Debug, Args)]
pub struct CurvesArgs {
    #[arg(long, value_enum)]
    pub mechanism: CurveMechanism,
    /// σ for gaussian, ε for laplace, pure and counter.
    #[arg(long)]
    pub param: f64,
    /// Number of sequential compositions.
    #[arg(long, default_value_t = 1)]
    pub compose: u32,
    #[arg(long, default_value_t = 1e-7)]
    pub delta: f64,
    /// Order grid: `extended` or `short`.
    #[arg(long, default_value = "extended")]
    pub grid: String,
    /// Counter horizon T (power of two).
    #[arg(long)]
    pub horizon: Option<u64>,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct CurveRow {
    schema_version: u32,
    row: &'static str,
    alpha: f64,
    epsilon: f64,
    delta: Option<f64>,
}

fn curve(args: &CurvesArgs, grid: &AlphaGrid) -> Result<RdpCurve, CliError> {
    let cfg = |e: String| CliError::Config(e);
    let one = match args.mechanism {
        CurveMechanism::Gaussian => rdp::gaussian_curve(args.param, grid),
        CurveMechanism::Laplace => rdp::laplace_curve(args.param, grid),
        CurveMechanism::Pure => rdp::pure_dp_curve(args.param, grid),
        CurveMechanism::Counter => {
            let t = args
                .horizon
                .ok_or_else(|| cfg("--horizon is required for the counter".into()))?;
            return binary_mechanism_rdp_curve(args.param, t, grid)
                .map(|c| c.scale(f64::from(args.compose)))
                .map_err(|e| cfg(e.to_string()));
        }
    }
    .map_err(|e| cfg(e.to_string()))?;
    Ok(one.scale(f64::from(args.compose)))
}

pub fn run(args: &CurvesArgs) -> Result<(), CliError> {
    let grid = AlphaGrid::by_name(&args.grid)
        .ok_or_else(|| CliError::Config(format!("unknown grid `{}`", args.grid)))?;
    if args.compose == 0 {
        return Err(CliError::Config("--compose must be at least 1".into()));
    }
    let c = curve(args, &grid)?;
    let (dp, best) = rdp::rdp_to_dp(&c, args.delta).map_err(|e| CliError::Config(e.to_string()))?;

    let mut rows: Vec<CurveRow> = grid
        .orders()
        .iter()
        .zip(c.eps())
        .map(|(&alpha, &epsilon)| CurveRow {
            schema_version: SCHEMA_VERSION,
            row: "rdp",
            alpha,
            epsilon,
            delta: None,
        })
        .collect();
    rows.push(CurveRow {
        schema_version: SCHEMA_VERSION,
        row: "dp",
        alpha: best,
        epsilon: dp.epsilon,
        delta: Some(dp.delta),
    });

    let sink: Box<dyn std::io::Write> = match &args.out {
        Some(p) => Box::new(
            std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        ),
        None => Box::new(std::io::stdout()),
    };
    let mut w = csv::Writer::from_writer(sink);
    for r in &rows {
        w.serialize(r).context("writing curve table")?;
    }
    w.flush().context("writing curve table")?;
    Ok(())
}
