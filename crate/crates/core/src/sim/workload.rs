//! Pipeline workloads: explicit lists, trace rows, or generated mice and
//! elephant mixes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::ledger::{AccountingMode, BlockSelector, Budget, DemandSpec, LedgerError};
use crate::rdp::AlphaGrid;

use super::SimError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineClass {
    Mice,
    Elephant,
}

/// Per-block demand of one pipeline, relative to the block it lands on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DemandTemplate {
    /// `multiple` × fair share of the block, per order.
    FairShare { multiple: f64 },
    /// `fraction` of the block's initial budget, per order.
    BlockFraction { fraction: f64 },
    /// A fixed demand (ε or mechanism), independent of the block.
    Spec { demand: DemandSpec },
}

impl DemandTemplate {
    /// Demand on a block with initial budget `total`. Orders where the
    /// block has no budget get a zero demand.
    pub fn compile(
        &self,
        total: &Budget,
        mode: &AccountingMode,
        fair_fraction: f64,
        claim_delta: f64,
    ) -> Result<Budget, LedgerError> {
        let relative = |k: f64| -> Result<Budget, LedgerError> {
            if !(k >= 0.0 && k.is_finite()) {
                return Err(LedgerError::InvalidBudget(format!("demand multiplier {k}")));
            }
            Ok(Budget::from_values(
                total
                    .values()
                    .iter()
                    .map(|&t| if t > 0.0 { k * t } else { 0.0 })
                    .collect(),
            ))
        };
        match self {
            DemandTemplate::FairShare { multiple } => relative(multiple * fair_fraction),
            DemandTemplate::BlockFraction { fraction } => relative(*fraction),
            DemandTemplate::Spec { demand } => demand.compile(mode, claim_delta),
        }
    }

    /// Multiplies the demand by `k`. A mechanism scaled by a non-integral
    /// factor becomes an explicit curve over `grid`.
    pub fn scaled(&self, k: f64, grid: &AlphaGrid) -> DemandTemplate {
        match self {
            DemandTemplate::FairShare { multiple } => DemandTemplate::FairShare {
                multiple: multiple * k,
            },
            DemandTemplate::BlockFraction { fraction } => DemandTemplate::BlockFraction {
                fraction: fraction * k,
            },
            DemandTemplate::Spec { demand } => DemandTemplate::Spec {
                demand: scale_spec(demand, k, grid),
            },
        }
    }
}

fn scale_spec(spec: &DemandSpec, k: f64, grid: &AlphaGrid) -> DemandSpec {
    match spec {
        DemandSpec::Epsilon(e) => DemandSpec::Epsilon(e * k),
        DemandSpec::Curve(c) => DemandSpec::Curve(c.scale(k)),
        DemandSpec::Mechanism {
            mechanism,
            param,
            repetitions,
        } => {
            // k-fold composition when k is integral, otherwise the curve
            let r = f64::from(*repetitions) * k;
            if r.fract() == 0.0 && r >= 1.0 && r <= f64::from(u32::MAX) {
                DemandSpec::Mechanism {
                    mechanism: *mechanism,
                    param: *param,
                    repetitions: r as u32,
                }
            } else {
                match spec.curve(grid) {
                    Ok(c) => DemandSpec::Curve(c.scale(k)),
                    Err(_) => spec.clone(),
                }
            }
        }
    }
}

/// Which blocks a pipeline asks for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PipelineSelector {
    /// Explicit block ids, in creation order starting at 0.
    Blocks { ids: Vec<u64> },
    /// Every live block the selector matches.
    Match { selector: BlockSelector },
    /// The k most recent requestable time windows.
    LatestK { k: u64 },
    /// k contiguous requestable time windows at a random offset.
    RandomWindow { k: u64 },
    /// Every user group under the counter's lower bound.
    AllUsers,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSpec {
    pub arrival_tick: u64,
    /// Continuous arrival time, when generated from a Poisson process.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arrival_time: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<PipelineClass>,
    pub selector: PipelineSelector,
    /// One template for every selected block, or one per selected block.
    pub demand: Vec<DemandTemplate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BlockCount {
    Fixed { k: u64 },
    Uniform { min: u64, max: u64 },
}

impl BlockCount {
    fn sample(&self, rng: &mut impl Rng) -> u64 {
        match *self {
            BlockCount::Fixed { k } => k,
            BlockCount::Uniform { min, max } => rng.random_range(min..=max),
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        match *self {
            BlockCount::Fixed { k } if k >= 1 => Ok(()),
            BlockCount::Uniform { min, max } if min >= 1 && min <= max => Ok(()),
            _ => Err(SimError::Config(format!("invalid block count {self:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub demand: DemandTemplate,
    pub blocks: BlockCount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Arrival {
    /// Poisson process with `rate` pipelines per tick.
    Poisson { rate: f64 },
    /// One pipeline every `interarrival` ticks starting at `start`.
    Fixed {
        interarrival: f64,
        #[serde(default)]
        start: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectorPolicy {
    LatestK,
    RandomWindow,
    AllUsers,
}

fn default_mice() -> ClassSpec {
    ClassSpec {
        demand: DemandTemplate::FairShare { multiple: 0.5 },
        blocks: BlockCount::Fixed { k: 1 },
    }
}

fn default_elephants() -> ClassSpec {
    ClassSpec {
        demand: DemandTemplate::FairShare { multiple: 5.0 },
        blocks: BlockCount::Fixed { k: 1 },
    }
}

fn default_selector() -> SelectorPolicy {
    SelectorPolicy::LatestK
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub n_pipelines: u64,
    pub mice_fraction: f64,
    #[serde(default = "default_mice")]
    pub mice: ClassSpec,
    #[serde(default = "default_elephants")]
    pub elephants: ClassSpec,
    pub arrival: Arrival,
    #[serde(default = "default_selector")]
    pub selector: SelectorPolicy,
    #[serde(default)]
    pub seed: u64,
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(0.0..=1.0).contains(&self.mice_fraction) {
            return Err(SimError::Config(format!(
                "mice_fraction must be in [0, 1], got {}",
                self.mice_fraction
            )));
        }
        match self.arrival {
            Arrival::Poisson { rate } if !(rate > 0.0 && rate.is_finite()) => {
                return Err(SimError::Config(format!("Poisson rate must be positive, got {rate}")));
            }
            Arrival::Fixed {
                interarrival,
                start,
            } if !(interarrival >= 0.0 && start >= 0.0 && interarrival.is_finite()) => {
                return Err(SimError::Config("fixed arrivals need non-negative times".into()));
            }
            _ => {}
        }
        self.mice.blocks.validate()?;
        self.elephants.blocks.validate()
    }
}

/// Arrival list for a workload; a pure function of its fields and seed.
pub fn generate_workload(spec: &WorkloadSpec) -> Result<Vec<PipelineSpec>, SimError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let gaps = match spec.arrival {
        Arrival::Poisson { rate } => Some(
            Exp::new(rate).map_err(|e| SimError::Config(format!("Poisson arrivals: {e}")))?,
        ),
        Arrival::Fixed { .. } => None,
    };
    let mut t = match spec.arrival {
        Arrival::Fixed { start, .. } => start,
        Arrival::Poisson { .. } => 0.0,
    };
    let mut out = Vec::with_capacity(spec.n_pipelines as usize);
    for i in 0..spec.n_pipelines {
        match (&gaps, &spec.arrival) {
            (Some(exp), _) => t += exp.sample(&mut rng),
            (None, Arrival::Fixed { interarrival, .. }) if i > 0 => t += interarrival,
            _ => {}
        }
        let is_mouse = rng.random::<f64>() < spec.mice_fraction;
        let (class, cs) = if is_mouse {
            (PipelineClass::Mice, &spec.mice)
        } else {
            (PipelineClass::Elephant, &spec.elephants)
        };
        let k = cs.blocks.sample(&mut rng);
        let selector = match spec.selector {
            SelectorPolicy::LatestK => PipelineSelector::LatestK { k },
            SelectorPolicy::RandomWindow => PipelineSelector::RandomWindow { k },
            SelectorPolicy::AllUsers => PipelineSelector::AllUsers,
        };
        out.push(PipelineSpec {
            arrival_tick: t.floor() as u64,
            arrival_time: gaps.as_ref().map(|_| t),
            class: Some(class),
            selector,
            demand: vec![cs.demand.clone()],
        });
    }
    Ok(out)
}

/// Reads a trace of pipelines, one JSON object per line.
pub fn parse_trace_jsonl(text: &str) -> Result<Vec<PipelineSpec>, SimError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| SimError::Config(format!("trace line {}: {e}", i + 1)))
        })
        .collect()
}
