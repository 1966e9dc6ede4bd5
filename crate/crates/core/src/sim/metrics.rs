//! Simulation outcomes: grant counts, scheduling delay, final registers.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::ledger::{BlockDescriptor, BlockId, BudgetRegisters, ClaimId, Ledger};
use crate::scheduler::{PolicyKind, PropertyViolation};

use super::workload::PipelineClass;

/// Version tag written into every metrics and sweep output.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutcome {
    pub pipeline: u64,
    pub claim: Option<ClaimId>,
    pub class: Option<PipelineClass>,
    pub arrival_tick: u64,
    pub grant_tick: Option<u64>,
    pub deny_tick: Option<u64>,
    /// Granted by the pass its own arrival triggered.
    pub granted_in_arrival_pass: bool,
    /// Among the first N requesters of each demanded block and within the
    /// fair share everywhere (only evaluated under *_N policies).
    pub fair: bool,
}

impl PipelineOutcome {
    pub fn delay(&self) -> Option<u64> {
        self.grant_tick.map(|g| g - self.arrival_tick)
    }
}

/// Summary of scheduling delays in ticks. All zero when `count` is zero.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DelayStats {
    pub count: u64,
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
    pub max: f64,
}

impl DelayStats {
    pub fn from_delays(mut d: Vec<u64>) -> Self {
        if d.is_empty() {
            return DelayStats::default();
        }
        d.sort_unstable();
        let n = d.len();
        let mean = d.iter().map(|&x| x as f64).sum::<f64>() / n as f64;
        let median = if n % 2 == 1 {
            d[n / 2] as f64
        } else {
            (d[n / 2 - 1] + d[n / 2]) as f64 / 2.0
        };
        // nearest rank
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
        DelayStats {
            count: n as u64,
            mean,
            median,
            p95: d[rank - 1] as f64,
            max: d[n - 1] as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSnapshot {
    pub id: BlockId,
    pub descriptor: BlockDescriptor,
    pub created_at: u64,
    pub retired: bool,
    pub registers: BudgetRegisters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub schema_version: u32,
    pub policy: PolicyKind,
    pub n_pipelines: u64,
    pub granted: u64,
    pub granted_mice: u64,
    pub granted_elephants: u64,
    pub denied: u64,
    pub waiting: u64,
    pub delay: DelayStats,
    pub pipelines: Vec<PipelineOutcome>,
    pub blocks: Vec<BlockSnapshot>,
    pub property_violations: Vec<PropertyViolation>,
}

impl Metrics {
    pub(crate) fn collect(
        policy: PolicyKind,
        pipelines: Vec<PipelineOutcome>,
        ledger: &Ledger,
        property_violations: Vec<PropertyViolation>,
    ) -> Self {
        let granted_of = |c: PipelineClass| {
            pipelines
                .iter()
                .filter(|p| p.grant_tick.is_some() && p.class == Some(c))
                .count() as u64
        };
        let granted = pipelines.iter().filter(|p| p.grant_tick.is_some()).count() as u64;
        let denied = pipelines.iter().filter(|p| p.deny_tick.is_some()).count() as u64;
        Metrics {
            schema_version: SCHEMA_VERSION,
            policy,
            n_pipelines: pipelines.len() as u64,
            granted,
            granted_mice: granted_of(PipelineClass::Mice),
            granted_elephants: granted_of(PipelineClass::Elephant),
            denied,
            waiting: pipelines.len() as u64 - granted - denied,
            delay: DelayStats::from_delays(pipelines.iter().filter_map(|p| p.delay()).collect()),
            blocks: ledger
                .blocks()
                .map(|b| BlockSnapshot {
                    id: b.id,
                    descriptor: b.descriptor,
                    created_at: b.created_at,
                    retired: b.retired,
                    registers: b.registers.clone(),
                })
                .collect(),
            pipelines,
            property_violations,
        }
    }

    pub fn granted_set(&self) -> BTreeSet<u64> {
        self.pipelines
            .iter()
            .filter(|p| p.grant_tick.is_some())
            .map(|p| p.pipeline)
            .collect()
    }

    /// Delay statistics restricted to the given pipelines.
    pub fn delay_on(&self, pipelines: &BTreeSet<u64>) -> DelayStats {
        DelayStats::from_delays(
            self.pipelines
                .iter()
                .filter(|p| pipelines.contains(&p.pipeline))
                .filter_map(|p| p.delay())
                .collect(),
        )
    }

    pub fn summary(&self) -> MetricsRow {
        MetricsRow {
            schema_version: self.schema_version,
            policy: self.policy.name().to_string(),
            n_pipelines: self.n_pipelines,
            granted: self.granted,
            granted_mice: self.granted_mice,
            granted_elephants: self.granted_elephants,
            denied: self.denied,
            waiting: self.waiting,
            delay_mean: self.delay.mean,
            delay_median: self.delay.median,
            delay_p95: self.delay.p95,
            delay_max: self.delay.max,
        }
    }
}

/// Flat one-line form of [`Metrics`], for CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub schema_version: u32,
    pub policy: String,
    pub n_pipelines: u64,
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
