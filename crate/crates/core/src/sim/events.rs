//! Simulation event log and replay.

use serde::{Deserialize, Serialize};

use crate::ledger::{
    AccountingMode, Allocation, BlockDescriptor, BlockId, BlockSelector, Budget, ClaimId,
    DemandVector, Ledger,
};
use crate::scheduler::PolicyKind;

use super::workload::PipelineClass;
use super::SimError;

/// One logged event. `seq` is its position in the log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub seq: u64,
    pub tick: u64,
    pub event: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    BlockCreate {
        block: BlockId,
        descriptor: BlockDescriptor,
        budget: Budget,
    },
    UnlockTick,
    Unlock {
        block: BlockId,
        amount: Budget,
    },
    CounterUpdate {
        new_users: u64,
        released: f64,
        lower: u64,
        upper: u64,
    },
    PipelineArrive {
        pipeline: u64,
        claim: Option<ClaimId>,
        class: Option<PipelineClass>,
        selector: Option<BlockSelector>,
        demand: Option<DemandVector>,
    },
    Grant {
        claim: ClaimId,
        pipeline: u64,
        #[serde(with = "crate::floats::single")]
        dominant_share: f64,
        policy: PolicyKind,
    },
    Deny {
        pipeline: u64,
        claim: Option<ClaimId>,
        reason: String,
    },
    Consume {
        claim: ClaimId,
        amounts: DemandVector,
    },
    Release {
        claim: ClaimId,
    },
}

impl SimEvent {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("events serialize")
    }
}

/// Re-applies a log to a fresh ledger in `mode`. The result equals the
/// simulation's final ledger.
pub fn replay(mode: AccountingMode, events: &[SimEvent]) -> Result<Ledger, SimError> {
    replay_into(Ledger::new(mode), events)
}

pub fn replay_into(mut ledger: Ledger, events: &[SimEvent]) -> Result<Ledger, SimError> {
    for ev in events {
        match &ev.event {
            EventKind::BlockCreate {
                block,
                descriptor,
                budget,
            } => {
                let id = ledger.create_block(*descriptor, budget.clone(), ev.tick)?;
                if id != *block {
                    return Err(SimError::Replay(format!(
                        "event {}: created {id}, log says {block}",
                        ev.seq
                    )));
                }
            }
            EventKind::Unlock { block, amount } => {
                ledger.unlock(*block, amount)?;
            }
            EventKind::PipelineArrive {
                claim: Some(claim),
                selector: Some(selector),
                demand: Some(demand),
                ..
            } => {
                let id = ledger.submit_claim(*selector, demand.clone(), ev.tick)?;
                if id != *claim {
                    return Err(SimError::Replay(format!(
                        "event {}: submitted {id}, log says {claim}",
                        ev.seq
                    )));
                }
            }
            EventKind::Grant { claim, .. } => {
                if ledger.allocate(*claim)? != Allocation::Granted {
                    return Err(SimError::Replay(format!(
                        "event {}: {claim} no longer fits",
                        ev.seq
                    )));
                }
            }
            EventKind::Deny {
                claim: Some(claim), ..
            } => ledger.deny(*claim)?,
            EventKind::Consume { claim, amounts } => ledger.consume(*claim, amounts)?,
            EventKind::Release { claim } => ledger.release(*claim)?,
            _ => {}
        }
    }
    Ok(ledger)
}
