//! Scheduling engine for differential-privacy budget.
//!
//! Differential-privacy budget is treated as a non-replenishable,
//! schedulable resource. Data is split into private blocks, pipelines
//! submit privacy claims against them, and a scheduler from the DPF family
//! (or an FCFS / round-robin baseline) decides which claims are granted.

mod floats;

pub mod ledger;
pub mod rdp;
pub mod scheduler;
pub mod semantics;
pub mod sim;
