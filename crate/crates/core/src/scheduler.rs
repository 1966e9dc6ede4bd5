//! DPF-N, DPF-T (basic or Rényi accounting) and the FCFS / round-robin
//! baselines.
//!
//! A scheduler owns the wait queue and decides when budget is unlocked.
//! Every pass walks the ordered queue once and grants each claim whose whole
//! demand fits. Grants only shrink the unlocked budget, so one pass reaches
//! a fixed point.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ledger::{
    AccountingMode, Allocation, BlockId, Budget, ClaimId, ClaimState, DemandVector, Ledger,
    LedgerError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchedulerError {
    #[error("invalid policy config: {0}")]
    Config(String),
    #[error("demand vector is empty")]
    EmptyDemand,
    #[error("operation requires a round-robin policy, got {0:?}")]
    NotRoundRobin(PolicyKind),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PolicyKind {
    #[serde(rename = "DPF_N")]
    DpfN,
    #[serde(rename = "DPF_T")]
    DpfT,
    #[serde(rename = "FCFS")]
    Fcfs,
    #[serde(rename = "RR_N")]
    RrN,
    #[serde(rename = "RR_T")]
    RrT,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::DpfN => "DPF_N",
            PolicyKind::DpfT => "DPF_T",
            PolicyKind::Fcfs => "FCFS",
            PolicyKind::RrN => "RR_N",
            PolicyKind::RrT => "RR_T",
        }
    }

    pub fn is_dpf(self) -> bool {
        matches!(self, PolicyKind::DpfN | PolicyKind::DpfT)
    }

    /// Unlocks a fair share per arriving requester.
    pub fn unlocks_on_arrival(self) -> bool {
        matches!(self, PolicyKind::DpfN | PolicyKind::RrN)
    }

    /// Unlocks on a timer over the block lifetime.
    pub fn unlocks_on_timer(self) -> bool {
        matches!(self, PolicyKind::DpfT | PolicyKind::RrT)
    }
}

fn default_n() -> u32 {
    1
}

fn default_interval() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub policy: PolicyKind,
    #[serde(default = "default_accounting")]
    pub accounting: AccountingMode,
    /// Fair-share divisor N for the *_N policies.
    #[serde(default = "default_n")]
    pub n: u32,
    /// Block lifetime L in ticks for the *_T policies.
    #[serde(default)]
    pub lifetime_ticks: u64,
    /// Unlock timer period t in ticks for the *_T policies.
    #[serde(default = "default_interval")]
    pub unlock_interval: u64,
}

fn default_accounting() -> AccountingMode {
    AccountingMode::Basic
}

impl PolicyConfig {
    pub fn new(policy: PolicyKind, accounting: AccountingMode) -> Self {
        PolicyConfig {
            policy,
            accounting,
            n: 1,
            lifetime_ticks: 0,
            unlock_interval: 1,
        }
    }

    pub fn dpf_n(n: u32, accounting: AccountingMode) -> Self {
        PolicyConfig {
            n,
            ..Self::new(PolicyKind::DpfN, accounting)
        }
    }

    pub fn dpf_t(lifetime: u64, interval: u64, accounting: AccountingMode) -> Self {
        PolicyConfig {
            lifetime_ticks: lifetime,
            unlock_interval: interval,
            ..Self::new(PolicyKind::DpfT, accounting)
        }
    }

    pub fn with_policy(&self, policy: PolicyKind) -> Self {
        PolicyConfig {
            policy,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), SchedulerError> {
        if self.n < 1 {
            return Err(SchedulerError::Config("n must be at least 1".into()));
        }
        if self.policy.unlocks_on_timer() {
            if self.unlock_interval == 0 || self.lifetime_ticks == 0 {
                return Err(SchedulerError::Config(
                    "time-based policies need lifetime_ticks > 0 and unlock_interval > 0".into(),
                ));
            }
            if self.unlock_interval > self.lifetime_ticks {
                return Err(SchedulerError::Config(format!(
                    "unlock_interval {} exceeds lifetime_ticks {}",
                    self.unlock_interval, self.lifetime_ticks
                )));
            }
        }
        Ok(())
    }

    /// Fraction of a block's budget one fair share represents.
    pub fn fair_share_fraction(&self) -> f64 {
        if self.policy.unlocks_on_timer() {
            self.unlock_interval as f64 / self.lifetime_ticks as f64
        } else {
            1.0 / f64::from(self.n)
        }
    }
}

/// Budget actually moved from locked to unlocked on one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlockEffect {
    pub block: BlockId,
    pub amount: Budget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub claim: ClaimId,
    #[serde(with = "crate::floats::single")]
    pub dominant_share: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PassOutcome {
    pub granted: Vec<Decision>,
    pub denied: Vec<Decision>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PropertyKind {
    /// A waiting claim could run after the pass finished.
    Pareto,
    /// A claim with a strictly smaller dominant share could run when
    /// another claim was granted.
    Envy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyViolation {
    pub tick: u64,
    pub kind: PropertyKind,
    pub claim: ClaimId,
    pub other: Option<ClaimId>,
}

/// Share of block `block` that `d` represents: d/ε^G in basic mode, the
/// largest d(α)/ε^G(α) over usable orders in Rényi mode. Orders with a
/// non-positive block budget or an infinite demand are skipped; if nothing
/// is left the share is infinite.
fn block_share(ledger: &Ledger, block: BlockId, d: &Budget) -> f64 {
    let Some(b) = ledger.block(block) else {
        return f64::INFINITY;
    };
    let total = b.registers.total.values();
    let mut best: Option<f64> = None;
    for (&di, &ti) in d.values().iter().zip(total) {
        if ti <= 0.0 || !di.is_finite() {
            continue;
        }
        let s = di / ti;
        best = Some(best.map_or(s, |b: f64| b.max(s)));
    }
    best.unwrap_or(f64::INFINITY)
}

/// Per-block shares sorted from most to least dominant.
pub fn share_vector(demand: &DemandVector, ledger: &Ledger) -> Vec<f64> {
    let mut v: Vec<f64> = demand
        .iter()
        .map(|(b, d)| block_share(ledger, b, d))
        .collect();
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

/// max over demanded blocks (and orders) of demand / block total.
pub fn dominant_share(demand: &DemandVector, ledger: &Ledger) -> Result<f64, SchedulerError> {
    if demand.is_empty() {
        return Err(SchedulerError::EmptyDemand);
    }
    Ok(share_vector(demand, ledger)[0])
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    let n = a.len().max(b.len());
    for i in 0..n {
        let x = a.get(i).copied().unwrap_or(0.0);
        let y = b.get(i).copied().unwrap_or(0.0);
        match x.total_cmp(&y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    Ordering::Equal
}

/// Orders pending claims. DPF policies sort by the descending share vector
/// (smallest dominant share first, ties on the second-most dominant share
/// and so on); FCFS and round robin use arrival order. Remaining ties go to
/// arrival tick, then claim id.
pub fn order_queue(queue: &[ClaimId], ledger: &Ledger, policy: PolicyKind) -> Vec<ClaimId> {
    let mut keyed: Vec<(Vec<f64>, u64, ClaimId)> = queue
        .iter()
        .filter_map(|&id| {
            let c = ledger.claim(id)?;
            let shares = if policy.is_dpf() {
                share_vector(&c.demand, ledger)
            } else {
                Vec::new()
            };
            Some((shares, c.arrival_tick, id))
        })
        .collect();
    keyed.sort_by(|a, b| {
        lex_cmp(&a.0, &b.0)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    keyed.into_iter().map(|k| k.2).collect()
}

/// Whether the whole demand could be allocated right now. Demands on
/// retired or unknown blocks never run.
pub fn can_run(demand: &DemandVector, ledger: &Ledger) -> bool {
    !demand.is_empty() && ledger.can_satisfy(demand)
}

/// Scheduler state for one policy: the wait queue and per-block requester
/// counts.
#[derive(Debug, Clone)]
pub struct Scheduler {
    config: PolicyConfig,
    waiting: Vec<ClaimId>,
    requesters: BTreeMap<BlockId, u64>,
    check_properties: bool,
    violations: Vec<PropertyViolation>,
}

impl Scheduler {
    pub fn new(config: PolicyConfig) -> Result<Self, SchedulerError> {
        config.validate()?;
        Ok(Scheduler {
            config,
            waiting: Vec::new(),
            requesters: BTreeMap::new(),
            check_properties: false,
            violations: Vec::new(),
        })
    }

    /// Enables the Pareto and envy checks after every pass.
    pub fn with_property_checks(mut self, on: bool) -> Self {
        self.check_properties = on;
        self
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn waiting(&self) -> &[ClaimId] {
        &self.waiting
    }

    pub fn violations(&self) -> &[PropertyViolation] {
        &self.violations
    }

    /// How many claims with a positive demand on `block` have arrived.
    pub fn requester_count(&self, block: BlockId) -> u64 {
        self.requesters.get(&block).copied().unwrap_or(0)
    }

    /// FCFS makes a block's entire budget available at creation.
    pub fn on_block_created(
        &mut self,
        ledger: &mut Ledger,
        block: BlockId,
    ) -> Result<Vec<UnlockEffect>, SchedulerError> {
        if self.config.policy != PolicyKind::Fcfs {
            return Ok(Vec::new());
        }
        let amount = ledger.unlock_fraction(block, 1.0)?;
        Ok(vec![UnlockEffect { block, amount }])
    }

    /// Queues the claim. Under *_N policies, each block the claim demands a
    /// positive amount from unlocks one fair share ε^G_j/N (per order).
    pub fn on_pipeline_arrival(
        &mut self,
        ledger: &mut Ledger,
        claim: ClaimId,
    ) -> Result<Vec<UnlockEffect>, SchedulerError> {
        let demand = ledger
            .claim(claim)
            .ok_or(LedgerError::UnknownClaim(claim))?
            .demand
            .clone();
        self.waiting.push(claim);
        let mut effects = Vec::new();
        for (block, d) in demand.iter() {
            if !d.is_positive() {
                continue;
            }
            *self.requesters.entry(block).or_insert(0) += 1;
            if self.config.policy.unlocks_on_arrival() {
                let live = ledger.block(block).is_some_and(|b| !b.retired);
                if live {
                    let amount =
                        ledger.unlock_fraction(block, self.config.fair_share_fraction())?;
                    effects.push(UnlockEffect { block, amount });
                }
            }
        }
        Ok(effects)
    }

    /// Under *_T policies, every live block created before `tick` unlocks
    /// (t/L)·ε^G_j.
    pub fn on_unlock_timer(
        &mut self,
        ledger: &mut Ledger,
        tick: u64,
    ) -> Result<Vec<UnlockEffect>, SchedulerError> {
        if !self.config.policy.unlocks_on_timer() {
            return Ok(Vec::new());
        }
        let live: Vec<BlockId> = ledger
            .blocks()
            .filter(|b| !b.retired && b.created_at < tick)
            .map(|b| b.id)
            .collect();
        let frac = self.config.fair_share_fraction();
        let mut effects = Vec::with_capacity(live.len());
        for block in live {
            let amount = ledger.unlock_fraction(block, frac)?;
            if amount.is_positive() {
                effects.push(UnlockEffect { block, amount });
            }
        }
        Ok(effects)
    }

    /// Drops a claim from the wait queue (e.g. on timeout).
    pub fn remove(&mut self, claim: ClaimId) -> bool {
        let before = self.waiting.len();
        self.waiting.retain(|&c| c != claim);
        before != self.waiting.len()
    }

    /// One pass over the ordered queue: claims that can run are allocated,
    /// the rest keep waiting. Claims on retired or missing blocks are
    /// denied.
    pub fn scheduler_pass(
        &mut self,
        ledger: &mut Ledger,
        tick: u64,
    ) -> Result<PassOutcome, SchedulerError> {
        let mut outcome = PassOutcome::default();
        let mut keep = Vec::with_capacity(self.waiting.len());
        for &id in &self.waiting {
            let c = ledger.claim(id).ok_or(LedgerError::UnknownClaim(id))?;
            if c.state != ClaimState::Pending {
                continue;
            }
            let dead = c.demand.is_empty()
                || c
                    .demand
                    .blocks()
                    .any(|b| ledger.block(b).is_none_or(|blk| blk.retired));
            if dead {
                let share = dominant_share(&c.demand, ledger).unwrap_or(f64::INFINITY);
                ledger.deny(id)?;
                outcome.denied.push(Decision {
                    claim: id,
                    dominant_share: share,
                });
            } else {
                keep.push(id);
            }
        }

        let ordered = order_queue(&keep, ledger, self.config.policy);
        let shares: BTreeMap<ClaimId, f64> = ordered
            .iter()
            .map(|&id| {
                let d = &ledger.claim(id).expect("queued").demand;
                (id, dominant_share(d, ledger).unwrap_or(f64::INFINITY))
            })
            .collect();

        let mut still_waiting = Vec::new();
        for (pos, &id) in ordered.iter().enumerate() {
            let demand = &ledger.claim(id).expect("queued").demand;
            if !can_run(demand, ledger) {
                still_waiting.push(id);
                continue;
            }
            if self.check_properties && self.config.policy.is_dpf() {
                self.check_envy(ledger, tick, id, &shares, &still_waiting, &ordered[pos + 1..]);
            }
            match ledger.allocate(id)? {
                Allocation::Granted => outcome.granted.push(Decision {
                    claim: id,
                    dominant_share: shares[&id],
                }),
                Allocation::Insufficient => still_waiting.push(id),
            }
        }
        // keep arrival order in the queue so that ordering stays a pure
        // function of the claims
        let waiting_set: std::collections::BTreeSet<ClaimId> =
            still_waiting.iter().copied().collect();
        self.waiting.retain(|id| waiting_set.contains(id));

        if self.check_properties {
            for &id in &self.waiting {
                if can_run(&ledger.claim(id).expect("queued").demand, ledger) {
                    self.violations.push(PropertyViolation {
                        tick,
                        kind: PropertyKind::Pareto,
                        claim: id,
                        other: None,
                    });
                }
            }
        }
        Ok(outcome)
    }

    /// Same pass restricted to the round-robin policies.
    pub fn rr_pass(&mut self, ledger: &mut Ledger, tick: u64) -> Result<PassOutcome, SchedulerError> {
        match self.config.policy {
            PolicyKind::RrN | PolicyKind::RrT => self.scheduler_pass(ledger, tick),
            other => Err(SchedulerError::NotRoundRobin(other)),
        }
    }

    fn check_envy(
        &mut self,
        ledger: &Ledger,
        tick: u64,
        granted: ClaimId,
        shares: &BTreeMap<ClaimId, f64>,
        before: &[ClaimId],
        after: &[ClaimId],
    ) {
        let sj = shares[&granted];
        for &i in before.iter().chain(after) {
            let si = shares[&i];
            // identical dominant shares are exempt
            if si < sj && can_run(&ledger.claim(i).expect("queued").demand, ledger) {
                self.violations.push(PropertyViolation {
                    tick,
                    kind: PropertyKind::Envy,
                    claim: i,
                    other: Some(granted),
                });
            }
        }
    }
}

/// Fair-demand test: the claim is among the first N requesters of each
/// block it demands (`ranks`), and demands at most ε^G_j/N on each block
/// (at every usable order in Rényi mode).
pub fn is_fair_demand(
    demand: &DemandVector,
    ranks: &BTreeMap<BlockId, u64>,
    ledger: &Ledger,
    n: u32,
) -> bool {
    if demand.is_empty() {
        return false;
    }
    let renyi = matches!(ledger.mode(), AccountingMode::Renyi { .. });
    demand.iter().all(|(b, d)| {
        if !d.is_positive() {
            return true;
        }
        let Some(block) = ledger.block(b) else {
            return false;
        };
        if ranks.get(&b).is_none_or(|&r| r > u64::from(n)) {
            return false;
        }
        let total = block.registers.total.values();
        let mut any_usable = false;
        for (&di, &ti) in d.values().iter().zip(total) {
            if renyi && ti <= 0.0 {
                continue;
            }
            any_usable = true;
            if di > ti / f64::from(n) {
                return false;
            }
        }
        any_usable
    })
}
