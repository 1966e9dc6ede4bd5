//! Private blocks, privacy claims, and the five-register budget ledger.
//!
//! Every block carries `total = locked + unlocked + allocated + consumed`.
//! In basic mode each register is a single ε; in Rényi mode each register
//! is a signed vector over the alpha grid. Claims move budget
//! unlocked → allocated → consumed, or back to unlocked on release.
//!
//! Infinite per-order demands (a Gaussian claim at the infinity order) are
//! never added to the registers. Instead the order is marked as held by
//! an infinite allocation or consumption and is unusable while marked.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rdp::{self, AccountantError, AlphaGrid, RdpCurve};

/// Slack for float comparisons on budget registers.
pub const TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BlockId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClaimId(pub u64);

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "B{}", self.0)
    }
}

impl fmt::Display for ClaimId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "C{}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LedgerError {
    #[error("unknown block {0}")]
    UnknownBlock(BlockId),
    #[error("unknown claim {0}")]
    UnknownClaim(ClaimId),
    #[error("descriptor {new:?} overlaps live block {existing}")]
    Overlap {
        new: BlockDescriptor,
        existing: BlockId,
    },
    #[error("budget has {got} entries, ledger expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid budget: {0}")]
    InvalidBudget(String),
    #[error("block {0} is not matched by the claim selector")]
    NotMatched(BlockId),
    #[error("claim {claim} is {state:?}, cannot {op}")]
    State {
        claim: ClaimId,
        state: ClaimState,
        op: &'static str,
    },
    #[error("claim {claim} asked to consume more than its allocation on block {block}")]
    Exceeds { claim: ClaimId, block: BlockId },
    #[error(transparent)]
    Accountant(#[from] AccountantError),
}

/// Half-open interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Interval {
    pub start: u64,
    pub end: u64,
}

impl Interval {
    pub fn new(start: u64, end: u64) -> Self {
        assert!(start <= end, "interval start {start} after end {end}");
        Interval { start, end }
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }

    pub fn intersects(&self, other: &Interval) -> bool {
        self.start < other.end && other.start < self.end
    }

    pub fn contains(&self, x: u64) -> bool {
        self.start <= x && x < self.end
    }
}

/// The slice of the data stream a block represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum BlockDescriptor {
    TimeWindow { time: Interval },
    UserGroup { users: Interval },
    UserTimeCell { users: Interval, time: Interval },
}

impl BlockDescriptor {
    pub fn overlaps(&self, other: &BlockDescriptor) -> bool {
        use BlockDescriptor::*;
        match (self, other) {
            (TimeWindow { time: a }, TimeWindow { time: b }) => a.intersects(b),
            (UserGroup { users: a }, UserGroup { users: b }) => a.intersects(b),
            (
                UserTimeCell { users: ua, time: ta },
                UserTimeCell { users: ub, time: tb },
            ) => ua.intersects(ub) && ta.intersects(tb),
            _ => false,
        }
    }
}

/// Predicate over block descriptors. Only matches blocks of its own kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum BlockSelector {
    Time { time: Interval },
    Users { users: Interval },
    UserTime { users: Interval, time: Interval },
}

impl BlockSelector {
    pub fn matches(&self, desc: &BlockDescriptor) -> bool {
        match (self, desc) {
            (BlockSelector::Time { time: s }, BlockDescriptor::TimeWindow { time }) => {
                s.intersects(time)
            }
            (BlockSelector::Users { users: s }, BlockDescriptor::UserGroup { users }) => {
                s.intersects(users)
            }
            (
                BlockSelector::UserTime { users: su, time: st },
                BlockDescriptor::UserTimeCell { users, time },
            ) => su.intersects(users) && st.intersects(time),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum AccountingMode {
    Basic,
    Renyi { grid: AlphaGrid },
}

impl AccountingMode {
    /// Number of entries in a budget under this mode.
    pub fn dims(&self) -> usize {
        match self {
            AccountingMode::Basic => 1,
            AccountingMode::Renyi { grid } => grid.len(),
        }
    }

    pub fn is_renyi(&self) -> bool {
        matches!(self, AccountingMode::Renyi { .. })
    }

    pub fn grid(&self) -> Option<&AlphaGrid> {
        match self {
            AccountingMode::Basic => None,
            AccountingMode::Renyi { grid } => Some(grid),
        }
    }
}

/// A scalar ε (basic mode) or a per-order ε vector (Rényi mode).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Budget(#[serde(with = "crate::floats")] Vec<f64>);

impl Budget {
    pub fn scalar(eps: f64) -> Self {
        Budget(vec![eps])
    }

    pub fn from_values(values: Vec<f64>) -> Self {
        Budget(values)
    }

    pub fn zeros(dims: usize) -> Self {
        Budget(vec![0.0; dims])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn scaled(&self, k: f64) -> Budget {
        Budget(self.0.iter().map(|v| v * k).collect())
    }

    /// True if some order holds a strictly positive amount.
    pub fn is_positive(&self) -> bool {
        self.0.iter().any(|&v| v > 0.0)
    }

    /// True when every entry is (within tolerance) zero.
    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v.abs() <= TOLERANCE)
    }
}

impl From<RdpCurve> for Budget {
    fn from(c: RdpCurve) -> Self {
        Budget(c.into_eps())
    }
}

/// Mechanism families a demand can be compiled from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    Gaussian,
    Laplace,
    PureDp,
}

/// How a pipeline states its per-block demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemandSpec {
    /// A plain ε. In Rényi mode this is read as an ε-DP mechanism.
    Epsilon(f64),
    /// An explicit RDP curve; in basic mode it is translated to ε.
    Curve(RdpCurve),
    /// `repetitions` runs of a mechanism with parameter `param` (σ for
    /// Gaussian, ε0 for Laplace and pure DP).
    Mechanism {
        mechanism: Mechanism,
        param: f64,
        #[serde(default = "one")]
        repetitions: u32,
    },
}

fn one() -> u32 {
    1
}

impl DemandSpec {
    /// RDP cost curve of this demand on `grid`.
    pub fn curve(&self, grid: &AlphaGrid) -> Result<RdpCurve, LedgerError> {
        Ok(match self {
            DemandSpec::Epsilon(e) => rdp::pure_dp_curve(*e, grid)?,
            DemandSpec::Curve(c) => {
                if c.grid() != grid {
                    return Err(AccountantError::GridMismatch.into());
                }
                c.clone()
            }
            DemandSpec::Mechanism {
                mechanism,
                param,
                repetitions,
            } => {
                let single = match mechanism {
                    Mechanism::Gaussian => rdp::gaussian_curve(*param, grid)?,
                    Mechanism::Laplace => rdp::laplace_curve(*param, grid)?,
                    Mechanism::PureDp => rdp::pure_dp_curve(*param, grid)?,
                };
                single.scale(f64::from(*repetitions))
            }
        })
    }

    /// Compiles the demand into a ledger budget. Basic mode uses the best
    /// ε translated at `claim_delta` over the extended grid (or the plain
    /// ε for [`DemandSpec::Epsilon`]).
    pub fn compile(&self, mode: &AccountingMode, claim_delta: f64) -> Result<Budget, LedgerError> {
        match mode {
            AccountingMode::Renyi { grid } => Ok(self.curve(grid)?.into()),
            AccountingMode::Basic => match self {
                DemandSpec::Epsilon(e) => {
                    if !(*e >= 0.0 && e.is_finite()) {
                        return Err(LedgerError::InvalidBudget(format!("epsilon {e}")));
                    }
                    Ok(Budget::scalar(*e))
                }
                DemandSpec::Curve(c) => Ok(Budget::scalar(rdp::rdp_to_dp(c, claim_delta)?.0.epsilon)),
                _ => {
                    let c = self.curve(&AlphaGrid::extended())?;
                    Ok(Budget::scalar(rdp::rdp_to_dp(&c, claim_delta)?.0.epsilon))
                }
            },
        }
    }
}

/// Per-block demands of one claim. Serialized as a list of
/// `[block, budget]` pairs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<(BlockId, Budget)>", into = "Vec<(BlockId, Budget)>")]
pub struct DemandVector {
    entries: BTreeMap<BlockId, Budget>,
}

impl DemandVector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, block: BlockId, demand: Budget) {
        self.entries.insert(block, demand);
    }

    pub fn with(mut self, block: BlockId, demand: Budget) -> Self {
        self.insert(block, demand);
        self
    }

    pub fn get(&self, block: BlockId) -> Option<&Budget> {
        self.entries.get(&block)
    }

    pub fn iter(&self) -> impl Iterator<Item = (BlockId, &Budget)> {
        self.entries.iter().map(|(k, v)| (*k, v))
    }

    pub fn blocks(&self) -> impl Iterator<Item = BlockId> + '_ {
        self.entries.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Multiplies every entry by `k`.
    pub fn scaled(&self, k: f64) -> DemandVector {
        DemandVector {
            entries: self.entries.iter().map(|(b, d)| (*b, d.scaled(k))).collect(),
        }
    }
}

impl From<Vec<(BlockId, Budget)>> for DemandVector {
    fn from(v: Vec<(BlockId, Budget)>) -> Self {
        v.into_iter().collect()
    }
}

impl From<DemandVector> for Vec<(BlockId, Budget)> {
    fn from(d: DemandVector) -> Self {
        d.entries.into_iter().collect()
    }
}

impl FromIterator<(BlockId, Budget)> for DemandVector {
    fn from_iter<T: IntoIterator<Item = (BlockId, Budget)>>(iter: T) -> Self {
        DemandVector {
            entries: iter.into_iter().collect(),
        }
    }
}

/// ε^G, ε^L, ε^U, ε^A, ε^C for one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetRegisters {
    pub total: Budget,
    pub locked: Budget,
    pub unlocked: Budget,
    pub allocated: Budget,
    pub consumed: Budget,
    /// Cumulative amount ever unlocked; capped at `total`.
    pub unlocked_ever: Budget,
    /// Live infinite allocations per order.
    pub inf_allocated: Vec<u32>,
    /// Infinite consumptions per order.
    pub inf_consumed: Vec<u32>,
}

impl BudgetRegisters {
    fn fresh(total: Budget) -> Self {
        let n = total.len();
        BudgetRegisters {
            locked: total.clone(),
            total,
            unlocked: Budget::zeros(n),
            allocated: Budget::zeros(n),
            consumed: Budget::zeros(n),
            unlocked_ever: Budget::zeros(n),
            inf_allocated: vec![0; n],
            inf_consumed: vec![0; n],
        }
    }

    /// Order `i` is usable for new grants: positive budget and no infinite
    /// charge held against it.
    pub fn order_usable(&self, i: usize) -> bool {
        self.total.0[i] > 0.0 && self.inf_allocated[i] == 0 && self.inf_consumed[i] == 0
    }

    /// Orders at which the block still satisfies its global guarantee:
    /// unlocked ≥ 0 and allocated + consumed ≤ total.
    pub fn guaranteed_orders(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.total.len()).filter(move |&i| {
            self.inf_allocated[i] == 0
                && self.inf_consumed[i] == 0
                && self.unlocked.0[i] >= -TOLERANCE
                && self.allocated.0[i] + self.consumed.0[i] <= self.total.0[i] + TOLERANCE
        })
    }

    /// Index of the first order at which `demand` fits in the unlocked
    /// budget.
    pub fn fitting_order(&self, demand: &Budget) -> Option<usize> {
        (0..self.total.len()).find(|&i| {
            let d = demand.0[i];
            self.order_usable(i) && d.is_finite() && d <= self.unlocked.0[i] + TOLERANCE
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivateBlock {
    pub id: BlockId,
    pub descriptor: BlockDescriptor,
    pub registers: BudgetRegisters,
    pub created_at: u64,
    pub retired: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ClaimState {
    Pending,
    Allocated,
    PartiallyConsumed,
    Consumed,
    Released,
    Denied,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyClaim {
    pub id: ClaimId,
    pub selector: BlockSelector,
    pub demand: DemandVector,
    pub state: ClaimState,
    pub bound_blocks: BTreeSet<BlockId>,
    pub arrival_tick: u64,
    /// Allocation not yet consumed, per bound block.
    pub remaining: BTreeMap<BlockId, Budget>,
    /// Consumed so far, per block.
    pub consumed: BTreeMap<BlockId, Budget>,
}

/// Result of an allocation attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Allocation {
    Granted,
    Insufficient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub block: Option<BlockId>,
    pub claim: Option<ClaimId>,
    pub order: Option<f64>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(b) = self.block {
            write!(f, "block {b}: ")?;
        }
        if let Some(c) = self.claim {
            write!(f, "claim {c}: ")?;
        }
        if let Some(a) = self.order {
            write!(f, "alpha {a}: ")?;
        }
        f.write_str(&self.message)
    }
}

/// Sequential state machine over blocks and claims.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ledger {
    mode: AccountingMode,
    /// Rényi blocks retire once no order has more than this left.
    retire_floor: f64,
    blocks: BTreeMap<BlockId, PrivateBlock>,
    claims: BTreeMap<ClaimId, PrivacyClaim>,
    next_block: u64,
    next_claim: u64,
}

impl Ledger {
    pub fn new(mode: AccountingMode) -> Self {
        Ledger {
            mode,
            retire_floor: TOLERANCE,
            blocks: BTreeMap::new(),
            claims: BTreeMap::new(),
            next_block: 0,
            next_claim: 0,
        }
    }

    pub fn with_retire_floor(mut self, floor: f64) -> Self {
        self.retire_floor = floor;
        self
    }

    pub fn mode(&self) -> &AccountingMode {
        &self.mode
    }

    pub fn dims(&self) -> usize {
        self.mode.dims()
    }

    pub fn block(&self, id: BlockId) -> Option<&PrivateBlock> {
        self.blocks.get(&id)
    }

    pub fn blocks(&self) -> impl Iterator<Item = &PrivateBlock> {
        self.blocks.values()
    }

    pub fn claim(&self, id: ClaimId) -> Option<&PrivacyClaim> {
        self.claims.get(&id)
    }

    pub fn claims(&self) -> impl Iterator<Item = &PrivacyClaim> {
        self.claims.values()
    }

    fn check_dims(&self, b: &Budget) -> Result<(), LedgerError> {
        if b.len() != self.dims() {
            return Err(LedgerError::Dimension {
                expected: self.dims(),
                got: b.len(),
            });
        }
        Ok(())
    }

    /// Adds a block whose whole budget starts locked.
    pub fn create_block(
        &mut self,
        descriptor: BlockDescriptor,
        initial: Budget,
        tick: u64,
    ) -> Result<BlockId, LedgerError> {
        self.check_dims(&initial)?;
        if initial.values().iter().any(|v| !v.is_finite()) {
            return Err(LedgerError::InvalidBudget("block budget must be finite".into()));
        }
        if !initial.is_positive() {
            return Err(LedgerError::InvalidBudget(
                "block budget is non-positive at every order".into(),
            ));
        }
        if self.mode == AccountingMode::Basic && initial.values()[0] < 0.0 {
            return Err(LedgerError::InvalidBudget("negative basic budget".into()));
        }
        if let Some(existing) = self
            .blocks
            .values()
            .find(|b| !b.retired && b.descriptor.overlaps(&descriptor))
        {
            return Err(LedgerError::Overlap {
                new: descriptor,
                existing: existing.id,
            });
        }
        let id = BlockId(self.next_block);
        self.next_block += 1;
        self.blocks.insert(
            id,
            PrivateBlock {
                id,
                descriptor,
                registers: BudgetRegisters::fresh(initial),
                created_at: tick,
                retired: false,
            },
        );
        Ok(id)
    }

    /// Live blocks whose descriptor intersects the selector, by id.
    pub fn match_blocks(&self, selector: &BlockSelector) -> Vec<BlockId> {
        self.blocks
            .values()
            .filter(|b| !b.retired && selector.matches(&b.descriptor))
            .map(|b| b.id)
            .collect()
    }

    /// Registers a pending claim. Demands must be non-negative and name only
    /// blocks the selector matches.
    pub fn submit_claim(
        &mut self,
        selector: BlockSelector,
        demand: DemandVector,
        tick: u64,
    ) -> Result<ClaimId, LedgerError> {
        for (bid, d) in demand.iter() {
            self.check_dims(d)?;
            if d.values().iter().any(|v| v.is_nan() || *v < 0.0) {
                return Err(LedgerError::InvalidBudget(format!(
                    "negative or NaN demand on {bid}"
                )));
            }
            if self.mode == AccountingMode::Basic && !d.values()[0].is_finite() {
                return Err(LedgerError::InvalidBudget("infinite basic demand".into()));
            }
            let block = self.blocks.get(&bid).ok_or(LedgerError::UnknownBlock(bid))?;
            if !selector.matches(&block.descriptor) {
                return Err(LedgerError::NotMatched(bid));
            }
        }
        let id = ClaimId(self.next_claim);
        self.next_claim += 1;
        self.claims.insert(
            id,
            PrivacyClaim {
                id,
                selector,
                demand,
                state: ClaimState::Pending,
                bound_blocks: BTreeSet::new(),
                arrival_tick: tick,
                remaining: BTreeMap::new(),
                consumed: BTreeMap::new(),
            },
        );
        Ok(id)
    }

    fn claim_in(
        &self,
        id: ClaimId,
        allowed: &[ClaimState],
        op: &'static str,
    ) -> Result<&PrivacyClaim, LedgerError> {
        let c = self.claims.get(&id).ok_or(LedgerError::UnknownClaim(id))?;
        if !allowed.contains(&c.state) {
            return Err(LedgerError::State {
                claim: id,
                state: c.state,
                op,
            });
        }
        Ok(c)
    }

    /// Whether the demand could be granted now: basic mode needs
    /// demand ≤ unlocked on every block; Rényi mode needs, per block, some
    /// usable order with demand(α) ≤ unlocked(α). Retired or unknown blocks
    /// never fit.
    pub fn can_satisfy(&self, demand: &DemandVector) -> bool {
        demand.iter().all(|(bid, d)| match self.blocks.get(&bid) {
            Some(b) if !b.retired => {
                if d.len() != self.dims() {
                    return false;
                }
                match self.mode {
                    AccountingMode::Basic => d.0[0] <= b.registers.unlocked.0[0] + TOLERANCE,
                    AccountingMode::Renyi { .. } => b.registers.fitting_order(d).is_some(),
                }
            }
            _ => false,
        })
    }

    /// Moves the claim's whole demand from unlocked to allocated on every
    /// demanded block (at every order in Rényi mode), or changes nothing.
    pub fn allocate(&mut self, id: ClaimId) -> Result<Allocation, LedgerError> {
        let claim = self.claim_in(id, &[ClaimState::Pending], "allocate")?;
        if claim.demand.is_empty() || !self.can_satisfy(&claim.demand) {
            return Ok(Allocation::Insufficient);
        }
        let demand = claim.demand.clone();
        for (bid, d) in demand.iter() {
            let regs = &mut self.blocks.get_mut(&bid).expect("checked").registers;
            for (i, &v) in d.0.iter().enumerate() {
                if v.is_infinite() {
                    regs.inf_allocated[i] += 1;
                } else {
                    regs.unlocked.0[i] -= v;
                    regs.allocated.0[i] += v;
                }
            }
        }
        let claim = self.claims.get_mut(&id).expect("checked");
        claim.state = ClaimState::Allocated;
        claim.bound_blocks = demand.blocks().collect();
        claim.remaining = demand.iter().map(|(b, d)| (b, d.clone())).collect();
        Ok(Allocation::Granted)
    }

    /// Marks a pending claim as denied.
    pub fn deny(&mut self, id: ClaimId) -> Result<(), LedgerError> {
        self.claim_in(id, &[ClaimState::Pending], "deny")?;
        self.claims.get_mut(&id).expect("checked").state = ClaimState::Denied;
        Ok(())
    }

    /// Deducts part of a claim's allocation. Fails without mutation if any
    /// amount exceeds what remains allocated.
    ///
    /// At an order whose allocation is infinite, any positive amount
    /// consumes the whole (infinite) allocation.
    pub fn consume(&mut self, id: ClaimId, amounts: &DemandVector) -> Result<(), LedgerError> {
        let claim = self.claim_in(
            id,
            &[ClaimState::Allocated, ClaimState::PartiallyConsumed],
            "consume",
        )?;
        for (bid, a) in amounts.iter() {
            self.check_dims(a)?;
            let rem = claim
                .remaining
                .get(&bid)
                .ok_or(LedgerError::Exceeds { claim: id, block: bid })?;
            for (&x, &r) in a.0.iter().zip(&rem.0) {
                if x.is_nan() || x < 0.0 {
                    return Err(LedgerError::InvalidBudget(format!("consume amount {x}")));
                }
                if r.is_finite() && x > r + TOLERANCE {
                    return Err(LedgerError::Exceeds { claim: id, block: bid });
                }
            }
        }

        let dims = self.dims();
        for (bid, a) in amounts.iter() {
            let claim = self.claims.get_mut(&id).expect("checked");
            let rem = claim.remaining.get_mut(&bid).expect("checked");
            let used = claim
                .consumed
                .entry(bid)
                .or_insert_with(|| Budget::zeros(dims));
            let regs = &mut self.blocks.get_mut(&bid).expect("bound").registers;
            for i in 0..dims {
                let x = a.0[i];
                if x == 0.0 {
                    continue;
                }
                if rem.0[i].is_infinite() {
                    rem.0[i] = 0.0;
                    used.0[i] = f64::INFINITY;
                    regs.inf_allocated[i] -= 1;
                    regs.inf_consumed[i] += 1;
                } else {
                    let x = x.min(rem.0[i]);
                    rem.0[i] -= x;
                    used.0[i] += x;
                    regs.allocated.0[i] -= x;
                    regs.consumed.0[i] += x;
                }
            }
        }

        let claim = self.claims.get_mut(&id).expect("checked");
        let done = claim.remaining.values().all(|r| r.is_zero());
        claim.state = if done {
            ClaimState::Consumed
        } else {
            ClaimState::PartiallyConsumed
        };
        if done {
            claim.remaining.clear();
        }
        let touched: Vec<BlockId> = amounts.blocks().collect();
        for bid in touched {
            self.maybe_retire(bid);
        }
        Ok(())
    }

    /// Consumes everything the claim still holds.
    pub fn consume_all(&mut self, id: ClaimId) -> Result<(), LedgerError> {
        let claim = self.claim_in(
            id,
            &[ClaimState::Allocated, ClaimState::PartiallyConsumed],
            "consume",
        )?;
        let amounts: DemandVector = claim
            .remaining
            .iter()
            .map(|(b, r)| (*b, r.clone()))
            .collect();
        self.consume(id, &amounts)
    }

    /// Returns a claim's unconsumed allocation to the unlocked registers.
    pub fn release(&mut self, id: ClaimId) -> Result<(), LedgerError> {
        self.claim_in(
            id,
            &[ClaimState::Allocated, ClaimState::PartiallyConsumed],
            "release",
        )?;
        let claim = self.claims.get_mut(&id).expect("checked");
        let remaining = std::mem::take(&mut claim.remaining);
        claim.state = ClaimState::Released;
        claim.bound_blocks.clear();
        for (bid, rem) in remaining {
            let regs = &mut self.blocks.get_mut(&bid).expect("bound").registers;
            for (i, &r) in rem.0.iter().enumerate() {
                if r.is_infinite() {
                    regs.inf_allocated[i] -= 1;
                } else {
                    regs.allocated.0[i] -= r;
                    regs.unlocked.0[i] += r;
                }
            }
        }
        Ok(())
    }

    /// Moves up to `amount` from locked to unlocked, per order, so that the
    /// cumulative unlocked amount never exceeds the block total. Orders with
    /// non-positive totals are never unlocked. Returns what was unlocked.
    pub fn unlock(&mut self, id: BlockId, amount: &Budget) -> Result<Budget, LedgerError> {
        self.check_dims(amount)?;
        if amount.values().iter().any(|v| v.is_nan() || *v < 0.0) {
            return Err(LedgerError::InvalidBudget("negative unlock".into()));
        }
        let regs = &mut self
            .blocks
            .get_mut(&id)
            .ok_or(LedgerError::UnknownBlock(id))?
            .registers;
        let mut moved = Budget::zeros(amount.len());
        for i in 0..amount.len() {
            let total = regs.total.0[i];
            if total <= 0.0 {
                continue;
            }
            let room = (total - regs.unlocked_ever.0[i]).max(0.0);
            let x = amount.0[i].min(room);
            if x <= 0.0 {
                continue;
            }
            // Snap the last unlock onto the total to avoid float residue.
            if x == room {
                regs.unlocked_ever.0[i] = total;
            } else {
                regs.unlocked_ever.0[i] += x;
            }
            regs.locked.0[i] -= x;
            regs.unlocked.0[i] += x;
            moved.0[i] = x;
        }
        Ok(moved)
    }

    /// Unlocks `fraction` of the block's positive total at every order.
    pub fn unlock_fraction(&mut self, id: BlockId, fraction: f64) -> Result<Budget, LedgerError> {
        let total = &self
            .blocks
            .get(&id)
            .ok_or(LedgerError::UnknownBlock(id))?
            .registers
            .total;
        let amount = Budget(total.0.iter().map(|&t| t.max(0.0) * fraction).collect());
        self.unlock(id, &amount)
    }

    fn maybe_retire(&mut self, id: BlockId) {
        let floor = self.retire_floor;
        let basic = !self.mode.is_renyi();
        let b = self.blocks.get_mut(&id).expect("exists");
        if b.retired {
            return;
        }
        let r = &b.registers;
        let exhausted = if basic {
            r.consumed.0[0] >= r.total.0[0] - TOLERANCE
        } else {
            !(0..r.total.len()).any(|i| {
                r.inf_consumed[i] == 0 && r.total.0[i] - r.consumed.0[i] > floor
            })
        };
        if exhausted {
            log::debug!("retiring block {id}");
            b.retired = true;
        }
    }

    /// Checks every accounting invariant; returns the violations found.
    pub fn audit(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let orders: Vec<Option<f64>> = match &self.mode {
            AccountingMode::Basic => vec![None],
            AccountingMode::Renyi { grid } => grid.orders().iter().map(|&a| Some(a)).collect(),
        };
        let mut claim_consumed: BTreeMap<BlockId, (Vec<f64>, Vec<u32>)> = BTreeMap::new();
        let mut claim_allocated: BTreeMap<BlockId, (Vec<f64>, Vec<u32>)> = BTreeMap::new();
        let dims = self.dims();
        let fold = |map: &mut BTreeMap<BlockId, (Vec<f64>, Vec<u32>)>, bid: BlockId, b: &Budget| {
            let e = map
                .entry(bid)
                .or_insert_with(|| (vec![0.0; dims], vec![0; dims]));
            for (i, &v) in b.0.iter().enumerate() {
                if v.is_infinite() {
                    e.1[i] += 1;
                } else {
                    e.0[i] += v;
                }
            }
        };

        for c in self.claims.values() {
            let should_bind = matches!(
                c.state,
                ClaimState::Allocated | ClaimState::PartiallyConsumed | ClaimState::Consumed
            );
            if should_bind == c.bound_blocks.is_empty() {
                out.push(Violation {
                    block: None,
                    claim: Some(c.id),
                    order: None,
                    message: format!(
                        "state {:?} with {} bound blocks",
                        c.state,
                        c.bound_blocks.len()
                    ),
                });
            }
            for (bid, b) in &c.consumed {
                fold(&mut claim_consumed, *bid, b);
            }
            for (bid, b) in &c.remaining {
                fold(&mut claim_allocated, *bid, b);
            }
        }

        for b in self.blocks.values() {
            let r = &b.registers;
            let mut push = |i: Option<usize>, message: String| {
                out.push(Violation {
                    block: Some(b.id),
                    claim: None,
                    order: i.and_then(|i| orders[i]),
                    message,
                })
            };
            for i in 0..dims {
                let sum = r.locked.0[i] + r.unlocked.0[i] + r.allocated.0[i] + r.consumed.0[i];
                if (sum - r.total.0[i]).abs() > TOLERANCE * r.total.0[i].abs().max(1.0) {
                    push(
                        Some(i),
                        format!("identity broken: total {} vs parts {}", r.total.0[i], sum),
                    );
                }
                if r.allocated.0[i] < -TOLERANCE || r.consumed.0[i] < -TOLERANCE {
                    push(Some(i), "negative allocated or consumed".into());
                }
                if r.total.0[i] > 0.0 && r.locked.0[i] < -TOLERANCE {
                    push(Some(i), format!("locked went negative: {}", r.locked.0[i]));
                }
                if r.unlocked_ever.0[i] > r.total.0[i].max(0.0) + TOLERANCE {
                    push(Some(i), "cumulative unlock exceeds total".into());
                }
            }
            if self.mode == AccountingMode::Basic {
                let names = ["locked", "unlocked"];
                for (name, reg) in names.iter().zip([&r.locked, &r.unlocked]) {
                    if reg.0[0] < -TOLERANCE {
                        push(None, format!("{name} is negative: {}", reg.0[0]));
                    }
                }
                if r.consumed.0[0] > r.total.0[0] + TOLERANCE {
                    push(None, "consumed exceeds total".into());
                }
            } else if r.guaranteed_orders().next().is_none() {
                push(
                    None,
                    "no order with unlocked >= 0 and allocated + consumed <= total".into(),
                );
            }
            let zero = (vec![0.0; dims], vec![0; dims]);
            for (name, map, reg, inf) in [
                ("consumed", &claim_consumed, &r.consumed, &r.inf_consumed),
                ("allocated", &claim_allocated, &r.allocated, &r.inf_allocated),
            ] {
                let (sum, infs) = map.get(&b.id).unwrap_or(&zero);
                for i in 0..dims {
                    if (sum[i] - reg.0[i]).abs() > TOLERANCE * reg.0[i].abs().max(1.0) {
                        push(
                            Some(i),
                            format!("claims hold {} {name}, register says {}", sum[i], reg.0[i]),
                        );
                    }
                    if infs[i] != inf[i] {
                        push(Some(i), format!("infinite {name} count mismatch"));
                    }
                }
            }
        }
        out
    }

    /// JSON snapshot of every block and claim.
    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }

    #[cfg(test)]
    pub(crate) fn registers_mut(&mut self, id: BlockId) -> &mut BudgetRegisters {
        &mut self.blocks.get_mut(&id).unwrap().registers
    }
}
