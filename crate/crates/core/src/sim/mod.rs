//! Deterministic discrete-event simulation of pipelines competing for
//! privacy budget.
//!
//! Events are processed in (tick, kind priority, sequence) order. Block
//! creations come first in a tick, then unlock ticks, arrivals, releases
//! and consumes. A scheduler pass follows every arrival, unlock tick and
//! release. The ledger is audited after every event.

mod events;
mod metrics;
mod workload;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ledger::{
    BlockDescriptor, BlockId, BlockSelector, ClaimId, ClaimState, DemandVector, Interval, Ledger,
    LedgerError,
};
use crate::scheduler::{self, PolicyConfig, PolicyKind, Scheduler, SchedulerError, UnlockEffect};
use crate::semantics::{Record, SemanticConfig, SemanticKind, SemanticManager, SemanticsError};

pub use events::{replay, replay_into, EventKind, SimEvent};
pub use metrics::{BlockSnapshot, DelayStats, Metrics, MetricsRow, PipelineOutcome, SCHEMA_VERSION};
pub use workload::{
    generate_workload, parse_trace_jsonl, Arrival, BlockCount, ClassSpec, DemandTemplate,
    PipelineClass, PipelineSelector, PipelineSpec, SelectorPolicy, WorkloadSpec,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Semantics(#[from] SemanticsError),
    #[error("ledger audit failed after event {event_index}: {}", violations.join("; "))]
    Audit {
        event_index: usize,
        violations: Vec<String>,
    },
    #[error("replay diverged: {0}")]
    Replay(String),
}

/// Time-window blocks for Event semantics: `initial` blocks at tick 0, then
/// one more every `interval` ticks, up to `max_blocks` in total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockPlan {
    #[serde(default = "one")]
    pub initial: u64,
    #[serde(default)]
    pub interval: Option<u64>,
    #[serde(default)]
    pub max_blocks: Option<u64>,
}

impl Default for BlockPlan {
    fn default() -> Self {
        BlockPlan {
            initial: 1,
            interval: None,
            max_blocks: None,
        }
    }
}

/// New users per tick, for User and User-Time semantics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserStream {
    pub arrival: UserArrival,
    /// Upper limit on user groups that get blocks.
    #[serde(default)]
    pub max_user_groups: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum UserArrival {
    Fixed { per_tick: u64 },
    Poisson { rate: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Workload {
    Generate(WorkloadSpec),
    Pipelines(Vec<PipelineSpec>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Execution {
    /// Ticks between grant and consumption.
    #[serde(default = "one")]
    pub consume_delay: u64,
    /// Probability that a granted pipeline consumes a random share of its
    /// allocation and releases the rest instead of consuming it all.
    #[serde(default)]
    pub release_fraction: f64,
}

impl Default for Execution {
    fn default() -> Self {
        Execution {
            consume_delay: 1,
            release_fraction: 0.0,
        }
    }
}

fn one() -> u64 {
    1
}

fn yes() -> bool {
    true
}

fn default_semantic() -> SemanticConfig {
    SemanticConfig::event(1)
}

fn default_eps_g() -> f64 {
    10.0
}

fn default_delta_g() -> f64 {
    1e-7
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub policy: PolicyConfig,
    #[serde(default = "default_semantic")]
    pub semantic: SemanticConfig,
    #[serde(default = "default_eps_g")]
    pub eps_g: f64,
    #[serde(default = "default_delta_g")]
    pub delta_g: f64,
    /// δ used when a mechanism demand is translated to a basic ε.
    /// Defaults to `delta_g`.
    #[serde(default)]
    pub claim_delta: Option<f64>,
    /// Events at ticks >= horizon are not processed.
    pub horizon: u64,
    #[serde(default)]
    pub blocks: Option<BlockPlan>,
    #[serde(default)]
    pub users: Option<UserStream>,
    pub workload: Workload,
    #[serde(default)]
    pub execution: Execution,
    /// Pending claims are denied after waiting this many ticks.
    #[serde(default)]
    pub max_wait: Option<u64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub check_properties: bool,
    #[serde(default = "yes")]
    pub audit: bool,
}

impl SimConfig {
    pub fn new(policy: PolicyConfig, horizon: u64, workload: Workload) -> Self {
        SimConfig {
            policy,
            semantic: default_semantic(),
            eps_g: default_eps_g(),
            delta_g: default_delta_g(),
            claim_delta: None,
            horizon,
            blocks: None,
            users: None,
            workload,
            execution: Execution::default(),
            max_wait: None,
            seed: 0,
            check_properties: false,
            audit: true,
        }
    }

    pub fn with_policy(&self, policy: PolicyKind) -> Self {
        SimConfig {
            policy: self.policy.with_policy(policy),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.policy.validate()?;
        self.semantic.validate()?;
        if !(self.eps_g > 0.0 && self.eps_g.is_finite()) {
            return Err(SimError::Config(format!("eps_g must be positive, got {}", self.eps_g)));
        }
        if !(self.delta_g > 0.0 && self.delta_g < 1.0) {
            return Err(SimError::Config(format!("delta_g must be in (0, 1), got {}", self.delta_g)));
        }
        if let Some(d) = self.claim_delta {
            if !(d > 0.0 && d <= 1.0) {
                return Err(SimError::Config(format!("claim_delta must be in (0, 1], got {d}")));
            }
        }
        if self.blocks.is_some() && self.semantic.semantic != SemanticKind::Event {
            return Err(SimError::Config(
                "a block plan only applies to Event semantics".into(),
            ));
        }
        if let Some(BlockPlan {
            interval: Some(0), ..
        }) = self.blocks
        {
            return Err(SimError::Config("block interval must be positive".into()));
        }
        if let Some(UserStream {
            arrival: UserArrival::Poisson { rate },
            ..
        }) = self.users
        {
            if !(rate >= 0.0 && rate.is_finite()) {
                return Err(SimError::Config(format!("user arrival rate {rate}")));
            }
        }
        let rf = self.execution.release_fraction;
        if !(0.0..=1.0).contains(&rf) {
            return Err(SimError::Config(format!("release_fraction must be in [0, 1], got {rf}")));
        }
        if let Workload::Generate(w) = &self.workload {
            w.validate()?;
        }
        Ok(())
    }

    pub fn pipelines(&self) -> Result<Vec<PipelineSpec>, SimError> {
        match &self.workload {
            Workload::Generate(w) => generate_workload(w),
            Workload::Pipelines(p) => Ok(p.clone()),
        }
    }
}

/// Output of one run.
#[derive(Debug, Clone)]
pub struct SimResult {
    pub metrics: Metrics,
    pub events: Vec<SimEvent>,
    pub ledger: Ledger,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Pending {
    BlockCreate(u64),
    Tick,
    Arrive(usize),
    Release(ClaimId),
    Consume(ClaimId),
    Expire(usize),
}

impl Pending {
    fn priority(self) -> u8 {
        match self {
            Pending::BlockCreate(_) => 0,
            Pending::Tick => 1,
            Pending::Arrive(_) => 2,
            Pending::Release(_) => 3,
            Pending::Consume(_) => 4,
            Pending::Expire(_) => 5,
        }
    }
}

type QueueKey = Reverse<(u64, u8, u64, Pending)>;

struct Sim<'a> {
    cfg: &'a SimConfig,
    claim_delta: f64,
    ledger: Ledger,
    sched: Scheduler,
    sem: SemanticManager,
    pipelines: Vec<PipelineSpec>,
    queue: BinaryHeap<QueueKey>,
    queued: u64,
    log: Vec<SimEvent>,
    outcomes: Vec<PipelineOutcome>,
    outcome_of: BTreeMap<usize, usize>,
    pipeline_of: BTreeMap<ClaimId, usize>,
    rngs: BTreeMap<usize, ChaCha8Rng>,
    user_rng: ChaCha8Rng,
    next_user: u64,
}

impl<'a> Sim<'a> {
    fn new(cfg: &'a SimConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let mode = cfg.policy.accounting.clone();
        let sched = Scheduler::new(cfg.policy.clone())?.with_property_checks(cfg.check_properties);
        let sem = SemanticManager::new(cfg.semantic.clone(), &mode, cfg.eps_g, cfg.delta_g, cfg.seed)?;
        let mut user_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        user_rng.set_stream(0);
        Ok(Sim {
            cfg,
            claim_delta: cfg.claim_delta.unwrap_or(cfg.delta_g),
            ledger: Ledger::new(mode),
            sched,
            sem,
            pipelines: cfg.pipelines()?,
            queue: BinaryHeap::new(),
            queued: 0,
            log: Vec::new(),
            outcomes: Vec::new(),
            outcome_of: BTreeMap::new(),
            pipeline_of: BTreeMap::new(),
            rngs: BTreeMap::new(),
            user_rng,
            next_user: 0,
        })
    }

    fn push(&mut self, tick: u64, what: Pending) {
        if tick < self.cfg.horizon {
            self.queue
                .push(Reverse((tick, what.priority(), self.queued, what)));
            self.queued += 1;
        }
    }

    fn record(&mut self, tick: u64, event: EventKind) {
        let seq = self.log.len() as u64;
        self.log.push(SimEvent { seq, tick, event });
    }

    fn record_unlocks(&mut self, tick: u64, effects: Vec<UnlockEffect>) {
        for e in effects {
            self.record(
                tick,
                EventKind::Unlock {
                    block: e.block,
                    amount: e.amount,
                },
            );
        }
    }

    fn rng(&mut self, p: usize) -> &mut ChaCha8Rng {
        let seed = self.cfg.seed;
        self.rngs.entry(p).or_insert_with(|| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(p as u64 + 1);
            r
        })
    }

    fn needs_ticks(&self) -> bool {
        self.cfg.policy.policy.unlocks_on_timer() || self.cfg.semantic.semantic.uses_counter()
    }

    fn next_tick_after(&self, t: u64) -> u64 {
        if self.cfg.semantic.semantic.uses_counter() {
            t + 1
        } else {
            let i = self.cfg.policy.unlock_interval;
            (t / i + 1) * i
        }
    }

    fn seed_queue(&mut self) {
        if self.cfg.semantic.semantic == SemanticKind::Event {
            let plan = self.cfg.blocks.clone().unwrap_or_default();
            let first = match plan.max_blocks {
                Some(m) => plan.initial.min(m),
                None => plan.initial,
            };
            for i in 0..first {
                self.push(0, Pending::BlockCreate(i));
            }
            if plan.initial == 0 {
                if let Some(d) = plan.interval {
                    if plan.max_blocks != Some(0) {
                        self.push(d, Pending::BlockCreate(0));
                    }
                }
            }
        }
        if self.needs_ticks() {
            let first = if self.cfg.semantic.semantic.uses_counter() {
                1
            } else {
                self.cfg.policy.unlock_interval
            };
            self.push(first, Pending::Tick);
        }
        for (p, spec) in self.pipelines.iter().enumerate() {
            if spec.arrival_tick < self.cfg.horizon {
                self.queue.push(Reverse((
                    spec.arrival_tick,
                    Pending::Arrive(p).priority(),
                    self.queued,
                    Pending::Arrive(p),
                )));
                self.queued += 1;
            }
        }
    }

    fn run(mut self) -> Result<SimResult, SimError> {
        self.seed_queue();
        while let Some(Reverse((tick, _, _, what))) = self.queue.pop() {
            match what {
                Pending::BlockCreate(i) => self.on_block_create(tick, i)?,
                Pending::Tick => self.on_tick(tick)?,
                Pending::Arrive(p) => self.on_arrive(tick, p)?,
                Pending::Release(c) => self.on_release(tick, c)?,
                Pending::Consume(c) => self.on_consume(tick, c)?,
                Pending::Expire(p) => self.on_expire(tick, p)?,
            }
            if self.cfg.audit {
                let v = self.ledger.audit();
                if !v.is_empty() {
                    return Err(SimError::Audit {
                        event_index: self.log.len(),
                        violations: v.iter().map(|x| x.to_string()).collect(),
                    });
                }
            }
        }
        let metrics = Metrics::collect(
            self.cfg.policy.policy,
            self.outcomes,
            &self.ledger,
            self.sched.violations().to_vec(),
        );
        Ok(SimResult {
            metrics,
            events: self.log,
            ledger: self.ledger,
        })
    }

    fn create_block(&mut self, tick: u64, desc: BlockDescriptor) -> Result<(), SimError> {
        let (id, fresh) = self.sem.ensure_block(&mut self.ledger, desc, tick)?;
        if !fresh {
            return Ok(());
        }
        self.record(
            tick,
            EventKind::BlockCreate {
                block: id,
                descriptor: desc,
                budget: self.sem.initial_budget().clone(),
            },
        );
        let fx = self.sched.on_block_created(&mut self.ledger, id)?;
        self.record_unlocks(tick, fx);
        Ok(())
    }

    fn on_block_create(&mut self, tick: u64, i: u64) -> Result<(), SimError> {
        let w = self.cfg.semantic.window_ticks;
        let desc = crate::semantics::assign_block(
            Record {
                user_id: 0,
                timestamp: i * w,
            },
            &self.cfg.semantic,
        );
        self.create_block(tick, desc)?;
        let plan = self.cfg.blocks.clone().unwrap_or_default();
        if let Some(d) = plan.interval {
            let next = i + 1;
            if next >= plan.initial && plan.max_blocks.is_none_or(|m| next < m) {
                self.push(tick + d, Pending::BlockCreate(next));
            }
        }
        Ok(())
    }

    fn group_cap(&self) -> u64 {
        self.cfg
            .users
            .as_ref()
            .and_then(|u| u.max_user_groups)
            .unwrap_or(u64::MAX)
    }

    fn on_tick(&mut self, tick: u64) -> Result<(), SimError> {
        self.record(tick, EventKind::UnlockTick);
        if self.cfg.semantic.semantic.uses_counter() {
            self.counter_interval(tick)?;
        }
        let i = self.cfg.policy.unlock_interval;
        if self.cfg.policy.policy.unlocks_on_timer() && tick % i == 0 {
            let fx = self.sched.on_unlock_timer(&mut self.ledger, tick)?;
            self.record_unlocks(tick, fx);
        }
        self.pass(tick, None)?;
        let next = self.next_tick_after(tick);
        self.push(next, Pending::Tick);
        Ok(())
    }

    /// Users who contributed data during interval tick−1 are counted and
    /// get their blocks.
    fn counter_interval(&mut self, tick: u64) -> Result<(), SimError> {
        let n = match self.cfg.users.as_ref().map(|u| &u.arrival) {
            None => 0,
            Some(UserArrival::Fixed { per_tick }) => *per_tick,
            Some(UserArrival::Poisson { rate }) if *rate > 0.0 => Poisson::new(*rate)
                .map_err(|e| SimError::Config(format!("user arrivals: {e}")))?
                .sample(&mut self.user_rng) as u64,
            Some(UserArrival::Poisson { .. }) => 0,
        };
        let horizon_left = self
            .sem
            .counter()
            .is_some_and(|c| c.intervals() < c.config().horizon);
        if !horizon_left {
            return Ok(());
        }
        self.sem.on_interval(n)?;
        let c = self.sem.counter().expect("counter semantics");
        let t = c.intervals();
        let row = c.trace_row(t)?;
        self.record(
            tick,
            EventKind::CounterUpdate {
                new_users: n,
                released: row.released,
                lower: row.lower,
                upper: row.upper,
            },
        );
        let g = self.cfg.semantic.user_group_size;
        let cap = self.group_cap();
        match self.cfg.semantic.semantic {
            SemanticKind::User => {
                for uid in self.next_user..self.next_user + n {
                    if uid / g >= cap {
                        break;
                    }
                    let desc = crate::semantics::assign_block(
                        Record {
                            user_id: uid,
                            timestamp: tick - 1,
                        },
                        &self.cfg.semantic,
                    );
                    self.create_block(tick, desc)?;
                }
            }
            SemanticKind::UserTime => {
                // cells of the current window for every group the upper
                // bound has reached
                let groups = row.upper.div_ceil(g).min(cap);
                let ts = tick - 1;
                for k in 0..groups {
                    let desc = crate::semantics::assign_block(
                        Record {
                            user_id: k * g,
                            timestamp: ts,
                        },
                        &self.cfg.semantic,
                    );
                    self.create_block(tick, desc)?;
                }
            }
            SemanticKind::Event => {}
        }
        self.next_user += n;
        Ok(())
    }

    /// Blocks and selector a pipeline resolves to at `tick`.
    fn resolve(
        &mut self,
        tick: u64,
        p: usize,
    ) -> Result<Option<(Vec<BlockId>, BlockSelector)>, SimError> {
        let sel = self.pipelines[p].selector.clone();
        let sem = self.cfg.semantic.semantic;
        let w = self.cfg.semantic.window_ticks;
        let g = self.cfg.semantic.user_group_size;
        let pick = |rng: &mut ChaCha8Rng, n: u64, k: u64, random: bool| -> (u64, u64) {
            if n <= k {
                (0, n)
            } else if random {
                let s = rng.random_range(0..=n - k);
                (s, s + k)
            } else {
                (n - k, n)
            }
        };
        match (&sel, sem) {
            (PipelineSelector::Blocks { ids }, _) => {
                let ids: Vec<BlockId> = ids.iter().map(|&i| BlockId(i)).collect();
                if ids.is_empty() || ids.iter().any(|&b| self.ledger.block(b).is_none()) {
                    return Ok(None);
                }
                let descs: Vec<BlockDescriptor> = ids
                    .iter()
                    .map(|&b| self.ledger.block(b).expect("checked").descriptor)
                    .collect();
                let sel = hull(&descs).ok_or_else(|| {
                    SimError::Config(format!("pipeline {p} mixes block kinds"))
                })?;
                Ok(Some((ids, sel)))
            }
            (PipelineSelector::Match { selector }, _) => {
                let ids = self.ledger.match_blocks(selector);
                Ok((!ids.is_empty()).then_some((ids, *selector)))
            }
            (_, SemanticKind::Event) => {
                let live: Vec<BlockId> = self
                    .ledger
                    .blocks()
                    .filter(|b| !b.retired && matches!(b.descriptor, BlockDescriptor::TimeWindow { .. }))
                    .map(|b| b.id)
                    .collect();
                let n = live.len() as u64;
                let (a, b) = match sel {
                    PipelineSelector::LatestK { k } => pick(self.rng(p), n, k, false),
                    PipelineSelector::RandomWindow { k } => pick(self.rng(p), n, k, true),
                    _ => (0, n),
                };
                let ids: Vec<BlockId> = live[a as usize..b as usize].to_vec();
                if ids.is_empty() {
                    return Ok(None);
                }
                let descs: Vec<BlockDescriptor> = ids
                    .iter()
                    .map(|&b| self.ledger.block(b).expect("live").descriptor)
                    .collect();
                Ok(Some((ids, hull(&descs).expect("time windows"))))
            }
            (_, SemanticKind::User) => {
                let users = Interval::new(0, self.sem.user_lower_bound() / g * g);
                let selector = BlockSelector::Users { users };
                let ids = if users.is_empty() {
                    Vec::new()
                } else {
                    self.ledger.match_blocks(&selector)
                };
                Ok((!ids.is_empty()).then_some((ids, selector)))
            }
            (_, SemanticKind::UserTime) => {
                let users = Interval::new(0, self.sem.user_lower_bound() / g * g);
                let windows = tick / w;
                let (a, b) = match sel {
                    PipelineSelector::LatestK { k } => pick(self.rng(p), windows, k, false),
                    PipelineSelector::RandomWindow { k } => pick(self.rng(p), windows, k, true),
                    _ => (0, windows),
                };
                let selector = BlockSelector::UserTime {
                    users,
                    time: Interval::new(a * w, b * w),
                };
                let ids = if users.is_empty() || a == b {
                    Vec::new()
                } else {
                    self.ledger.match_blocks(&selector)
                };
                Ok((!ids.is_empty()).then_some((ids, selector)))
            }
        }
    }

    fn outcome(&mut self, p: usize) -> &mut PipelineOutcome {
        let i = self.outcome_of[&p];
        &mut self.outcomes[i]
    }

    fn on_arrive(&mut self, tick: u64, p: usize) -> Result<(), SimError> {
        let spec = self.pipelines[p].clone();
        self.outcome_of.insert(p, self.outcomes.len());
        self.outcomes.push(PipelineOutcome {
            pipeline: p as u64,
            claim: None,
            class: spec.class,
            arrival_tick: tick,
            grant_tick: None,
            deny_tick: None,
            granted_in_arrival_pass: false,
            fair: false,
        });
        let Some((ids, selector)) = self.resolve(tick, p)? else {
            self.record(
                tick,
                EventKind::PipelineArrive {
                    pipeline: p as u64,
                    claim: None,
                    class: spec.class,
                    selector: None,
                    demand: None,
                },
            );
            self.record(
                tick,
                EventKind::Deny {
                    pipeline: p as u64,
                    claim: None,
                    reason: "no requestable blocks".into(),
                },
            );
            self.outcome(p).deny_tick = Some(tick);
            return Ok(());
        };
        if spec.demand.len() != 1 && spec.demand.len() != ids.len() {
            return Err(SimError::Config(format!(
                "pipeline {p}: {} demand templates for {} blocks",
                spec.demand.len(),
                ids.len()
            )));
        }
        let fair_fraction = self.cfg.policy.fair_share_fraction();
        let mode = self.cfg.policy.accounting.clone();
        let mut demand = DemandVector::new();
        for (i, &b) in ids.iter().enumerate() {
            let t = &spec.demand[if spec.demand.len() == 1 { 0 } else { i }];
            let total = &self.ledger.block(b).expect("resolved").registers.total;
            demand.insert(b, t.compile(total, &mode, fair_fraction, self.claim_delta)?);
        }
        let claim = self.ledger.submit_claim(selector, demand.clone(), tick)?;
        self.pipeline_of.insert(claim, p);
        self.outcome(p).claim = Some(claim);
        self.record(
            tick,
            EventKind::PipelineArrive {
                pipeline: p as u64,
                claim: Some(claim),
                class: spec.class,
                selector: Some(selector),
                demand: Some(demand.clone()),
            },
        );
        let fx = self.sched.on_pipeline_arrival(&mut self.ledger, claim)?;
        self.record_unlocks(tick, fx);
        if self.cfg.policy.policy.unlocks_on_arrival() {
            let ranks: BTreeMap<BlockId, u64> = demand
                .blocks()
                .map(|b| (b, self.sched.requester_count(b)))
                .collect();
            let fair = scheduler::is_fair_demand(&demand, &ranks, &self.ledger, self.cfg.policy.n);
            self.outcome(p).fair = fair;
        }
        if let Some(mw) = self.cfg.max_wait {
            self.push(tick + mw, Pending::Expire(p));
        }
        self.pass(tick, Some(p))
    }

    fn pass(&mut self, tick: u64, trigger: Option<usize>) -> Result<(), SimError> {
        let out = self.sched.scheduler_pass(&mut self.ledger, tick)?;
        let policy = self.cfg.policy.policy;
        for d in out.denied {
            let p = self.pipeline_of[&d.claim];
            self.record(
                tick,
                EventKind::Deny {
                    pipeline: p as u64,
                    claim: Some(d.claim),
                    reason: "block retired".into(),
                },
            );
            self.outcome(p).deny_tick = Some(tick);
        }
        for d in out.granted {
            let p = self.pipeline_of[&d.claim];
            self.record(
                tick,
                EventKind::Grant {
                    claim: d.claim,
                    pipeline: p as u64,
                    dominant_share: d.dominant_share,
                    policy,
                },
            );
            let o = self.outcome(p);
            o.grant_tick = Some(tick);
            o.granted_in_arrival_pass = trigger == Some(p);
            let rf = self.cfg.execution.release_fraction;
            let release = rf > 0.0 && self.rng(p).random::<f64>() < rf;
            let at = tick + self.cfg.execution.consume_delay;
            if release {
                self.push(at, Pending::Release(d.claim));
            } else {
                self.push(at, Pending::Consume(d.claim));
            }
        }
        Ok(())
    }

    fn on_consume(&mut self, tick: u64, claim: ClaimId) -> Result<(), SimError> {
        let c = self.ledger.claim(claim).ok_or(LedgerError::UnknownClaim(claim))?;
        if !matches!(c.state, ClaimState::Allocated | ClaimState::PartiallyConsumed) {
            return Ok(());
        }
        let amounts: DemandVector = c.remaining.iter().map(|(&b, v)| (b, v.clone())).collect();
        self.ledger.consume(claim, &amounts)?;
        self.record(tick, EventKind::Consume { claim, amounts });
        Ok(())
    }

    fn on_release(&mut self, tick: u64, claim: ClaimId) -> Result<(), SimError> {
        let p = self.pipeline_of[&claim];
        let share: f64 = self.rng(p).random();
        let c = self.ledger.claim(claim).ok_or(LedgerError::UnknownClaim(claim))?;
        if !matches!(c.state, ClaimState::Allocated | ClaimState::PartiallyConsumed) {
            return Ok(());
        }
        let amounts: DemandVector = c
            .remaining
            .iter()
            .map(|(&b, v)| {
                let part = v
                    .values()
                    .iter()
                    .map(|&x| if x.is_finite() { x * share } else { 0.0 })
                    .collect();
                (b, crate::ledger::Budget::from_values(part))
            })
            .collect();
        if amounts.iter().any(|(_, v)| v.is_positive()) {
            self.ledger.consume(claim, &amounts)?;
            self.record(tick, EventKind::Consume { claim, amounts });
        }
        if self
            .ledger
            .claim(claim)
            .is_some_and(|c| c.state != ClaimState::Consumed)
        {
            self.ledger.release(claim)?;
            self.record(tick, EventKind::Release { claim });
        }
        self.pass(tick, None)
    }

    fn on_expire(&mut self, tick: u64, p: usize) -> Result<(), SimError> {
        let Some(claim) = self.outcomes[self.outcome_of[&p]].claim else {
            return Ok(());
        };
        if self.ledger.claim(claim).map(|c| c.state) != Some(ClaimState::Pending) {
            return Ok(());
        }
        self.ledger.deny(claim)?;
        self.sched.remove(claim);
        self.record(
            tick,
            EventKind::Deny {
                pipeline: p as u64,
                claim: Some(claim),
                reason: "max_wait exceeded".into(),
            },
        );
        self.outcome(p).deny_tick = Some(tick);
        Ok(())
    }
}

/// Smallest selector of the descriptors' kind that covers them all.
fn hull(descs: &[BlockDescriptor]) -> Option<BlockSelector> {
    fn join(a: Interval, b: Interval) -> Interval {
        Interval::new(a.start.min(b.start), a.end.max(b.end))
    }
    let mut it = descs.iter();
    let mut acc = match *it.next()? {
        BlockDescriptor::TimeWindow { time } => BlockSelector::Time { time },
        BlockDescriptor::UserGroup { users } => BlockSelector::Users { users },
        BlockDescriptor::UserTimeCell { users, time } => BlockSelector::UserTime { users, time },
    };
    for d in it {
        acc = match (acc, *d) {
            (BlockSelector::Time { time: a }, BlockDescriptor::TimeWindow { time }) => {
                BlockSelector::Time { time: join(a, time) }
            }
            (BlockSelector::Users { users: a }, BlockDescriptor::UserGroup { users }) => {
                BlockSelector::Users { users: join(a, users) }
            }
            (
                BlockSelector::UserTime { users: ua, time: ta },
                BlockDescriptor::UserTimeCell { users, time },
            ) => BlockSelector::UserTime {
                users: join(ua, users),
                time: join(ta, time),
            },
            _ => return None,
        };
    }
    Some(acc)
}

/// Runs one simulation.
pub fn run(cfg: &SimConfig) -> Result<SimResult, SimError> {
    Sim::new(cfg)?.run()
}

/// Runs configs that share a workload and seed, one metrics row each.
pub fn compare_policies(configs: &[SimConfig]) -> Result<Vec<Metrics>, SimError> {
    if let Some(first) = configs.first() {
        if configs
            .iter()
            .any(|c| c.workload != first.workload || c.seed != first.seed)
        {
            return Err(SimError::Config(
                "compared configs must share workload and seed".into(),
            ));
        }
    }
    configs.iter().map(|c| run(c).map(|r| r.metrics)).collect()
}
