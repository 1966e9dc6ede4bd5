//! Event, User and User-Time block assignment, and the streaming user
//! counter (binary mechanism) that gates which user blocks exist and can be
//! requested.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ledger::{AccountingMode, BlockDescriptor, BlockId, Budget, Interval, Ledger, LedgerError};
use crate::rdp::{self, AccountantError, AlphaGrid, RdpCurve};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SemanticsError {
    #[error("invalid counter config: {0}")]
    Counter(String),
    #[error("invalid semantic config: {0}")]
    Config(String),
    #[error("counter horizon {horizon} exhausted")]
    HorizonExceeded { horizon: u64 },
    #[error("release at t={t} requested but only {done} intervals were recorded")]
    NotYetRecorded { t: u64, done: u64 },
    #[error(transparent)]
    Accountant(#[from] AccountantError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SemanticKind {
    Event,
    User,
    UserTime,
}

impl SemanticKind {
    pub fn uses_counter(self) -> bool {
        !matches!(self, SemanticKind::Event)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CounterConfig {
    pub eps_count: f64,
    /// Horizon T in update intervals; a power of two.
    pub horizon: u64,
    pub beta: f64,
    /// Test mode: no noise at all. Not private.
    #[serde(default)]
    pub noiseless: bool,
    /// Use log10 for ln(T/β) in the bound constant.
    #[serde(default)]
    pub log10_bound: bool,
}

impl CounterConfig {
    pub fn new(eps_count: f64, horizon: u64, beta: f64) -> Self {
        CounterConfig {
            eps_count,
            horizon,
            beta,
            noiseless: false,
            log10_bound: false,
        }
    }

    pub fn validate(&self) -> Result<(), SemanticsError> {
        if !(self.eps_count > 0.0 && self.eps_count.is_finite()) {
            return Err(SemanticsError::Counter(format!(
                "eps_count must be positive, got {}",
                self.eps_count
            )));
        }
        if self.horizon < 2 || !self.horizon.is_power_of_two() {
            return Err(SemanticsError::Counter(format!(
                "horizon must be a power of two >= 2, got {}",
                self.horizon
            )));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(SemanticsError::Counter(format!(
                "beta must be in (0, 1), got {}",
                self.beta
            )));
        }
        Ok(())
    }

    /// log2 T, the number of tree levels.
    pub fn levels(&self) -> u32 {
        self.horizon.trailing_zeros()
    }

    /// Laplace scale of each node's noise: log2(T)/eps_count.
    pub fn noise_scale(&self) -> f64 {
        if self.noiseless {
            0.0
        } else {
            f64::from(self.levels()) / self.eps_count
        }
    }

    /// K = (4/ε)·(log2 T)^1.5·ln(T/β).
    pub fn bound_offset(&self) -> f64 {
        let log_t = f64::from(self.levels());
        let ratio = self.horizon as f64 / self.beta;
        let tail = if self.log10_bound {
            ratio.log10()
        } else {
            ratio.ln()
        };
        4.0 / self.eps_count * log_t.powf(1.5) * tail
    }
}

fn default_one() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemanticConfig {
    pub semantic: SemanticKind,
    #[serde(default = "default_one")]
    pub window_ticks: u64,
    #[serde(default = "default_one")]
    pub user_group_size: u64,
    #[serde(default)]
    pub counter: Option<CounterConfig>,
    /// Deduct the binary mechanism's own RDP curve instead of the generic
    /// 2·ε²·α bound.
    #[serde(default)]
    pub tight_counter_curve: bool,
}

impl SemanticConfig {
    pub fn event(window_ticks: u64) -> Self {
        SemanticConfig {
            semantic: SemanticKind::Event,
            window_ticks,
            user_group_size: 1,
            counter: None,
            tight_counter_curve: false,
        }
    }

    pub fn validate(&self) -> Result<(), SemanticsError> {
        if self.window_ticks < 1 {
            return Err(SemanticsError::Config("window_ticks must be >= 1".into()));
        }
        if self.user_group_size < 1 {
            return Err(SemanticsError::Config("user_group_size must be >= 1".into()));
        }
        match (&self.counter, self.semantic.uses_counter()) {
            (Some(c), true) => c.validate(),
            (None, true) => Err(SemanticsError::Config(format!(
                "{:?} semantics need a counter config",
                self.semantic
            ))),
            (_, false) => Ok(()),
        }
    }

    fn counter_eps(&self) -> f64 {
        match (&self.counter, self.semantic.uses_counter()) {
            (Some(c), true) => c.eps_count,
            _ => 0.0,
        }
    }

    /// Initial budget of every block created under this semantic. Basic
    /// accounting subtracts ε_count; Rényi accounting subtracts the
    /// counter's curve at each order after the δ^G conversion term.
    pub fn initial_budget(
        &self,
        mode: &AccountingMode,
        eps_g: f64,
        delta_g: f64,
    ) -> Result<Budget, SemanticsError> {
        let eps_count = self.counter_eps();
        match mode {
            AccountingMode::Basic => {
                let b = eps_g - eps_count;
                if !(b > 0.0) {
                    return Err(SemanticsError::Config(format!(
                        "eps_count {eps_count} leaves no budget out of {eps_g}"
                    )));
                }
                Ok(Budget::scalar(b))
            }
            AccountingMode::Renyi { grid } => {
                let curve = match (&self.counter, self.tight_counter_curve && eps_count > 0.0) {
                    (Some(c), true) => {
                        let d = binary_mechanism_rdp_curve(c.eps_count, c.horizon, grid)?;
                        rdp::block_budget_less(eps_g, delta_g, grid, &d)?
                    }
                    _ => rdp::block_initial_curve(eps_g, delta_g, grid, eps_count)?,
                };
                Ok(curve.into())
            }
        }
    }
}

/// One incoming data record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub user_id: u64,
    pub timestamp: u64,
}

fn window_of(ts: u64, width: u64) -> Interval {
    let w = ts / width;
    Interval::new(w * width, (w + 1) * width)
}

fn group_of(uid: u64, g: u64) -> Interval {
    let k = uid / g;
    Interval::new(k * g, (k + 1) * g)
}

/// Block a record belongs to. Pure in (record, config).
pub fn assign_block(record: Record, config: &SemanticConfig) -> BlockDescriptor {
    let w = config.window_ticks.max(1);
    let g = config.user_group_size.max(1);
    match config.semantic {
        SemanticKind::Event => BlockDescriptor::TimeWindow {
            time: window_of(record.timestamp, w),
        },
        SemanticKind::User => BlockDescriptor::UserGroup {
            users: group_of(record.user_id, g),
        },
        SemanticKind::UserTime => BlockDescriptor::UserTimeCell {
            users: group_of(record.user_id, g),
            time: window_of(record.timestamp, w),
        },
    }
}

/// Blocks pipelines may request at `now`, given the counter's current
/// lower bound on the number of users (ignored for Event semantics).
pub fn requestable_blocks(config: &SemanticConfig, now: u64, lower: u64) -> Vec<BlockDescriptor> {
    let w = config.window_ticks.max(1);
    let g = config.user_group_size.max(1);
    let windows = (0..now / w).map(|k| Interval::new(k * w, (k + 1) * w));
    let groups = || (0..lower / g).map(|k| Interval::new(k * g, (k + 1) * g));
    match config.semantic {
        SemanticKind::Event => windows.map(|time| BlockDescriptor::TimeWindow { time }).collect(),
        SemanticKind::User => groups().map(|users| BlockDescriptor::UserGroup { users }).collect(),
        SemanticKind::UserTime => groups()
            .flat_map(|users| {
                (0..now / w).map(move |k| BlockDescriptor::UserTimeCell {
                    users,
                    time: Interval::new(k * w, (k + 1) * w),
                })
            })
            .collect(),
    }
}

/// RDP curve of the binary mechanism over horizon T:
/// log2T/(α−1) · ln[(α/(2α−1))·e^{(α−1)ε/log2T} + ((α−1)/(2α−1))·e^{−αε/log2T}],
/// and ε itself at the infinity order.
pub fn binary_mechanism_rdp_curve(
    eps_count: f64,
    horizon: u64,
    grid: &AlphaGrid,
) -> Result<RdpCurve, SemanticsError> {
    CounterConfig::new(eps_count, horizon, 0.5).validate()?;
    let log_t = f64::from(horizon.trailing_zeros());
    let e = eps_count / log_t;
    let eps = grid
        .orders()
        .iter()
        .map(|&a| {
            if a.is_infinite() {
                return eps_count;
            }
            let w1 = a / (2.0 * a - 1.0);
            let w2 = (a - 1.0) / (2.0 * a - 1.0);
            // factor out the larger exponent
            let x1 = (a - 1.0) * e;
            let x2 = -a * e;
            let m = x1.max(x2);
            let s = w1 * (x1 - m).exp() + w2 * (x2 - m).exp();
            (log_t / (a - 1.0) * (m + s.ln())).max(0.0)
        })
        .collect();
    Ok(RdpCurve::new(grid.clone(), eps)?)
}

fn sample_laplace<R: Rng>(rng: &mut R, scale: f64) -> f64 {
    if scale == 0.0 {
        return 0.0;
    }
    // inverse CDF on u in (-1/2, 1/2)
    let u: f64 = rng.random::<f64>() - 0.5;
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// Binary-mechanism counter over a horizon of T intervals.
///
/// Level h holds nodes spanning 2^h intervals, for h < log2 T. A node gets
/// its Laplace noise once, when its last interval is recorded.
#[derive(Debug, Clone)]
pub struct BinaryCounter {
    config: CounterConfig,
    leaves: Vec<u64>,
    true_sums: Vec<Vec<u64>>,
    noisy: Vec<Vec<f64>>,
    total: u64,
    rng: ChaCha8Rng,
}

impl BinaryCounter {
    pub fn new(config: CounterConfig, seed: u64) -> Result<Self, SemanticsError> {
        config.validate()?;
        let levels = config.levels() as usize;
        Ok(BinaryCounter {
            config,
            leaves: Vec::new(),
            true_sums: vec![Vec::new(); levels],
            noisy: vec![Vec::new(); levels],
            total: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn config(&self) -> &CounterConfig {
        &self.config
    }

    /// Number of intervals recorded so far.
    pub fn intervals(&self) -> u64 {
        self.leaves.len() as u64
    }

    pub fn true_count(&self) -> u64 {
        self.total
    }

    /// True count over the first `t` intervals.
    pub fn true_prefix(&self, t: u64) -> u64 {
        self.leaves[..t as usize].iter().sum()
    }

    /// Records the number of new users in the next interval and noises every
    /// node this interval completes.
    pub fn counter_update(&mut self, new_users: u64) -> Result<(), SemanticsError> {
        if self.intervals() >= self.config.horizon {
            return Err(SemanticsError::HorizonExceeded {
                horizon: self.config.horizon,
            });
        }
        self.leaves.push(new_users);
        self.total += new_users;
        let done = self.intervals();
        let scale = self.config.noise_scale();
        for h in 0..self.true_sums.len() {
            if done % (1 << h) != 0 {
                break;
            }
            let sum = if h == 0 {
                new_users
            } else {
                let below = &self.true_sums[h - 1];
                below[below.len() - 2] + below[below.len() - 1]
            };
            self.true_sums[h].push(sum);
            let noise = sample_laplace(&mut self.rng, scale);
            self.noisy[h].push(sum as f64 + noise);
        }
        Ok(())
    }

    /// (level, index) of the nodes whose spans cover [0, t) with the fewest
    /// nodes the tree holds.
    pub fn cover(&self, t: u64) -> Vec<(u32, u64)> {
        let levels = self.config.levels();
        let mut out = Vec::new();
        let mut pos = 0u64;
        let mut rest = t;
        // t = T needs the two top-level halves
        while rest >= 1 << levels {
            let h = levels - 1;
            out.push((h, pos >> h));
            pos += 1 << h;
            rest -= 1 << h;
        }
        for h in (0..levels).rev() {
            if rest & (1 << h) != 0 {
                out.push((h, pos >> h));
                pos += 1 << h;
            }
        }
        out
    }

    /// Noisy count of users over the first `t` intervals.
    pub fn counter_release(&self, t: u64) -> Result<f64, SemanticsError> {
        if t > self.intervals() {
            return Err(SemanticsError::NotYetRecorded {
                t,
                done: self.intervals(),
            });
        }
        Ok(self
            .cover(t)
            .into_iter()
            .map(|(h, i)| self.noisy[h as usize][i as usize])
            .sum())
    }

    pub fn lower_bound(&self, t: u64) -> Result<u64, SemanticsError> {
        let v = (self.counter_release(t)? - self.config.bound_offset()).floor();
        Ok(if v > 0.0 { v as u64 } else { 0 })
    }

    pub fn upper_bound(&self, t: u64) -> Result<u64, SemanticsError> {
        let v = (self.counter_release(t)? + self.config.bound_offset()).ceil();
        Ok(if v > 0.0 { v as u64 } else { 0 })
    }

    /// Row for the counter trace after `t` intervals.
    pub fn trace_row(&self, t: u64) -> Result<CounterTraceRow, SemanticsError> {
        Ok(CounterTraceRow {
            tick: t,
            true_count: self.true_prefix(t),
            released: self.counter_release(t)?,
            lower: self.lower_bound(t)?,
            upper: self.upper_bound(t)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterTraceRow {
    pub tick: u64,
    pub true_count: u64,
    pub released: f64,
    pub lower: u64,
    pub upper: u64,
}

/// Owns the counter and lazily creates the blocks records land in.
#[derive(Debug, Clone)]
pub struct SemanticManager {
    config: SemanticConfig,
    counter: Option<BinaryCounter>,
    initial: Budget,
    known: BTreeMap<BlockDescriptor, BlockId>,
}

impl SemanticManager {
    pub fn new(
        config: SemanticConfig,
        mode: &AccountingMode,
        eps_g: f64,
        delta_g: f64,
        seed: u64,
    ) -> Result<Self, SemanticsError> {
        config.validate()?;
        let initial = config.initial_budget(mode, eps_g, delta_g)?;
        let counter = match (&config.counter, config.semantic.uses_counter()) {
            (Some(c), true) => Some(BinaryCounter::new(c.clone(), seed)?),
            _ => None,
        };
        Ok(SemanticManager {
            config,
            counter,
            initial,
            known: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &SemanticConfig {
        &self.config
    }

    pub fn counter(&self) -> Option<&BinaryCounter> {
        self.counter.as_ref()
    }

    pub fn initial_budget(&self) -> &Budget {
        &self.initial
    }

    /// Feeds one interval's new-user count to the counter (no-op for Event).
    pub fn on_interval(&mut self, new_users: u64) -> Result<(), SemanticsError> {
        match &mut self.counter {
            Some(c) => c.counter_update(new_users),
            None => Ok(()),
        }
    }

    /// Current high-probability lower bound on the user count.
    pub fn user_lower_bound(&self) -> u64 {
        self.counter
            .as_ref()
            .map_or(0, |c| c.lower_bound(c.intervals()).unwrap_or(0))
    }

    pub fn user_upper_bound(&self) -> u64 {
        self.counter
            .as_ref()
            .map_or(0, |c| c.upper_bound(c.intervals()).unwrap_or(0))
    }

    pub fn requestable(&self, now: u64) -> Vec<BlockDescriptor> {
        requestable_blocks(&self.config, now, self.user_lower_bound())
    }

    /// Block for `desc`, created with the full initial budget on first use.
    /// Returns the id and whether it was just created.
    pub fn ensure_block(
        &mut self,
        ledger: &mut Ledger,
        desc: BlockDescriptor,
        tick: u64,
    ) -> Result<(BlockId, bool), SemanticsError> {
        if let Some(&id) = self.known.get(&desc) {
            return Ok((id, false));
        }
        let id = ledger.create_block(desc, self.initial.clone(), tick)?;
        self.known.insert(desc, id);
        Ok((id, true))
    }

    pub fn ensure_record_block(
        &mut self,
        ledger: &mut Ledger,
        record: Record,
        tick: u64,
    ) -> Result<(BlockId, bool), SemanticsError> {
        let desc = assign_block(record, &self.config);
        self.ensure_block(ledger, desc, tick)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(kind: SemanticKind, w: u64, g: u64) -> SemanticConfig {
        SemanticConfig {
            semantic: kind,
            window_ticks: w,
            user_group_size: g,
            counter: Some(CounterConfig::new(0.1, 1 << 15, 1e-3)),
            tight_counter_curve: false,
        }
    }

    #[test]
    fn assignment_per_semantic() {
        let r = Record {
            user_id: 7,
            timestamp: 2,
        };
        assert_eq!(
            assign_block(r, &SemanticConfig::event(1)),
            BlockDescriptor::TimeWindow {
                time: Interval::new(2, 3)
            }
        );
        assert_eq!(
            assign_block(r, &cfg(SemanticKind::User, 1, 1)),
            BlockDescriptor::UserGroup {
                users: Interval::new(7, 8)
            }
        );
        assert_eq!(
            assign_block(r, &cfg(SemanticKind::UserTime, 1, 1)),
            BlockDescriptor::UserTimeCell {
                users: Interval::new(7, 8),
                time: Interval::new(2, 3)
            }
        );
        assert_eq!(
            assign_block(
                Record {
                    user_id: 9,
                    timestamp: 50
                },
                &cfg(SemanticKind::UserTime, 24, 4)
            ),
            BlockDescriptor::UserTimeCell {
                users: Interval::new(8, 12),
                time: Interval::new(48, 72)
            }
        );
    }

    #[test]
    fn user_block_reused_without_budget_change() {
        let c = cfg(SemanticKind::User, 1, 1);
        let mut l = Ledger::new(AccountingMode::Basic);
        let mut m = SemanticManager::new(c, &AccountingMode::Basic, 10.0, 1e-7, 0).unwrap();
        let (a, fresh) = m
            .ensure_record_block(&mut l, Record { user_id: 7, timestamp: 0 }, 0)
            .unwrap();
        assert!(fresh);
        let before = l.block(a).unwrap().registers.clone();
        let (b, fresh) = m
            .ensure_record_block(&mut l, Record { user_id: 7, timestamp: 5 }, 5)
            .unwrap();
        assert_eq!(a, b);
        assert!(!fresh);
        assert_eq!(l.block(a).unwrap().registers, before);
        assert!((before.total.values()[0] - 9.9).abs() < 1e-12);
    }

    #[test]
    fn requestable_examples() {
        assert_eq!(
            requestable_blocks(&SemanticConfig::event(1), 3, 0),
            (0..3)
                .map(|d| BlockDescriptor::TimeWindow {
                    time: Interval::new(d, d + 1)
                })
                .collect::<Vec<_>>()
        );
        assert_eq!(
            requestable_blocks(&cfg(SemanticKind::User, 1, 1), 10, 2),
            vec![
                BlockDescriptor::UserGroup { users: Interval::new(0, 1) },
                BlockDescriptor::UserGroup { users: Interval::new(1, 2) },
            ]
        );
        assert_eq!(
            requestable_blocks(&cfg(SemanticKind::UserTime, 1, 1), 2, 1),
            vec![
                BlockDescriptor::UserTimeCell {
                    users: Interval::new(0, 1),
                    time: Interval::new(0, 1)
                },
                BlockDescriptor::UserTimeCell {
                    users: Interval::new(0, 1),
                    time: Interval::new(1, 2)
                },
            ]
        );
        // a partly elapsed window is not requestable
        assert_eq!(requestable_blocks(&SemanticConfig::event(24), 47, 0).len(), 1);
    }

    #[test]
    fn counter_config_checks() {
        assert!(CounterConfig::new(0.1, 3, 0.01).validate().is_err());
        assert!(CounterConfig::new(0.1, 1, 0.01).validate().is_err());
        assert!(CounterConfig::new(0.0, 4, 0.01).validate().is_err());
        assert!(CounterConfig::new(0.1, 4, 1.0).validate().is_err());
        assert!(CounterConfig::new(0.1, 4, 0.01).validate().is_ok());
    }

    #[test]
    fn bound_constants() {
        let mut c = CounterConfig::new(0.1, 1 << 15, 1e-3);
        let k = c.bound_offset();
        let expect = 40.0 * 15f64.powf(1.5) * (32768.0f64 / 1e-3).ln();
        assert_eq!(k, expect);
        assert!((k - 40_209.0).abs() < 5.0, "{k}");
        c.log10_bound = true;
        let k10 = c.bound_offset();
        assert!((k10 - 17_463.0).abs() < 5.0, "{k10}");
    }

    fn noiseless(t: u64) -> BinaryCounter {
        let mut c = CounterConfig::new(1.0, t, 0.01);
        c.noiseless = true;
        BinaryCounter::new(c, 0).unwrap()
    }

    #[test]
    fn nodes_complete_on_dyadic_boundaries() {
        let mut c = noiseless(8);
        c.counter_update(5).unwrap();
        assert_eq!(c.noisy[0], vec![5.0]);
        assert!(c.noisy[1].is_empty());
        for x in [1, 2, 3] {
            c.counter_update(x).unwrap();
        }
        assert_eq!(c.true_sums[0].len(), 4);
        assert_eq!(c.true_sums[1], vec![6, 5]);
        assert_eq!(c.true_sums[2], vec![11]);
    }

    #[test]
    fn cover_shapes() {
        let mut c = noiseless(8);
        for _ in 0..8 {
            c.counter_update(1).unwrap();
        }
        assert_eq!(c.cover(3), vec![(1, 0), (0, 2)]);
        assert_eq!(c.cover(4), vec![(2, 0)]);
        assert_eq!(c.cover(7), vec![(2, 0), (1, 2), (0, 6)]);
        assert_eq!(c.cover(8), vec![(2, 0), (2, 1)]);
        assert!(c.cover(0).is_empty());
        for t in 1..8 {
            assert_eq!(c.cover(t).len() as u32, t.count_ones());
        }
    }

    #[test]
    fn noiseless_release_is_exact() {
        let mut c = noiseless(16);
        let stream = [3u64, 0, 1, 4, 1, 5, 9, 2, 6, 5, 3, 5, 8, 9, 7, 9];
        let mut cum = 0;
        for (i, &x) in stream.iter().enumerate() {
            c.counter_update(x).unwrap();
            cum += x;
            assert_eq!(c.counter_release(i as u64 + 1).unwrap(), cum as f64);
        }
        assert!(matches!(
            c.counter_update(1),
            Err(SemanticsError::HorizonExceeded { .. })
        ));
        assert!(matches!(
            noiseless(4).counter_release(1),
            Err(SemanticsError::NotYetRecorded { .. })
        ));
    }

    #[test]
    fn zero_true_count_clamps_lower_bound() {
        let mut c = BinaryCounter::new(CounterConfig::new(0.1, 1 << 10, 1e-3), 3).unwrap();
        for _ in 0..100 {
            c.counter_update(0).unwrap();
        }
        assert_eq!(c.lower_bound(100).unwrap(), 0);
        assert!(c.upper_bound(100).unwrap() > 0);
    }

    #[test]
    fn zero_stream_release_has_zero_mean() {
        let trials = 2000;
        let cfg = CounterConfig::new(1.0, 16, 1e-3);
        let mut sum = 0.0;
        let mut sq = 0.0;
        for s in 0..trials {
            let mut c = BinaryCounter::new(cfg.clone(), s).unwrap();
            for _ in 0..11 {
                c.counter_update(0).unwrap();
            }
            let v = c.counter_release(11).unwrap();
            sum += v;
            sq += v * v;
        }
        let n = trials as f64;
        let mean = sum / n;
        let sd = (sq / n - mean * mean).sqrt();
        // three nodes, each Laplace with scale 4: sd = sqrt(3·2·16)
        assert!((sd - 96f64.sqrt()).abs() < 0.1 * 96f64.sqrt(), "{sd}");
        assert!(mean.abs() < 3.0 * sd / n.sqrt(), "{mean}");
    }

    #[test]
    fn binary_curve_matches_composed_laplace() {
        let grid = AlphaGrid::extended();
        let curve = binary_mechanism_rdp_curve(0.1, 1 << 15, &grid).unwrap();
        let lap = rdp::laplace_curve(0.1 / 15.0, &grid).unwrap().scale(15.0);
        for (a, b) in curve.eps().iter().zip(lap.eps()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
        }
        let pure = rdp::pure_dp_curve(0.1, &grid).unwrap();
        for ((&alpha, a), p) in grid.orders().iter().zip(curve.eps()).zip(pure.eps()) {
            assert!(a <= p, "alpha {alpha}: {a} > {p}");
        }
        let tiny = binary_mechanism_rdp_curve(1e-9, 1 << 10, &grid).unwrap();
        assert!(tiny.eps().iter().all(|&e| e < 1e-8));
    }

    #[test]
    fn initial_budgets() {
        let grid = AlphaGrid::extended();
        let mode = AccountingMode::Renyi { grid: grid.clone() };
        let c = cfg(SemanticKind::User, 1, 1);
        let b = c.initial_budget(&mode, 10.0, 1e-7).unwrap();
        let expect = rdp::block_initial_curve(10.0, 1e-7, &grid, 0.1).unwrap();
        assert_eq!(b.values(), expect.eps());
        let ev = SemanticConfig::event(1).initial_budget(&mode, 10.0, 1e-7).unwrap();
        let expect = rdp::block_initial_curve(10.0, 1e-7, &grid, 0.0).unwrap();
        assert_eq!(ev.values(), expect.eps());
        let mut tight = c.clone();
        tight.tight_counter_curve = true;
        let bt = tight.initial_budget(&mode, 10.0, 1e-7).unwrap();
        for (x, y) in bt.values().iter().zip(b.values()) {
            assert!(x >= y);
        }
        let basic = c.initial_budget(&AccountingMode::Basic, 10.0, 1e-7).unwrap();
        assert!((basic.values()[0] - 9.9).abs() < 1e-12);
    }

    #[test]
    fn semantic_config_needs_counter() {
        let mut c = cfg(SemanticKind::User, 1, 1);
        c.counter = None;
        assert!(c.validate().is_err());
        c.semantic = SemanticKind::Event;
        assert!(c.validate().is_ok());
        c.window_ticks = 0;
        assert!(c.validate().is_err());
    }
}
