//! Epoch scheduling: every batch is a small precedence graph of stages, each
//! stage occupies one exclusive lane, and an event simulation plays the
//! epoch out to find its makespan.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::timing::{StageTiming, TimingError};

/// Largest batch count accepted by the exhaustive oracle.
pub const ORACLE_MAX_BATCHES: usize = 6;

/// Default number of chains, and the most the accelerator can verify at once.
pub const DEFAULT_LANE_BUDGET: usize = 16;

/// Share of the accelerator the measured authentication times were taken
/// with.
pub const DEFAULT_CRYPTO_LANE_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Proxy decrypts and verifies client data (inference only).
    ProxyOpen,
    /// Proxy encrypts and tags the batch for the accelerator.
    ProxySeal,
    Transfer,
    Keystream,
    Xor,
    Auth,
    Compute,
}

impl Stage {
    /// In per-batch precedence order.
    pub const ALL: [Stage; 7] = [
        Stage::ProxyOpen,
        Stage::ProxySeal,
        Stage::Transfer,
        Stage::Keystream,
        Stage::Xor,
        Stage::Auth,
        Stage::Compute,
    ];

    pub fn lane(self) -> Lane {
        match self {
            Stage::ProxyOpen | Stage::ProxySeal => Lane::Proxy,
            Stage::Transfer => Lane::Wire,
            Stage::Keystream | Stage::Xor | Stage::Compute => Lane::Main,
            Stage::Auth => Lane::Crypto,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::ProxyOpen => "proxy_open",
            Stage::ProxySeal => "proxy_seal",
            Stage::Transfer => "transfer",
            Stage::Keystream => "keystream",
            Stage::Xor => "xor_dec",
            Stage::Auth => "gpu_auth",
            Stage::Compute => "compute",
        }
    }

    fn rank(self) -> usize {
        self as usize
    }
}

/// Exclusive execution resources.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lane {
    Proxy,
    Wire,
    Main,
    Crypto,
}

impl Lane {
    pub const ALL: [Lane; 4] = [Lane::Proxy, Lane::Wire, Lane::Main, Lane::Crypto];

    fn index(self) -> usize {
        self as usize
    }
}

/// The individual optimizations a mode switches on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Optimizations {
    /// Client talks to the accelerator directly; no proxy crypto.
    pub direct: bool,
    /// Number of authentication chains (1 = a single tag).
    pub chains: usize,
    /// Keystream generation runs alongside the transfer instead of after it.
    pub parallel_aes: bool,
    /// Compute starts before authentication completes.
    pub eager: bool,
}

impl Optimizations {
    pub const NONE: Optimizations = Optimizations { direct: false, chains: 1, parallel_aes: false, eager: false };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Baseline,
    DirectComm,
    MultiChain {
        n: usize,
    },
    ParallelAES,
    EagerAuth,
    /// Every optimization, with as many chains as the lane budget allows.
    All,
    Stack(Optimizations),
}

impl Mode {
    pub fn optimizations(self, lane_budget: usize) -> Optimizations {
        let none = Optimizations::NONE;
        match self {
            Mode::Baseline => none,
            Mode::DirectComm => Optimizations { direct: true, ..none },
            Mode::MultiChain { n } => Optimizations { chains: n, ..none },
            Mode::ParallelAES => Optimizations { parallel_aes: true, ..none },
            Mode::EagerAuth => Optimizations { eager: true, ..none },
            Mode::All => Optimizations { direct: true, chains: lane_budget, parallel_aes: true, eager: true },
            Mode::Stack(o) => o,
        }
    }

    pub fn label(self) -> String {
        match self {
            Mode::Baseline => "baseline".into(),
            Mode::DirectComm => "dc".into(),
            Mode::MultiChain { n } => format!("multichain-{n}"),
            Mode::ParallelAES => "parallel-aes".into(),
            Mode::EagerAuth => "eager".into(),
            Mode::All => "all".into(),
            Mode::Stack(o) => {
                let mut parts = Vec::new();
                if o.direct {
                    parts.push("dc".to_string());
                }
                if o.chains > 1 {
                    parts.push(format!("multichain-{}", o.chains));
                }
                if o.parallel_aes {
                    parts.push("parallel-aes".into());
                }
                if o.eager {
                    parts.push("eager".into());
                }
                if parts.is_empty() {
                    "baseline".into()
                } else {
                    parts.join("+")
                }
            }
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for Mode {
    type Err = PipelineError;

    /// Accepts `baseline`, `dc`, `multichain` (16 chains), `multichain-N`,
    /// `parallel-aes`, `eager` and `all`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "dc" => Ok(Mode::DirectComm),
            "multichain" => Ok(Mode::MultiChain { n: DEFAULT_LANE_BUDGET }),
            "parallel-aes" => Ok(Mode::ParallelAES),
            "eager" => Ok(Mode::EagerAuth),
            "all" => Ok(Mode::All),
            other => other
                .strip_prefix("multichain-")
                .and_then(|n| n.parse().ok())
                .filter(|&n| n >= 1)
                .map(|n| Mode::MultiChain { n })
                .ok_or_else(|| PipelineError::UnknownMode(other.to_string())),
        }
    }
}

/// How consecutive batches may overlap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComputeOverlap {
    /// A batch starts once the previous batch's compute has finished; only
    /// an eagerly deferred authentication may spill into the next batch.
    #[default]
    Serial,
    /// Double buffering: the next batch may start once the previous one has
    /// been decrypted (and, unless eager, verified), so its transfer
    /// overlaps the previous compute.
    DoubleBuffered,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub n_batches: usize,
    pub mode: Mode,
    /// Share of the accelerator given to authentication. Authentication
    /// times scale inversely with it relative to the measured share.
    pub crypto_lane_fraction: f64,
    /// Most chains the accelerator verifies concurrently.
    pub lane_budget: usize,
    pub overlap: ComputeOverlap,
}

impl PipelineConfig {
    pub fn new(n_batches: usize, mode: Mode) -> Self {
        Self {
            n_batches,
            mode,
            crypto_lane_fraction: DEFAULT_CRYPTO_LANE_FRACTION,
            lane_budget: DEFAULT_LANE_BUDGET,
            overlap: ComputeOverlap::Serial,
        }
    }

    pub fn with_mode(self, mode: Mode) -> Self {
        Self { mode, ..self }
    }

    pub fn optimizations(&self) -> Optimizations {
        self.mode.optimizations(self.lane_budget)
    }

    fn validate(&self) -> Result<(), PipelineError> {
        if self.n_batches == 0 {
            return Err(PipelineError::NoBatches);
        }
        if !(self.crypto_lane_fraction > 0.0 && self.crypto_lane_fraction <= 1.0) {
            return Err(PipelineError::InvalidFraction(self.crypto_lane_fraction));
        }
        if self.lane_budget == 0 || self.optimizations().chains == 0 {
            return Err(PipelineError::NoChains);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PipelineError {
    #[error("an epoch needs at least one batch")]
    NoBatches,
    #[error("crypto lane fraction {0} must lie in (0, 1]")]
    InvalidFraction(f64),
    #[error("chain count and lane budget must be at least 1")]
    NoChains,
    #[error("unknown mode {0:?} (expected baseline, dc, multichain, parallel-aes, eager or all)")]
    UnknownMode(String),
    #[error("exhaustive search is limited to {max} batches, got {got}")]
    InstanceTooLarge { got: usize, max: usize },
    #[error(transparent)]
    Timing(#[from] TimingError),
}

/// Durations are scheduled in integer nanoseconds so both engines compare
/// exactly.
fn to_ns(us: f64) -> u64 {
    (us * 1000.0).round() as u64
}

fn to_us(ns: u64) -> f64 {
    ns as f64 / 1000.0
}

/// Stage durations in nanoseconds after the mode's optimizations.
fn stage_durations(config: &PipelineConfig, t: &StageTiming) -> [u64; 7] {
    let o = config.optimizations();
    let proxy = if o.direct { 0.0 } else { 1.0 };
    let parallel = o.chains.min(config.lane_budget) as f64;
    let auth = t.gpu_auth / parallel * (DEFAULT_CRYPTO_LANE_FRACTION / config.crypto_lane_fraction);
    [
        to_ns(t.proxy_open() * proxy),
        to_ns(t.proxy_seal() * proxy),
        to_ns(t.transfer),
        to_ns(t.keystream),
        to_ns(t.xor_dec),
        to_ns(auth),
        to_ns(t.compute),
    ]
}

#[derive(Debug, Clone)]
struct Task {
    lane: usize,
    dur: u64,
    preds: Vec<usize>,
    succs: Vec<usize>,
}

/// The epoch's precedence graph. Zero-length stages are contracted away,
/// their successors inheriting their predecessors. Tasks are stored in
/// (batch, stage) order, which is a topological order.
#[derive(Debug, Clone)]
struct TaskGraph {
    tasks: Vec<Task>,
}

impl TaskGraph {
    fn build(config: &PipelineConfig, timing: &StageTiming) -> Self {
        let o = config.optimizations();
        let durs = stage_durations(config, timing);
        let mut tasks: Vec<Task> = Vec::new();
        // Tasks whose completion stands for "batch entry may begin".
        let mut entry: Vec<usize> = Vec::new();
        for _batch in 0..config.n_batches {
            // For each stage, the set of tasks whose completion marks it done.
            let mut done: [Vec<usize>; 7] = Default::default();
            for stage in Stage::ALL {
                use Stage::*;
                let preds: Vec<usize> = match stage {
                    ProxyOpen => entry.clone(),
                    ProxySeal => done[ProxyOpen.rank()].clone(),
                    Transfer => done[ProxySeal.rank()].clone(),
                    Keystream if o.parallel_aes => done[ProxySeal.rank()].clone(),
                    Keystream => done[Transfer.rank()].clone(),
                    Xor => union(&done[Transfer.rank()], &done[Keystream.rank()]),
                    Auth if o.eager => done[Transfer.rank()].clone(),
                    Auth => done[Xor.rank()].clone(),
                    Compute if o.eager => done[Xor.rank()].clone(),
                    Compute => union(&done[Xor.rank()], &done[Auth.rank()]),
                };
                let dur = durs[stage.rank()];
                done[stage.rank()] = if dur == 0 {
                    preds
                } else {
                    let id = tasks.len();
                    for &p in &preds {
                        tasks[p].succs.push(id);
                    }
                    tasks.push(Task { lane: stage.lane().index(), dur, preds, succs: Vec::new() });
                    vec![id]
                };
            }
            entry = match config.overlap {
                ComputeOverlap::Serial => done[Stage::Compute.rank()].clone(),
                ComputeOverlap::DoubleBuffered if o.eager => done[Stage::Xor.rank()].clone(),
                ComputeOverlap::DoubleBuffered => union(&done[Stage::Xor.rank()], &done[Stage::Auth.rank()]),
            };
        }
        TaskGraph { tasks }
    }

    fn serialized_sum(&self) -> u64 {
        self.tasks.iter().map(|t| t.dur).sum()
    }
}

fn union(a: &[usize], b: &[usize]) -> Vec<usize> {
    let set: BTreeSet<usize> = a.iter().chain(b).copied().collect();
    set.into_iter().collect()
}

/// Discrete-event simulation. Whenever a lane is idle it starts the ready
/// task earliest in (batch, stage) order; completions at the same instant
/// are all applied before anything new is dispatched.
fn simulate(graph: &TaskGraph) -> u64 {
    let n = graph.tasks.len();
    let mut waiting: Vec<usize> = graph.tasks.iter().map(|t| t.preds.len()).collect();
    let mut ready: [BTreeSet<usize>; 4] = Default::default();
    let mut busy = [false; 4];
    let mut events: BinaryHeap<Reverse<(u64, usize)>> = BinaryHeap::new();
    for (i, t) in graph.tasks.iter().enumerate() {
        if t.preds.is_empty() {
            ready[t.lane].insert(i);
        }
    }
    let mut now = 0u64;
    let mut finished = 0usize;
    loop {
        for lane in 0..4 {
            if !busy[lane] {
                if let Some(i) = ready[lane].pop_first() {
                    busy[lane] = true;
                    events.push(Reverse((now + graph.tasks[i].dur, i)));
                }
            }
        }
        let Some(Reverse((t, _))) = events.peek().copied() else { break };
        now = t;
        while let Some(&Reverse((t, i))) = events.peek() {
            if t != now {
                break;
            }
            events.pop();
            finished += 1;
            let task = &graph.tasks[i];
            busy[task.lane] = false;
            for &s in &task.succs {
                waiting[s] -= 1;
                if waiting[s] == 0 {
                    ready[graph.tasks[s].lane].insert(s);
                }
            }
        }
    }
    assert_eq!(finished, n, "precedence graph has a cycle");
    now
}

/// Exhaustive search over every lane ordering consistent with the
/// precedence graph, each played out as a semi-active schedule (every task
/// starts as early as its predecessors and its lane allow). Branches that
/// cannot beat the best complete schedule are pruned, and states already
/// seen are skipped.
fn brute_force(graph: &TaskGraph) -> (u64, u64) {
    let n = graph.tasks.len();
    assert!(n <= 64, "oracle instance too large");
    // Longest path from each task to the end, including itself.
    let mut tail = vec![0u64; n];
    for i in (0..n).rev() {
        let t = &graph.tasks[i];
        tail[i] = t.dur + t.succs.iter().map(|&s| tail[s]).max().unwrap_or(0);
    }
    let mut lane_total = [0u64; 4];
    for t in &graph.tasks {
        lane_total[t.lane] += t.dur;
    }

    struct Search<'a> {
        graph: &'a TaskGraph,
        tail: Vec<u64>,
        best: u64,
        seen: HashSet<(u64, [u64; 4], Vec<u64>)>,
        explored: u64,
    }

    impl Search<'_> {
        fn go(&mut self, mask: u64, lane_free: [u64; 4], lane_left: [u64; 4], finish: &mut Vec<u64>, span: u64) {
            self.explored += 1;
            let n = self.graph.tasks.len();
            if mask.count_ones() as usize == n {
                self.best = self.best.min(span);
                return;
            }
            let mut bound = span;
            for l in 0..4 {
                if lane_left[l] > 0 {
                    bound = bound.max(lane_free[l] + lane_left[l]);
                }
            }
            let ready: Vec<(usize, u64)> = (0..n)
                .filter(|&i| mask & (1 << i) == 0)
                .filter(|&i| self.graph.tasks[i].preds.iter().all(|&p| mask & (1 << p) != 0))
                .map(|i| {
                    let t = &self.graph.tasks[i];
                    let start = t.preds.iter().map(|&p| finish[p]).max().unwrap_or(0).max(lane_free[t.lane]);
                    (i, start)
                })
                .collect();
            for &(i, start) in &ready {
                bound = bound.max(start + self.tail[i]);
            }
            if bound >= self.best {
                return;
            }
            // The future depends only on lane availability and on finish
            // times that unscheduled tasks still wait for.
            let frontier: Vec<u64> = (0..n)
                .filter(|&i| mask & (1 << i) != 0)
                .filter(|&i| self.graph.tasks[i].succs.iter().any(|&s| mask & (1 << s) == 0))
                .map(|i| finish[i])
                .collect();
            if !self.seen.insert((mask, lane_free, frontier)) {
                return;
            }
            for (i, start) in ready {
                let t = &self.graph.tasks[i];
                let end = start + t.dur;
                let mut lf = lane_free;
                lf[t.lane] = end;
                let mut ll = lane_left;
                ll[t.lane] -= t.dur;
                finish[i] = end;
                self.go(mask | (1 << i), lf, ll, finish, span.max(end));
            }
        }
    }

    let mut search = Search { graph, tail, best: graph.serialized_sum() + 1, seen: HashSet::new(), explored: 0 };
    let mut finish = vec![0u64; n];
    search.go(0, [0; 4], lane_total, &mut finish, 0);
    (search.best.min(graph.serialized_sum()), search.explored)
}

/// Result of one simulated epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleReport {
    pub mode: String,
    pub n_batches: usize,
    pub overlap: ComputeOverlap,
    pub auth_parallelism: usize,
    pub epoch_makespan_us: f64,
    pub baseline_makespan_us: f64,
    /// Makespan per batch with the batch's own compute taken out.
    pub per_batch_transfer_us: f64,
    pub baseline_per_batch_transfer_us: f64,
    /// Total time each stage occupies its lane over the epoch.
    pub busy_us: Vec<(Stage, f64)>,
    pub reduction_pct: f64,
}

impl ScheduleReport {
    pub fn busy(&self, stage: Stage) -> f64 {
        self.busy_us.iter().find(|(s, _)| *s == stage).map_or(0.0, |(_, v)| *v)
    }

    /// Share of the epoch spent outside compute.
    pub fn transfer_share(&self) -> f64 {
        self.per_batch_transfer_us * self.n_batches as f64 / self.epoch_makespan_us
    }
}

/// Epoch makespan in microseconds.
pub fn makespan(config: &PipelineConfig, timing: &StageTiming) -> Result<f64, PipelineError> {
    config.validate()?;
    timing.validate()?;
    Ok(to_us(simulate(&TaskGraph::build(config, timing))))
}

pub fn schedule(config: &PipelineConfig, timing: &StageTiming) -> Result<ScheduleReport, PipelineError> {
    let span = makespan(config, timing)?;
    let baseline = makespan(&config.with_mode(Mode::Baseline), timing)?;
    let n = config.n_batches as f64;
    let durs = stage_durations(config, timing);
    let busy_us = Stage::ALL.iter().map(|&s| (s, to_us(durs[s.rank()]) * n)).collect();
    let compute = to_us(durs[Stage::Compute.rank()]);
    Ok(ScheduleReport {
        mode: config.mode.label(),
        n_batches: config.n_batches,
        overlap: config.overlap,
        auth_parallelism: config.optimizations().chains.min(config.lane_budget),
        epoch_makespan_us: span,
        baseline_makespan_us: baseline,
        per_batch_transfer_us: span / n - compute,
        baseline_per_batch_transfer_us: baseline / n - compute,
        busy_us,
        reduction_pct: 100.0 * (1.0 - span / baseline),
    })
}

/// Steady-state time per batch for the combined optimizations, excluding
/// compute: the slowest of transfer, keystream and per-chain authentication,
/// followed by the XOR pass.
pub fn steady_state_transfer(config: &PipelineConfig, timing: &StageTiming) -> f64 {
    let durs = stage_durations(config, timing).map(to_us);
    durs[Stage::Transfer.rank()].max(durs[Stage::Keystream.rank()]).max(durs[Stage::Auth.rank()])
        + durs[Stage::Xor.rank()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleVerdict {
    pub simulated_us: f64,
    pub optimal_us: f64,
    pub tasks: usize,
    pub states_explored: u64,
    pub equal: bool,
}

/// Cross-checks the event simulation against exhaustive search.
pub fn schedule_vs_bruteforce(config: &PipelineConfig, timing: &StageTiming) -> Result<OracleVerdict, PipelineError> {
    config.validate()?;
    timing.validate()?;
    if config.n_batches > ORACLE_MAX_BATCHES {
        return Err(PipelineError::InstanceTooLarge { got: config.n_batches, max: ORACLE_MAX_BATCHES });
    }
    let graph = TaskGraph::build(config, timing);
    let sim = simulate(&graph);
    let (opt, explored) = brute_force(&graph);
    Ok(OracleVerdict {
        simulated_us: to_us(sim),
        optimal_us: to_us(opt),
        tasks: graph.tasks.len(),
        states_explored: explored,
        equal: sim == opt,
    })
}
