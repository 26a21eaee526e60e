//! Deterministic discrete-event cluster simulator hosting the static,
//! resource-centric and executor-centric policies.

mod config;
mod policy;
mod queue;
mod trace;

use std::collections::{BTreeMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::executor::{
    CoreId, ElasticExecutor, ExecutorConfig, ExecutorError, MigrationStep, NodeId,
    ProtocolEvent, QueueItem, Route, StateUpdate, TaskId,
};
use crate::metrics::{MetricEvent, Reservoir, WindowAccumulator, RESERVOIR_SIZE};
use crate::model::{
    hash_key_to_executor, hash_key_to_shard, validate_topology, ModelError, ServiceMode, Topology, Tuple,
};
use crate::scheduler::{MetricsSnapshot, SchedulerError};
use crate::workload::{exponential, KeyStream, RateTrace};

pub use config::{ClusterConfig, CostModel, PolicyKind, SimConfig};
pub use policy::RcPhase;
pub use queue::{Event, EventKind, EventQueue, RcStep};
pub use trace::{Decision, RunTotals, Trace, WindowRow};

use policy::{PendingRemoval, RcRound};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("event queue corruption: {0}")]
    EventQueueCorruption(String),
    #[error("operation requires the {expected} policy, run uses {actual}")]
    WrongPolicy { expected: PolicyKind, actual: PolicyKind },
    #[error("infeasible assignment: {0}")]
    InfeasibleAssignment(String),
    #[error(transparent)]
    Executor(#[from] ExecutorError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error("repartition of operator {0} already in progress")]
    RepartitionBusy(usize),
}

// Independent random streams.
const STREAM_ARRIVALS: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_SERVICE: u64 = 3;
const STREAM_SELECT: u64 = 4;
const STREAM_RESERVOIR: u64 = 5;

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// How an operator picks the executor of a key.
#[derive(Debug, Clone)]
enum OpRouting {
    /// Static operator-level partitioning over `y` executors.
    Hash(u32),
    /// Operator-level shards mapped to executor slots; repartitionable.
    Shards(Vec<u32>),
}

#[derive(Debug, Clone)]
struct OpRt {
    source: bool,
    stateless: bool,
    cost: f64,
    selectivity: f64,
    out_bytes: u64,
    execs: Vec<u32>,
    routing: OpRouting,
    downstream: Vec<u32>,
    upstream: Vec<u32>,
    in_transit: u64,
    sent: u64,
    processed: u64,
    rc: Option<RcRound>,
    held: VecDeque<(Tuple, u32)>,
    /// Deliveries so far; stamps per-operator arrival order.
    arrived: u64,
    key_counts: BTreeMap<u64, u64>,
}

#[derive(Debug, Clone)]
struct ExecRt {
    op: u32,
    node: NodeId,
    /// `None` for source executors, which use no cores.
    ex: Option<ElasticExecutor>,
}

/// Tuples generated, processed and still inside the engine for one operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conservation {
    pub sent: u64,
    pub processed: u64,
    pub in_system: u64,
}

pub struct Simulation {
    cfg: SimConfig,
    topo: Topology,
    now: f64,
    queue: EventQueue,
    ops: Vec<OpRt>,
    execs: Vec<ExecRt>,
    /// Sim executors the scheduler reasons about, in snapshot order.
    sched: Vec<u32>,
    sched_pos: Vec<Option<usize>>,
    cores: Vec<Vec<Option<u32>>>,
    link_free: Vec<f64>,
    stream: KeyStream,
    rate_trace: Option<RateTrace>,
    rng_arrivals: ChaCha8Rng,
    rng_shuffle: ChaCha8Rng,
    rng_service: ChaCha8Rng,
    rng_select: ChaCha8Rng,
    acc: WindowAccumulator,
    run_latency: Reservoir,
    live: u64,
    blocked: bool,
    source_stopped: bool,
    next_seq: u64,
    pending_grants: VecDeque<(u32, u32)>,
    pending_removals: Vec<PendingRemoval>,
    last_snapshot: Option<MetricsSnapshot>,
    rc_migrated: u64,
    trace: Trace,
    started: bool,
}

impl Simulation {
    pub fn new(cfg: SimConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let topo = validate_topology(&cfg.topology)?;
        let seed = cfg.seed();
        let rate_trace = match &cfg.workload.rate_trace {
            Some(path) => Some(RateTrace::from_csv(std::path::Path::new(path)).map_err(|e| SimError::Config(e.to_string()))?),
            None => None,
        };
        let nodes = cfg.cluster.nodes as usize;
        let mut sim = Self {
            stream: KeyStream::new(&cfg.workload),
            rate_trace,
            rng_arrivals: rng(seed, STREAM_ARRIVALS),
            rng_shuffle: rng(seed, STREAM_SHUFFLE),
            rng_service: rng(seed, STREAM_SERVICE),
            rng_select: rng(seed, STREAM_SELECT),
            acc: WindowAccumulator::new(cfg.window, cfg.ewma_alpha, Vec::new(), seed ^ STREAM_RESERVOIR),
            run_latency: Reservoir::new(RESERVOIR_SIZE, seed.wrapping_add(STREAM_RESERVOIR)),
            trace: Trace::new(cfg.policy),
            cores: vec![vec![None; cfg.cluster.cores_per_node as usize]; nodes],
            link_free: vec![0.0; nodes],
            topo,
            now: 0.0,
            queue: EventQueue::default(),
            ops: Vec::new(),
            execs: Vec::new(),
            sched: Vec::new(),
            sched_pos: Vec::new(),
            live: 0,
            blocked: false,
            source_stopped: false,
            next_seq: 0,
            pending_grants: VecDeque::new(),
            pending_removals: Vec::new(),
            last_snapshot: None,
            rc_migrated: 0,
            started: false,
            cfg,
        };
        sim.build_plan()?;
        Ok(sim)
    }

    // ---- physical plan ----

    /// Expected input rate of every operator at λ₀.
    fn expected_rates(&self) -> Vec<f64> {
        let mut rate = vec![0.0; self.topo.operators.len()];
        for &o in &self.topo.order {
            let op = &self.topo.operators[o.0];
            if op.is_source() {
                rate[o.0] = self.cfg.source_rate();
            }
            let out = if op.is_source() {
                rate[o.0]
            } else {
                rate[o.0] * op.spec.output_selectivity
            };
            for d in &op.downstream {
                rate[d.0] += out;
            }
        }
        rate
    }

    /// Cores per non-source operator, proportional to expected CPU demand
    /// with `min[o]` as a floor, by largest remainder.
    fn core_shares(&self, min: &[u32]) -> Result<Vec<u32>, SimError> {
        let total = self.cfg.cluster.nodes * self.cfg.cluster.cores_per_node;
        let rates = self.expected_rates();
        let ops = &self.topo.operators;
        let mut demand: Vec<f64> = ops
            .iter()
            .map(|o| if o.is_source() { 0.0 } else { rates[o.idx.0] * o.spec.cpu_cost_per_tuple })
            .collect();
        if demand.iter().all(|d| *d <= 0.0) {
            demand = ops
                .iter()
                .map(|o| if o.is_source() { 0.0 } else { f64::from(o.spec.executor_count) })
                .collect();
        }
        let floor: u32 = min.iter().sum();
        if floor > total {
            return Err(SimError::Config(format!(
                "cluster has {total} cores but the topology needs at least {floor}"
            )));
        }
        let sum: f64 = demand.iter().sum();
        let quota: Vec<f64> = demand.iter().map(|d| f64::from(total) * d / sum).collect();
        let mut share: Vec<u32> = quota
            .iter()
            .zip(min)
            .map(|(q, &m)| if m == 0 { 0 } else { (q.floor() as u32).max(m) })
            .collect();
        // Trim overshoot caused by floors, largest shares first.
        while share.iter().sum::<u32>() > total {
            let j = (0..share.len())
                .filter(|&j| share[j] > min[j])
                .max_by(|&a, &b| share[a].cmp(&share[b]).then(b.cmp(&a)))
                .expect("floor fits");
            share[j] -= 1;
        }
        let mut order: Vec<usize> = (0..share.len()).filter(|&j| min[j] > 0).collect();
        order.sort_by(|&a, &b| {
            (quota[b] - f64::from(share[b]))
                .total_cmp(&(quota[a] - f64::from(share[a])))
                .then(a.cmp(&b))
        });
        let mut left = total - share.iter().sum::<u32>();
        for &j in order.iter().cycle() {
            if left == 0 || order.is_empty() {
                break;
            }
            share[j] += 1;
            left -= 1;
        }
        Ok(share)
    }

    fn take_core(&mut self, node: usize, exec: u32) -> Option<CoreId> {
        let slot = self.cores[node].iter().position(Option::is_none)?;
        self.cores[node][slot] = Some(exec);
        Some(CoreId {
            node: NodeId(node as u32),
            slot: slot as u32,
        })
    }

    fn build_plan(&mut self) -> Result<(), SimError> {
        let nodes = self.cfg.cluster.nodes as usize;
        let policy = self.cfg.policy;
        let n_ops = self.topo.operators.len();
        let min: Vec<u32> = self
            .topo
            .operators
            .iter()
            .map(|o| match (o.is_source(), policy) {
                (true, _) => 0,
                (false, PolicyKind::ExecutorCentric) => o.spec.executor_count,
                (false, _) => 1,
            })
            .collect();
        let shares = self.core_shares(&min)?;

        let mut next_src_node = 0usize;
        let mut next_node = 0usize;
        for o in 0..n_ops {
            let op = self.topo.operators[o].clone();
            let spec = &op.spec;
            let mut rt = OpRt {
                source: op.is_source(),
                stateless: spec.stateless,
                cost: spec.cpu_cost_per_tuple,
                selectivity: spec.output_selectivity,
                out_bytes: if op.is_source() {
                    self.cfg.workload.payload_bytes
                } else {
                    spec.output_tuple_bytes
                },
                execs: Vec::new(),
                routing: OpRouting::Hash(spec.executor_count),
                downstream: op.downstream.iter().map(|d| d.0 as u32).collect(),
                upstream: op.upstream.iter().map(|u| u.0 as u32).collect(),
                in_transit: 0,
                sent: 0,
                processed: 0,
                rc: None,
                held: VecDeque::new(),
                arrived: 0,
                key_counts: BTreeMap::new(),
            };
            if op.is_source() {
                for _ in 0..spec.executor_count {
                    let id = self.execs.len() as u32;
                    self.execs.push(ExecRt {
                        op: o as u32,
                        node: NodeId((next_src_node % nodes) as u32),
                        ex: None,
                    });
                    next_src_node += 1;
                    rt.execs.push(id);
                }
                self.ops.push(rt);
                continue;
            }
            let mut ex_cfg = ExecutorConfig {
                shards: spec.shards_per_executor,
                shard_state_bytes: self.cfg.shard_state_bytes,
                stateless: spec.stateless,
                ewma_alpha: self.cfg.ewma_alpha,
            };
            match policy {
                PolicyKind::ExecutorCentric => {
                    let y = spec.executor_count;
                    for e in 0..y {
                        let k = shares[o] / y + u32::from(e < shares[o] % y);
                        let id = self.execs.len() as u32;
                        let home = next_node % nodes;
                        next_node += 1;
                        let mut got = Vec::new();
                        for step in 0..nodes {
                            while got.len() < k as usize {
                                match self.take_core((home + step) % nodes, id) {
                                    Some(c) => got.push(c),
                                    None => break,
                                }
                            }
                        }
                        let ex = ElasticExecutor::new(id as usize, NodeId(home as u32), ex_cfg.clone(), &got)?;
                        self.execs.push(ExecRt {
                            op: o as u32,
                            node: NodeId(home as u32),
                            ex: Some(ex),
                        });
                        rt.execs.push(id);
                    }
                }
                PolicyKind::Static | PolicyKind::ResourceCentric => {
                    let n = shares[o];
                    let rc = policy == PolicyKind::ResourceCentric;
                    let total_shards = spec.executor_count * spec.shards_per_executor;
                    if rc {
                        ex_cfg.shards = total_shards;
                        rt.routing = OpRouting::Shards((0..total_shards).map(|s| s % n).collect());
                    } else {
                        rt.routing = OpRouting::Hash(n);
                    }
                    for e in 0..n {
                        let id = self.execs.len() as u32;
                        let mut core = None;
                        for step in 0..nodes {
                            let node = (next_node + step) % nodes;
                            if let Some(c) = self.take_core(node, id) {
                                core = Some(c);
                                next_node = node + 1;
                                break;
                            }
                        }
                        let core = core.expect("shares fit the cluster");
                        let mut ex = ElasticExecutor::new(id as usize, core.node, ex_cfg.clone(), &[core])?;
                        if rc {
                            let owned: Vec<u32> = (0..total_shards).filter(|s| s % n == e).collect();
                            ex.retain_shards(&owned);
                        }
                        self.execs.push(ExecRt {
                            op: o as u32,
                            node: core.node,
                            ex: Some(ex),
                        });
                        rt.execs.push(id);
                    }
                }
            }
            self.ops.push(rt);
        }

        for e in &mut self.execs {
            if let Some(ex) = &mut e.ex {
                ex.set_event_logging(self.cfg.record_protocol);
            }
        }
        self.sched = (0..self.execs.len() as u32)
            .filter(|&e| self.execs[e as usize].ex.is_some())
            .collect();
        self.sched_pos = vec![None; self.execs.len()];
        for (j, &e) in self.sched.iter().enumerate() {
            self.sched_pos[e as usize] = Some(j);
        }
        let cold: Vec<f64> = self
            .execs
            .iter()
            .map(|e| 1.0 / self.ops[e.op as usize].cost)
            .collect();
        self.acc = WindowAccumulator::new(
            self.cfg.window,
            self.cfg.ewma_alpha,
            cold,
            self.cfg.seed() ^ STREAM_RESERVOIR,
        );
        Ok(())
    }

    // ---- accessors ----

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn policy(&self) -> PolicyKind {
        self.cfg.policy
    }

    /// Sim executor ids of operator `op`.
    pub fn executors_of(&self, op: usize) -> &[u32] {
        &self.ops[op].execs
    }

    pub fn executor(&self, exec: u32) -> Option<&ElasticExecutor> {
        self.execs[exec as usize].ex.as_ref()
    }

    pub fn executor_mut(&mut self, exec: u32) -> Option<&mut ElasticExecutor> {
        self.execs[exec as usize].ex.as_mut()
    }

    pub fn executor_count(&self) -> usize {
        self.execs.len()
    }

    pub fn operator_of(&self, exec: u32) -> usize {
        self.execs[exec as usize].op as usize
    }

    /// Number of executors of all operators upstream of `op`.
    pub fn upstream_executors(&self, op: usize) -> u32 {
        self.ops[op]
            .upstream
            .iter()
            .map(|&u| self.ops[u as usize].execs.len() as u32)
            .sum()
    }

    pub fn last_snapshot(&self) -> Option<&MetricsSnapshot> {
        self.last_snapshot.as_ref()
    }

    pub fn live_tuples(&self) -> u64 {
        self.live
    }

    pub fn conservation(&self, op: usize) -> Conservation {
        let o = &self.ops[op];
        let queued: u64 = o
            .execs
            .iter()
            .filter_map(|&e| self.execs[e as usize].ex.as_ref())
            .map(|ex| (ex.queued_tuples() + ex.busy_tasks()) as u64)
            .sum();
        Conservation {
            sent: o.sent,
            processed: o.processed,
            in_system: queued + o.in_transit + o.held.len() as u64,
        }
    }

    /// Tuples delivered to `op` per key (requires `track_keys`).
    pub fn delivered_per_key(&self, op: usize) -> &BTreeMap<u64, u64> {
        &self.ops[op].key_counts
    }

    /// Per-key counters summed over every state store of `op`.
    pub fn state_counts(&self, op: usize) -> BTreeMap<u64, u64> {
        let mut out = BTreeMap::new();
        for &e in &self.ops[op].execs {
            if let Some(ex) = &self.execs[e as usize].ex {
                for store in ex.stores() {
                    for (k, v) in store.key_states() {
                        *out.entry(k).or_insert(0) += v.count;
                    }
                }
            }
        }
        out
    }

    pub fn order_violations(&self) -> u64 {
        self.execs
            .iter()
            .filter_map(|e| e.ex.as_ref())
            .flat_map(|ex| ex.stores())
            .map(|s| s.order_violations())
            .sum()
    }

    /// Shards whose state is held by other than exactly one process.
    pub fn ownership_errors(&self, op: usize) -> usize {
        let mut owners: BTreeMap<u32, usize> = BTreeMap::new();
        let mut errors = 0;
        for &e in &self.ops[op].execs {
            let Some(ex) = &self.execs[e as usize].ex else { continue };
            if ex.is_stateless() {
                continue;
            }
            match self.ops[op].routing {
                OpRouting::Shards(_) => {
                    for store in ex.stores() {
                        for s in store.owned() {
                            *owners.entry(s).or_insert(0) += 1;
                        }
                    }
                }
                OpRouting::Hash(_) => {
                    for s in 0..ex.routing().shards() {
                        if ex.is_in_flight(s) {
                            continue;
                        }
                        if ex.owners_of(s).len() != 1 {
                            errors += 1;
                        }
                    }
                }
            }
        }
        errors + owners.values().filter(|&&c| c != 1).count()
    }

    // ---- event loop ----

    fn push(&mut self, at: f64, kind: EventKind) {
        self.queue.push(at, kind);
    }

    fn source_rate_now(&self) -> f64 {
        match &self.rate_trace {
            Some(t) => t.rate_at(self.now),
            None => self.cfg.source_rate(),
        }
    }

    fn has_workload(&self) -> bool {
        self.cfg.max_tuples != Some(0)
            && (self.rate_trace.is_some() || self.cfg.source_rate() > 0.0)
            && self.ops.iter().any(|o| o.source)
    }

    fn start(&mut self) {
        self.started = true;
        if !self.has_workload() {
            return;
        }
        let w = self.cfg.window;
        self.push(w, EventKind::MetricsWindow);
        if self.cfg.scheduling && self.cfg.policy != PolicyKind::Static {
            self.push(self.cfg.scheduler.period, EventKind::SchedulerTick);
        }
        if let Some(iv) = self.cfg.workload.shuffle_interval() {
            self.push(iv, EventKind::ShuffleTick);
        }
        self.schedule_arrival(0.0);
    }

    fn schedule_arrival(&mut self, base: f64) {
        let rate = self.source_rate_now();
        if rate > 0.0 {
            let gap = exponential(&mut self.rng_arrivals, rate);
            self.push(base + gap, EventKind::Arrival);
        } else {
            // Idle source: poll the rate trace again shortly.
            self.push(base + 0.1, EventKind::Arrival);
        }
    }

    /// Processes every event with time ≤ `t_end` and returns the trace so far.
    pub fn run_until(&mut self, t_end: f64) -> Result<&Trace, SimError> {
        if !self.started {
            self.start();
        }
        while let Some(t) = self.queue.peek_time() {
            if t > t_end {
                break;
            }
            let ev = self.queue.pop().expect("peeked");
            if !(ev.time >= self.now) {
                return Err(SimError::EventQueueCorruption(format!(
                    "event at {} popped after {}",
                    ev.time, self.now
                )));
            }
            self.now = ev.time;
            self.handle(ev.kind)?;
        }
        self.now = self.now.max(t_end.min(self.cfg.duration.max(self.now)));
        self.collect_protocol();
        Ok(&self.trace)
    }

    /// Runs to the configured duration and returns the trace.
    pub fn run(mut self) -> Result<Trace, SimError> {
        let end = self.cfg.duration;
        self.run_until(end)?;
        self.finalize_totals();
        Ok(self.trace)
    }

    /// Stops the source, then runs until no tuple, move or repartition is
    /// left in flight (or `deadline` passes). Returns whether it drained.
    pub fn drain(&mut self, deadline: f64) -> Result<bool, SimError> {
        self.source_stopped = true;
        while !self.quiescent() {
            let Some(t) = self.queue.peek_time() else { break };
            if t > deadline {
                break;
            }
            let ev = self.queue.pop().expect("peeked");
            self.now = ev.time;
            self.handle(ev.kind)?;
        }
        self.collect_protocol();
        self.finalize_totals();
        Ok(self.quiescent())
    }

    fn quiescent(&self) -> bool {
        self.live == 0
            && self.ops.iter().all(|o| o.rc.is_none())
            && self.pending_grants.is_empty()
            && self.pending_removals.is_empty()
            && self
                .execs
                .iter()
                .filter_map(|e| e.ex.as_ref())
                .all(|ex| ex.in_flight() == 0 && ex.tasks().all(|t| !ex.is_retiring(t.id)))
    }

    pub fn stop_source(&mut self) {
        self.source_stopped = true;
    }

    fn collect_protocol(&mut self) {
        if !self.cfg.record_protocol {
            return;
        }
        let mut fresh: Vec<ProtocolEvent> = Vec::new();
        for e in &mut self.execs {
            if let Some(ex) = &mut e.ex {
                fresh.extend(ex.take_events());
            }
        }
        fresh.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.executor.cmp(&b.executor)));
        self.trace.protocol.extend(fresh);
    }

    pub fn finalize_totals(&mut self) {
        let mut t = std::mem::take(&mut self.trace.totals);
        t.p99_latency = self.run_latency.quantile(0.99).unwrap_or(0.0);
        t.migrated_bytes = 0;
        t.intra_process_migrated_bytes = 0;
        t.local_shard_moves = 0;
        t.remote_shard_moves = 0;
        for ex in self.execs.iter().filter_map(|e| e.ex.as_ref()) {
            let c = ex.counters();
            t.migrated_bytes += c.migrated_bytes;
            t.intra_process_migrated_bytes += c.intra_process_bytes;
            t.local_shard_moves += c.local_moves;
            t.remote_shard_moves += c.remote_moves;
        }
        t.migrated_bytes += self.rc_migrated;
        t.order_violations = self.order_violations();
        self.trace.totals = t;
    }

    fn handle(&mut self, kind: EventKind) -> Result<(), SimError> {
        match kind {
            EventKind::Arrival => self.on_arrival(),
            EventKind::NetTransferDone { exec, tuple } => self.on_deliver(exec, tuple),
            EventKind::ServiceDone { exec, task, tuple, cpu } => self.on_service_done(exec, task, tuple, cpu),
            EventKind::MigrationDone { exec, shard } => self.on_migration_done(exec, shard),
            EventKind::ControlTuple { op, step } => self.on_rc_step(op as usize, step),
            EventKind::SchedulerTick => {
                self.policy_tick()?;
                let p = self.cfg.scheduler.period;
                if self.now + p <= self.cfg.duration + 1e-9 {
                    self.push(self.now + p, EventKind::SchedulerTick);
                }
                Ok(())
            }
            EventKind::ShuffleTick => {
                self.stream.shuffle(&mut self.rng_shuffle);
                if let Some(iv) = self.cfg.workload.shuffle_interval() {
                    self.push(self.now + iv, EventKind::ShuffleTick);
                }
                Ok(())
            }
            EventKind::MetricsWindow => self.on_window(),
        }
    }

    // ---- data path ----

    fn on_arrival(&mut self) -> Result<(), SimError> {
        if self.source_stopped || self.cfg.max_tuples.is_some_and(|m| self.next_seq >= m) {
            return Ok(());
        }
        let rate = self.source_rate_now();
        if rate <= 0.0 {
            self.schedule_arrival(self.now);
            return Ok(());
        }
        if let Some(cap) = self.cfg.max_pending {
            if self.live >= cap {
                self.blocked = true;
                return Ok(());
            }
        }
        let (gap, key) = self.stream.next_arrival(&mut self.rng_arrivals, rate);
        let seq = self.next_seq;
        self.next_seq += 1;
        self.trace.totals.tuples_generated += 1;
        self.acc.record(MetricEvent::SourceEmit);
        let tuple = Tuple::new(key, seq, self.cfg.workload.payload_bytes, self.now);
        for o in 0..self.ops.len() {
            if !self.ops[o].source {
                continue;
            }
            // Spouts take turns; key routing starts at the next operator.
            let y = self.ops[o].execs.len() as u64;
            let spout = self.ops[o].execs[(seq % y) as usize];
            let downstream = self.ops[o].downstream.clone();
            let bytes = self.ops[o].out_bytes;
            for d in downstream {
                let t = Tuple {
                    payload_bytes: bytes,
                    hops: 1,
                    ..tuple
                };
                self.acc.record(MetricEvent::Emitted { executor: spout as usize, bytes });
                self.send(spout, d, t);
            }
        }
        self.push(self.now + gap, EventKind::Arrival);
        Ok(())
    }

    fn route_op(&self, op: usize, key: u64) -> u32 {
        let o = &self.ops[op];
        match &o.routing {
            OpRouting::Hash(y) => o.execs[hash_key_to_executor(key, *y) as usize],
            OpRouting::Shards(table) => {
                let s = hash_key_to_shard(key, table.len() as u32);
                o.execs[table[s as usize] as usize]
            }
        }
    }

    /// Emits `tuple` from executor `from` towards operator `to_op`.
    fn send(&mut self, from: u32, to_op: u32, tuple: Tuple) {
        self.live += 1;
        let op = &mut self.ops[to_op as usize];
        op.sent += 1;
        if op.rc.as_ref().is_some_and(|r| r.holds_input()) {
            op.held.push_back((tuple, from));
            return;
        }
        self.transfer(from, to_op, tuple);
    }

    /// Puts a tuple on the wire to its destination executor.
    fn transfer(&mut self, from: u32, to_op: u32, tuple: Tuple) {
        let dest = self.route_op(to_op as usize, tuple.key);
        let src_node = self.execs[from as usize].node;
        let dst_node = self.execs[dest as usize].node;
        self.ops[to_op as usize].in_transit += 1;
        let at = if src_node == dst_node {
            self.now
        } else {
            let c = &self.cfg.cost;
            let bytes = tuple.payload_bytes;
            let link = &mut self.link_free[src_node.0 as usize];
            let start = link.max(self.now);
            let tx = bytes as f64 / c.bandwidth;
            *link = start + tx;
            self.acc.record(MetricEvent::RemoteTransfer { bytes });
            self.trace.totals.remote_transfer_bytes += bytes;
            start + tx + c.network_latency + bytes as f64 * c.serialization_per_byte
        };
        self.push(at, EventKind::NetTransferDone { exec: dest, tuple });
    }

    fn on_deliver(&mut self, exec: u32, tuple: Tuple) -> Result<(), SimError> {
        let op = self.execs[exec as usize].op as usize;
        self.ops[op].in_transit -= 1;
        // Tuples of a key reach an operator from several upstream executors
        // over different links, so order is checked against arrival here.
        let tuple = Tuple {
            seq: self.ops[op].arrived,
            ..tuple
        };
        self.ops[op].arrived += 1;
        if self.cfg.track_keys {
            *self.ops[op].key_counts.entry(tuple.key).or_insert(0) += 1;
        }
        self.acc.record(MetricEvent::Arrived {
            executor: exec as usize,
            bytes: tuple.payload_bytes,
        });
        let ex = self.execs[exec as usize].ex.as_mut().expect("data executors have state");
        match ex.dispatch(tuple)? {
            Route::Task(t) => self.kick(exec, t)?,
            Route::Shared => self.kick_shared(exec),
            Route::Buffered => {}
        }
        Ok(())
    }

    fn service_time(&mut self, op: usize) -> f64 {
        let cost = self.ops[op].cost;
        match self.cfg.service {
            ServiceMode::Fixed => cost,
            ServiceMode::Exponential => exponential(&mut self.rng_service, 1.0 / cost),
        }
    }

    fn start_service(&mut self, exec: u32, task: TaskId, tuple: Tuple) {
        let op = self.execs[exec as usize].op as usize;
        let cpu = self.service_time(op);
        let ex = self.execs[exec as usize].ex.as_mut().expect("executor");
        ex.set_busy(task, true);
        self.push(self.now + cpu, EventKind::ServiceDone { exec, task, tuple, cpu });
    }

    /// Lets an idle task pull its next queue item, handling labels inline.
    fn kick(&mut self, exec: u32, task: TaskId) -> Result<(), SimError> {
        let mut stack = vec![task];
        while let Some(task) = stack.pop() {
            loop {
                let ex = self.execs[exec as usize].ex.as_mut().expect("executor");
                if ex.task(task).is_none() || ex.is_busy(task) {
                    break;
                }
                match ex.next_item(task) {
                    None => {
                        self.maybe_destroy(exec, task)?;
                        break;
                    }
                    Some(QueueItem::Tuple(t)) => {
                        self.start_service(exec, task, t);
                        break;
                    }
                    Some(QueueItem::Label { shard }) => match ex.label_reached(shard, self.now)? {
                        MigrationStep::Local => {
                            let dest = ex.complete_move(shard, self.now)?;
                            stack.push(dest);
                            self.after_move(exec)?;
                        }
                        MigrationStep::Transfer { bytes, .. } => {
                            let at = self.now + self.cfg.cost.migration_time(bytes);
                            self.push(at, EventKind::MigrationDone { exec, shard });
                        }
                    },
                }
            }
        }
        Ok(())
    }

    /// Hands shared-queue work to idle tasks of a stateless executor.
    fn kick_shared(&mut self, exec: u32) {
        loop {
            let ex = self.execs[exec as usize].ex.as_mut().expect("executor");
            if ex.shared_len() == 0 {
                return;
            }
            let Some(task) = ex
                .active_tasks()
                .into_iter()
                .find(|t| !ex.is_busy(t.id))
                .map(|t| t.id)
            else {
                return;
            };
            let tuple = ex.pop_shared().expect("non-empty");
            self.start_service(exec, task, tuple);
        }
    }

    fn on_service_done(&mut self, exec: u32, task: TaskId, tuple: Tuple, cpu: f64) -> Result<(), SimError> {
        let op = self.execs[exec as usize].op as usize;
        let stateless = self.ops[op].stateless;
        {
            let ex = self.execs[exec as usize].ex.as_mut().expect("executor");
            ex.set_busy(task, false);
            if !stateless {
                let shard = ex.routing().shard_of(tuple.key);
                ex.stats_mut().record(shard, cpu);
                ex.state_apply(task, tuple.key, StateUpdate::Observe { seq: tuple.seq })?;
            }
        }
        self.live -= 1;
        self.ops[op].processed += 1;
        self.acc.record(MetricEvent::Processed {
            executor: exec as usize,
            cpu_seconds: cpu,
        });

        if self.ops[op].downstream.is_empty() {
            let latency = self.now - tuple.created_at;
            self.acc.record(MetricEvent::Completed { latency });
            self.run_latency.push(latency);
            self.trace.totals.tuples_completed += 1;
            self.trace.totals.latency_sum += latency;
        } else {
            let sel = self.ops[op].selectivity;
            let mut n = sel.floor() as u32;
            if self.rng_select.gen::<f64>() < sel - sel.floor() {
                n += 1;
            }
            let bytes = self.ops[op].out_bytes;
            let downstream = self.ops[op].downstream.clone();
            for _ in 0..n {
                for &d in &downstream {
                    let out = Tuple {
                        payload_bytes: bytes,
                        hops: tuple.hops + 1,
                        ..tuple
                    };
                    self.acc.record(MetricEvent::Emitted { executor: exec as usize, bytes });
                    self.send(exec, d, out);
                }
            }
        }

        if stateless {
            self.maybe_destroy(exec, task)?;
            self.kick_shared(exec);
        } else {
            self.kick(exec, task)?;
        }
        self.unblock_source();
        self.check_barrier(op)?;
        Ok(())
    }

    fn unblock_source(&mut self) {
        if self.blocked && self.cfg.max_pending.map_or(true, |cap| self.live < cap) {
            self.blocked = false;
            self.push(self.now, EventKind::Arrival);
        }
    }

    fn on_migration_done(&mut self, exec: u32, shard: u32) -> Result<(), SimError> {
        let ex = self.execs[exec as usize].ex.as_mut().expect("executor");
        let source = ex.routing().task_of(shard);
        let bytes = ex.stats().state_bytes(shard);
        let dest = ex.complete_move(shard, self.now)?;
        self.acc.record(MetricEvent::Migrated { bytes });
        self.kick(exec, dest)?;
        self.maybe_destroy(exec, source)?;
        self.after_move(exec)
    }

    fn maybe_destroy(&mut self, exec: u32, task: TaskId) -> Result<(), SimError> {
        let ex = self.execs[exec as usize].ex.as_mut().expect("executor");
        if let Some(core) = ex.try_destroy(task, self.now) {
            self.cores[core.node.0 as usize][core.slot as usize] = None;
            self.satisfy_grants()?;
        }
        Ok(())
    }

    fn on_window(&mut self) -> Result<(), SimError> {
        let (cores, state): (Vec<u32>, Vec<f64>) = (0..self.execs.len())
            .map(|e| match &self.execs[e].ex {
                Some(ex) => {
                    let s = ex.routing().shards();
                    let owned: u64 = (0..s)
                        .filter(|&sh| ex.is_stateless() || ex.owns_shard(sh))
                        .map(|sh| ex.stats().state_bytes(sh))
                        .sum();
                    (ex.task_count() as u32, if ex.is_stateless() { 0.0 } else { owned as f64 })
                }
                None => (0, 0.0),
            })
            .unzip();
        let (full, summary) = self.acc.snapshot(self.now, &cores, &state);
        let pick = |v: &[f64]| self.sched.iter().map(|&e| v[e as usize]).collect::<Vec<f64>>();
        let snap = MetricsSnapshot {
            source_rate: full.source_rate,
            arrival_rate: pick(&full.arrival_rate),
            service_rate: pick(&full.service_rate),
            state_bytes: pick(&full.state_bytes),
            data_rate: pick(&full.data_rate),
            cores: self.sched.iter().map(|&e| full.cores[e as usize]).collect(),
        };
        self.last_snapshot = Some(snap);
        self.trace.windows.push(WindowRow {
            window_end_s: summary.window_end,
            policy: self.cfg.policy.name(),
            throughput_tps: summary.throughput,
            mean_latency_s: summary.mean_latency,
            p99_latency_s: summary.p99_latency,
            migrated_bytes: summary.migrated_bytes,
            sync_messages: summary.sync_messages,
            remote_transfer_bytes: summary.remote_transfer_bytes,
        });

        for e in 0..self.execs.len() {
            if let Some(ex) = &mut self.execs[e].ex {
                ex.stats_mut().close_window();
            }
        }
        if self.cfg.policy == PolicyKind::ExecutorCentric {
            for e in 0..self.execs.len() as u32 {
                self.rebalance_executor(e)?;
            }
        }
        let w = self.cfg.window;
        if self.now + w <= self.cfg.duration + 1e-9 {
            self.push(self.now + w, EventKind::MetricsWindow);
        }
        Ok(())
    }
}
