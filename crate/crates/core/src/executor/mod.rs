//! Elastic executor: one task per assigned core, a two-tier routing table
//! over a fixed key subspace, and shard moves that keep per-key order.

mod balance;
mod protocol;
mod state;

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{hash_key_to_shard, Tuple};

pub use balance::{
    imbalance, imbalance_of, net_moves, plan_drain, plan_rebalance, plan_rebalance_excluding, LoadStats,
};
pub use protocol::{write_jsonl, EventKind, ProtocolEvent, Scope};
pub use state::{KeyState, ShardState, StateStore, StateUpdate};

/// θ.
pub const DEFAULT_THETA: f64 = 1.2;
pub const DEFAULT_SHARDS: u32 = 256;
pub const DEFAULT_SHARD_STATE_BYTES: u64 = 32 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TaskId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ProcessId(pub u32);

/// A physical core: node plus slot on that node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CoreId {
    pub node: NodeId,
    pub slot: u32,
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "T{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct TaskRef {
    pub id: TaskId,
    pub core: CoreId,
    pub process: ProcessId,
    /// Whether the task runs on the executor's local node.
    pub local: bool,
}

impl TaskRef {
    pub fn node(&self) -> NodeId {
        self.core.node
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct ShardMove {
    pub shard: u32,
    pub source: TaskId,
    pub destination: TaskId,
    pub requires_migration: bool,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExecutorError {
    #[error("executor has no tasks")]
    NoTasks,
    #[error("shard {0} is already being moved")]
    ShardInFlight(u32),
    #[error("unknown task {0}")]
    UnknownTask(TaskId),
    #[error("cannot remove the last task")]
    LastTask,
    #[error("core {0:?} already hosts a task of this executor")]
    CoreBusy(CoreId),
    #[error("shard {shard} is not owned by process {process:?}")]
    NotOwner { shard: u32, process: ProcessId },
    #[error("invalid move of shard {shard}: {reason}")]
    InvalidMove { shard: u32, reason: &'static str },
}

/// Tier-2 shard → task map plus per-shard pause flags. Tier 1 is the
/// shard hash over `z = shards()`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingTable {
    shard_to_task: Vec<TaskId>,
    paused: Vec<bool>,
}

impl RoutingTable {
    pub fn new(shards: u32, task: TaskId) -> Self {
        Self::from_assignment(vec![task; shards as usize])
    }

    pub fn from_assignment(shard_to_task: Vec<TaskId>) -> Self {
        assert!(!shard_to_task.is_empty(), "z must be at least 1");
        let paused = vec![false; shard_to_task.len()];
        Self { shard_to_task, paused }
    }

    pub fn shards(&self) -> u32 {
        self.shard_to_task.len() as u32
    }

    pub fn shard_of(&self, key: u64) -> u32 {
        hash_key_to_shard(key, self.shards())
    }

    pub fn task_of(&self, shard: u32) -> TaskId {
        self.shard_to_task[shard as usize]
    }

    pub fn is_paused(&self, shard: u32) -> bool {
        self.paused[shard as usize]
    }

    pub fn shards_of(&self, task: TaskId) -> impl Iterator<Item = u32> + '_ {
        (0..self.shards()).filter(move |&s| self.task_of(s) == task)
    }

    pub fn assignment(&self) -> &[TaskId] {
        &self.shard_to_task
    }

    fn set(&mut self, shard: u32, task: TaskId) {
        self.shard_to_task[shard as usize] = task;
    }
}

/// Per-shard workload (EWMA of CPU-seconds per window) and state size.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardStats {
    workload: Vec<f64>,
    window: Vec<f64>,
    state_bytes: Vec<u64>,
    alpha: f64,
    primed: bool,
}

impl ShardStats {
    pub fn new(shards: u32, state_bytes: u64, alpha: f64) -> Self {
        let n = shards as usize;
        Self {
            workload: vec![0.0; n],
            window: vec![0.0; n],
            state_bytes: vec![state_bytes; n],
            alpha,
            primed: false,
        }
    }

    pub fn record(&mut self, shard: u32, cpu_seconds: f64) {
        self.window[shard as usize] += cpu_seconds;
    }

    /// Folds the current window into the EWMA and starts a new one.
    pub fn close_window(&mut self) {
        for (w, c) in self.workload.iter_mut().zip(self.window.iter_mut()) {
            *w = if self.primed {
                self.alpha * *c + (1.0 - self.alpha) * *w
            } else {
                *c
            };
            *c = 0.0;
        }
        self.primed = true;
    }

    pub fn workload(&self, shard: u32) -> f64 {
        self.workload[shard as usize]
    }

    pub fn set_workload(&mut self, shard: u32, load: f64) {
        assert!(load >= 0.0);
        self.workload[shard as usize] = load;
        self.primed = true;
    }

    pub fn state_bytes(&self, shard: u32) -> u64 {
        self.state_bytes[shard as usize]
    }

    pub fn set_state_bytes(&mut self, shard: u32, bytes: u64) {
        self.state_bytes[shard as usize] = bytes;
    }

    pub fn shards(&self) -> u32 {
        self.workload.len() as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QueueItem {
    Tuple(Tuple),
    /// Labeling tuple certifying that every earlier tuple of `shard` in
    /// this queue has been processed.
    Label { shard: u32 },
}

/// Where [`ElasticExecutor::route`] sent a tuple.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    Task(TaskId),
    /// Held back because the shard is paused.
    Buffered,
    /// Stateless executor: any idle task may take it.
    Shared,
}

/// What happens after a labeling tuple is dequeued.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MigrationStep {
    /// Same process: the routing update can be applied right away.
    Local,
    /// State must travel between processes.
    Transfer { bytes: u64, from: NodeId, to: NodeId },
}

/// Cost knobs for the synchronous drivers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MoveCosts {
    /// Time charged per processed tuple (s).
    pub service_time: f64,
    /// Bytes per second.
    pub bandwidth: f64,
    /// Seconds per message.
    pub latency: f64,
}

impl MoveCosts {
    pub fn migration_time(&self, bytes: u64) -> f64 {
        bytes as f64 / self.bandwidth + self.latency
    }
}

impl Default for MoveCosts {
    fn default() -> Self {
        Self {
            service_time: 0.001,
            bandwidth: 1e9 / 8.0,
            latency: 0.0005,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecutorConfig {
    /// z.
    pub shards: u32,
    pub shard_state_bytes: u64,
    /// Shared queue, no per-key state, no shard moves.
    pub stateless: bool,
    pub ewma_alpha: f64,
}

impl Default for ExecutorConfig {
    fn default() -> Self {
        Self {
            shards: DEFAULT_SHARDS,
            shard_state_bytes: DEFAULT_SHARD_STATE_BYTES,
            stateless: false,
            ewma_alpha: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
struct TaskSlot {
    tref: TaskRef,
    queue: VecDeque<QueueItem>,
    busy: bool,
    retiring: bool,
}

#[derive(Debug, Clone)]
struct Process {
    node: NodeId,
    store: StateStore,
    tasks: u32,
}

#[derive(Debug, Clone)]
enum MovePhase {
    Draining,
    Migrating(Option<ShardState>),
}

#[derive(Debug, Clone)]
struct InFlight {
    mv: ShardMove,
    phase: MovePhase,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MoveCounters {
    pub local_moves: u64,
    pub remote_moves: u64,
    pub migrated_bytes: u64,
    /// Bytes transferred by moves between tasks of one process.
    pub intra_process_bytes: u64,
}

#[derive(Debug, Clone)]
pub struct ElasticExecutor {
    id: usize,
    local_node: NodeId,
    cfg: ExecutorConfig,
    table: RoutingTable,
    tasks: Vec<TaskSlot>,
    processes: BTreeMap<ProcessId, Process>,
    next_task: u32,
    next_process: u32,
    stats: ShardStats,
    holdback: BTreeMap<u32, VecDeque<Tuple>>,
    in_flight: BTreeMap<u32, InFlight>,
    shared: VecDeque<Tuple>,
    events: Vec<ProtocolEvent>,
    logging: bool,
    counters: MoveCounters,
}

const MAIN: ProcessId = ProcessId(0);

impl ElasticExecutor {
    /// Creates the executor with one task per core. Shards are dealt
    /// round-robin over the initial tasks and their state is placed in the
    /// owning task's process.
    pub fn new(id: usize, local_node: NodeId, cfg: ExecutorConfig, cores: &[CoreId]) -> Result<Self, ExecutorError> {
        assert!(cfg.shards >= 1, "z must be at least 1");
        let mut processes = BTreeMap::new();
        processes.insert(
            MAIN,
            Process {
                node: local_node,
                store: StateStore::new(MAIN),
                tasks: 0,
            },
        );
        let mut ex = Self {
            id,
            local_node,
            table: RoutingTable::new(cfg.shards, TaskId(0)),
            stats: ShardStats::new(cfg.shards, cfg.shard_state_bytes, cfg.ewma_alpha),
            cfg,
            tasks: Vec::new(),
            processes,
            next_task: 0,
            next_process: 1,
            holdback: BTreeMap::new(),
            in_flight: BTreeMap::new(),
            shared: VecDeque::new(),
            events: Vec::new(),
            logging: true,
            counters: MoveCounters::default(),
        };
        for &core in cores {
            ex.add_task(core, 0.0)?;
        }
        ex.events.clear();
        let n = ex.tasks.len();
        for shard in 0..ex.cfg.shards {
            let (task, process) = if n == 0 {
                (TaskId(0), MAIN)
            } else {
                let t = ex.tasks[shard as usize % n].tref;
                (t.id, t.process)
            };
            ex.table.set(shard, task);
            if !ex.cfg.stateless {
                ex.proc_mut(process).store.insert(shard, ShardState::default());
            }
        }
        Ok(ex)
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn local_node(&self) -> NodeId {
        self.local_node
    }

    pub fn config(&self) -> &ExecutorConfig {
        &self.cfg
    }

    pub fn is_stateless(&self) -> bool {
        self.cfg.stateless
    }

    pub fn routing(&self) -> &RoutingTable {
        &self.table
    }

    pub fn stats(&self) -> &ShardStats {
        &self.stats
    }

    pub fn stats_mut(&mut self) -> &mut ShardStats {
        &mut self.stats
    }

    pub fn counters(&self) -> MoveCounters {
        self.counters
    }

    /// Every live task, including those being drained for removal.
    pub fn tasks(&self) -> impl Iterator<Item = TaskRef> + '_ {
        self.tasks.iter().map(|t| t.tref)
    }

    /// Tasks that accept new shards and new work.
    pub fn active_tasks(&self) -> Vec<TaskRef> {
        self.tasks.iter().filter(|t| !t.retiring).map(|t| t.tref).collect()
    }

    pub fn task_count(&self) -> usize {
        self.tasks.len()
    }

    /// Cores held, counting tasks that are still draining.
    pub fn cores(&self) -> Vec<CoreId> {
        self.tasks.iter().map(|t| t.tref.core).collect()
    }

    pub fn task(&self, id: TaskId) -> Option<TaskRef> {
        self.slot(id).ok().map(|s| self.tasks[s].tref)
    }

    pub fn is_retiring(&self, id: TaskId) -> bool {
        self.slot(id).is_ok_and(|s| self.tasks[s].retiring)
    }

    pub fn process_count(&self) -> usize {
        self.processes.len()
    }

    pub fn has_process_on(&self, node: NodeId) -> bool {
        self.processes.values().any(|p| p.node == node)
    }

    pub fn store_of(&self, process: ProcessId) -> Option<&StateStore> {
        self.processes.get(&process).map(|p| &p.store)
    }

    pub fn stores(&self) -> impl Iterator<Item = &StateStore> {
        self.processes.values().map(|p| &p.store)
    }

    /// Processes whose store holds `shard`.
    pub fn owners_of(&self, shard: u32) -> Vec<ProcessId> {
        self.processes
            .iter()
            .filter(|(_, p)| p.store.owns(shard))
            .map(|(&id, _)| id)
            .collect()
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight.len()
    }

    pub fn is_in_flight(&self, shard: u32) -> bool {
        self.in_flight.contains_key(&shard)
    }

    pub fn in_flight_shards(&self) -> Vec<u32> {
        self.in_flight.keys().copied().collect()
    }

    pub fn take_events(&mut self) -> Vec<ProtocolEvent> {
        std::mem::take(&mut self.events)
    }

    pub fn events(&self) -> &[ProtocolEvent] {
        &self.events
    }

    fn slot(&self, id: TaskId) -> Result<usize, ExecutorError> {
        self.tasks
            .binary_search_by_key(&id, |t| t.tref.id)
            .map_err(|_| ExecutorError::UnknownTask(id))
    }

    fn proc_mut(&mut self, id: ProcessId) -> &mut Process {
        self.processes.get_mut(&id).expect("process exists")
    }

    fn log(&mut self, e: ProtocolEvent) {
        if self.logging {
            self.events.push(e);
        }
    }

    /// Protocol events are kept unless logging is switched off.
    pub fn set_event_logging(&mut self, on: bool) {
        self.logging = on;
        if !on {
            self.events.clear();
        }
    }

    // ---- routing and queues ----

    /// Tier-1 hash then tier-2 lookup, without side effects.
    pub fn lookup(&self, key: u64) -> Result<(u32, TaskId), ExecutorError> {
        if self.tasks.is_empty() {
            return Err(ExecutorError::NoTasks);
        }
        let shard = self.table.shard_of(key);
        Ok((shard, self.table.task_of(shard)))
    }

    /// Receiver entry point: decides where a tuple goes and holds it back
    /// if its shard is paused. Does not enqueue at the task.
    pub fn route(&mut self, tuple: Tuple) -> Result<Route, ExecutorError> {
        let (shard, task) = self.lookup(tuple.key)?;
        if self.cfg.stateless {
            return Ok(Route::Shared);
        }
        if self.table.is_paused(shard) {
            self.holdback.entry(shard).or_default().push_back(tuple);
            return Ok(Route::Buffered);
        }
        Ok(Route::Task(task))
    }

    /// [`route`](Self::route) followed by enqueueing at the chosen task or
    /// the shared queue.
    pub fn dispatch(&mut self, tuple: Tuple) -> Result<Route, ExecutorError> {
        let r = self.route(tuple)?;
        match r {
            Route::Task(t) => self.enqueue(t, QueueItem::Tuple(tuple))?,
            Route::Shared => self.shared.push_back(tuple),
            Route::Buffered => {}
        }
        Ok(r)
    }

    pub fn enqueue(&mut self, task: TaskId, item: QueueItem) -> Result<(), ExecutorError> {
        let s = self.slot(task)?;
        self.tasks[s].queue.push_back(item);
        Ok(())
    }

    pub fn next_item(&mut self, task: TaskId) -> Option<QueueItem> {
        let s = self.slot(task).ok()?;
        self.tasks[s].queue.pop_front()
    }

    pub fn pop_shared(&mut self) -> Option<Tuple> {
        self.shared.pop_front()
    }

    pub fn shared_len(&self) -> usize {
        self.shared.len()
    }

    pub fn queue_len(&self, task: TaskId) -> usize {
        self.slot(task).map_or(0, |s| self.tasks[s].queue.len())
    }

    /// Tuples waiting anywhere in the executor (task queues, shared queue,
    /// hold-back buffers), labels excluded.
    pub fn queued_tuples(&self) -> usize {
        let q: usize = self
            .tasks
            .iter()
            .map(|t| t.queue.iter().filter(|i| matches!(i, QueueItem::Tuple(_))).count())
            .sum();
        q + self.shared.len() + self.holdback.values().map(VecDeque::len).sum::<usize>()
    }

    pub fn held_back(&self) -> usize {
        self.holdback.values().map(VecDeque::len).sum()
    }

    pub fn is_busy(&self, task: TaskId) -> bool {
        self.slot(task).is_ok_and(|s| self.tasks[s].busy)
    }

    pub fn set_busy(&mut self, task: TaskId, busy: bool) {
        if let Ok(s) = self.slot(task) {
            self.tasks[s].busy = busy;
        }
    }

    pub fn busy_tasks(&self) -> usize {
        self.tasks.iter().filter(|t| t.busy).count()
    }

    /// Process of the task that currently owns `key`'s shard.
    pub fn state_apply(&mut self, task: TaskId, key: u64, update: StateUpdate) -> Result<KeyState, ExecutorError> {
        let process = self.tasks[self.slot(task)?].tref.process;
        let shard = self.table.shard_of(key);
        self.proc_mut(process).store.apply(shard, key, update)
    }

    // ---- shard moves ----

    /// Steps 1 and 2 of a move: pause the shard and put a labeling tuple
    /// behind everything already queued at the source task.
    pub fn begin_move(&mut self, mv: ShardMove, now: f64) -> Result<(), ExecutorError> {
        if self.in_flight.contains_key(&mv.shard) {
            return Err(ExecutorError::ShardInFlight(mv.shard));
        }
        let invalid = |reason| ExecutorError::InvalidMove { shard: mv.shard, reason };
        if mv.shard >= self.table.shards() || self.cfg.stateless {
            return Err(invalid("no such shard"));
        }
        let src = self.tasks[self.slot(mv.source)?].tref;
        let ds = self.slot(mv.destination)?;
        let dst = self.tasks[ds].tref;
        if mv.source == mv.destination {
            return Err(invalid("source equals destination"));
        }
        if self.table.task_of(mv.shard) != mv.source {
            return Err(invalid("source does not own the shard"));
        }
        if self.tasks[ds].retiring {
            return Err(invalid("destination is being removed"));
        }
        let mv = ShardMove {
            requires_migration: src.process != dst.process,
            ..mv
        };
        self.table.paused[mv.shard as usize] = true;
        self.in_flight.insert(
            mv.shard,
            InFlight {
                mv,
                phase: MovePhase::Draining,
            },
        );
        self.enqueue(mv.source, QueueItem::Label { shard: mv.shard })?;
        let id = self.id;
        self.log(ProtocolEvent::new(EventKind::Pause, now, id).shard(mv.shard));
        self.log(
            ProtocolEvent::new(EventKind::LabelEnqueued, now, id)
                .shard(mv.shard)
                .source(mv.source.0),
        );
        Ok(())
    }

    /// Steps 3 and 4: the label reached the head of the source queue, so
    /// the shard has no pending tuples left. Starts the state transfer if
    /// the destination lives in another process.
    pub fn label_reached(&mut self, shard: u32, now: f64) -> Result<MigrationStep, ExecutorError> {
        let id = self.id;
        let fl = self
            .in_flight
            .get(&shard)
            .ok_or(ExecutorError::InvalidMove { shard, reason: "not in flight" })?;
        if !matches!(fl.phase, MovePhase::Draining) {
            return Err(ExecutorError::InvalidMove { shard, reason: "label already seen" });
        }
        let mv = fl.mv;
        self.log(
            ProtocolEvent::new(EventKind::LabelDequeued, now, id)
                .shard(shard)
                .source(mv.source.0),
        );
        let src = self.tasks[self.slot(mv.source)?].tref;
        let dst = self.tasks[self.slot(mv.destination)?].tref;
        if !mv.requires_migration {
            self.log(
                ProtocolEvent::new(EventKind::MigrationSkipped, now, id)
                    .shard(shard)
                    .between(mv.source.0, mv.destination.0),
            );
            self.in_flight.get_mut(&shard).unwrap().phase = MovePhase::Migrating(None);
            return Ok(MigrationStep::Local);
        }
        let state = self
            .proc_mut(src.process)
            .store
            .take(shard)
            .ok_or(ExecutorError::NotOwner {
                shard,
                process: src.process,
            })?;
        let bytes = self.stats.state_bytes(shard);
        self.in_flight.get_mut(&shard).unwrap().phase = MovePhase::Migrating(Some(state));
        self.log(
            ProtocolEvent::new(EventKind::MigrationStart, now, id)
                .shard(shard)
                .between(mv.source.0, mv.destination.0)
                .bytes(bytes),
        );
        Ok(MigrationStep::Transfer {
            bytes,
            from: src.node(),
            to: dst.node(),
        })
    }

    /// Steps 4 to 6: install migrated state, switch tier 2, unpause and
    /// release held-back tuples to the destination in arrival order.
    /// Returns the destination task.
    pub fn complete_move(&mut self, shard: u32, now: f64) -> Result<TaskId, ExecutorError> {
        let id = self.id;
        let fl = self
            .in_flight
            .remove(&shard)
            .ok_or(ExecutorError::InvalidMove { shard, reason: "not in flight" })?;
        let mv = fl.mv;
        let MovePhase::Migrating(state) = fl.phase else {
            self.in_flight.insert(shard, fl);
            return Err(ExecutorError::InvalidMove { shard, reason: "label not yet dequeued" });
        };
        let src_proc = self.tasks[self.slot(mv.source)?].tref.process;
        let dst_proc = self.tasks[self.slot(mv.destination)?].tref.process;
        if let Some(state) = state {
            let bytes = self.stats.state_bytes(shard);
            self.proc_mut(dst_proc).store.insert(shard, state);
            self.counters.remote_moves += 1;
            self.counters.migrated_bytes += bytes;
            if src_proc == dst_proc {
                self.counters.intra_process_bytes += bytes;
            }
            self.log(
                ProtocolEvent::new(EventKind::MigrationDone, now, id)
                    .shard(shard)
                    .between(mv.source.0, mv.destination.0)
                    .bytes(bytes),
            );
        } else {
            self.counters.local_moves += 1;
        }
        self.table.set(shard, mv.destination);
        self.table.paused[shard as usize] = false;
        self.log(
            ProtocolEvent::new(EventKind::RoutingUpdated, now, id)
                .shard(shard)
                .between(mv.source.0, mv.destination.0),
        );
        if let Some(held) = self.holdback.remove(&shard) {
            let s = self.slot(mv.destination)?;
            self.tasks[s].queue.extend(held.into_iter().map(QueueItem::Tuple));
        }
        self.log(ProtocolEvent::new(EventKind::Resume, now, id).shard(shard));
        Ok(mv.destination)
    }

    /// Rebalance plan over the active tasks, leaving in-flight shards alone.
    pub fn plan_rebalance(&self, theta: f64) -> Vec<ShardMove> {
        if self.cfg.stateless {
            return Vec::new();
        }
        let frozen = self.in_flight_shards();
        plan_rebalance_excluding(&self.stats, &self.table, &self.active_tasks(), theta, &frozen)
    }

    /// δ over the active tasks using the current shard workloads.
    pub fn imbalance(&self) -> f64 {
        LoadStats::from_shards(&self.stats, &self.table, &self.active_tasks()).imbalance()
    }

    // ---- core changes ----

    /// Creates a task on `core` with no shards. Remote cores get a task in
    /// the executor's process on that node, created on demand.
    pub fn add_task(&mut self, core: CoreId, now: f64) -> Result<TaskRef, ExecutorError> {
        if self.tasks.iter().any(|t| t.tref.core == core) {
            return Err(ExecutorError::CoreBusy(core));
        }
        let local = core.node == self.local_node;
        let process = if local {
            MAIN
        } else if let Some((&p, _)) = self.processes.iter().find(|(_, p)| p.node == core.node) {
            p
        } else {
            let p = ProcessId(self.next_process);
            self.next_process += 1;
            self.processes.insert(
                p,
                Process {
                    node: core.node,
                    store: StateStore::new(p),
                    tasks: 0,
                },
            );
            let id = self.id;
            self.log(ProtocolEvent::new(EventKind::ProcessCreated, now, id).destination(p.0));
            p
        };
        self.proc_mut(process).tasks += 1;
        let tref = TaskRef {
            id: TaskId(self.next_task),
            core,
            process,
            local,
        };
        self.next_task += 1;
        self.tasks.push(TaskSlot {
            tref,
            queue: VecDeque::new(),
            busy: false,
            retiring: false,
        });
        let id = self.id;
        self.log(ProtocolEvent::new(EventKind::TaskAdded, now, id).destination(tref.id.0));
        Ok(tref)
    }

    /// Marks a task for removal and starts moving its shards to the
    /// survivors. The task is destroyed by [`try_destroy`](Self::try_destroy)
    /// once it owns no shard and has nothing queued or in service.
    pub fn begin_remove_task(&mut self, task: TaskId, now: f64) -> Result<Vec<ShardMove>, ExecutorError> {
        let s = self.slot(task)?;
        if self.tasks[s].retiring {
            return Err(ExecutorError::UnknownTask(task));
        }
        if self.tasks.iter().filter(|t| !t.retiring).count() < 2 {
            return Err(ExecutorError::LastTask);
        }
        if let Some(fl) = self
            .in_flight
            .values()
            .find(|f| f.mv.source == task || f.mv.destination == task)
        {
            return Err(ExecutorError::ShardInFlight(fl.mv.shard));
        }
        let mut tasks = self.active_tasks();
        self.tasks[s].retiring = true;
        let moves = if self.cfg.stateless {
            Vec::new()
        } else {
            tasks.sort_by_key(|t| t.id);
            plan_drain(&self.stats, &self.table, &tasks, task)
        };
        for mv in &moves {
            self.begin_move(*mv, now)?;
        }
        Ok(moves)
    }

    /// Destroys a retiring task if it is fully drained, and its process if
    /// that was the last task there. Returns the freed core.
    pub fn try_destroy(&mut self, task: TaskId, now: f64) -> Option<CoreId> {
        let s = self.slot(task).ok()?;
        let t = &self.tasks[s];
        if !t.retiring || t.busy || !t.queue.is_empty() || self.table.shards_of(task).next().is_some() {
            return None;
        }
        let tref = self.tasks.remove(s).tref;
        let id = self.id;
        self.log(ProtocolEvent::new(EventKind::TaskRemoved, now, id).source(tref.id.0));
        let p = self.proc_mut(tref.process);
        p.tasks -= 1;
        if p.tasks == 0 && tref.process != MAIN {
            debug_assert_eq!(p.store.owned().count(), 0);
            self.processes.remove(&tref.process);
            self.log(ProtocolEvent::new(EventKind::ProcessDestroyed, now, id).source(tref.process.0));
        }
        Some(tref.core)
    }

    // ---- state hand-off for operator-level repartitioning ----

    /// Drops every shard outside `owned` from the stores.
    pub fn retain_shards(&mut self, owned: &[u32]) {
        for p in self.processes.values_mut() {
            let drop: Vec<u32> = p.store.owned().filter(|s| !owned.contains(s)).collect();
            for s in drop {
                p.store.take(s);
            }
        }
    }

    pub fn take_shard_state(&mut self, shard: u32) -> Result<ShardState, ExecutorError> {
        let task = self.table.task_of(shard);
        let process = self.task(task).map_or(MAIN, |t| t.process);
        self.proc_mut(process)
            .store
            .take(shard)
            .ok_or(ExecutorError::NotOwner { shard, process })
    }

    pub fn put_shard_state(&mut self, shard: u32, state: ShardState) {
        let task = self.table.task_of(shard);
        let process = self.task(task).map_or(MAIN, |t| t.process);
        self.proc_mut(process).store.insert(shard, state);
    }

    pub fn owns_shard(&self, shard: u32) -> bool {
        !self.owners_of(shard).is_empty()
    }

    // ---- synchronous drivers ----

    fn process_tuple(&mut self, task: TaskId, tuple: Tuple, now: f64) -> Result<(), ExecutorError> {
        let shard = self.table.shard_of(tuple.key);
        if !self.cfg.stateless {
            self.state_apply(task, tuple.key, StateUpdate::Observe { seq: tuple.seq })?;
        }
        let id = self.id;
        self.log(
            ProtocolEvent::new(EventKind::TupleProcessed, now, id)
                .shard(shard)
                .source(task.0),
        );
        Ok(())
    }

    /// Processes everything queued at `task` in FIFO order, handling any
    /// labels along the way. Returns the clock after the last item.
    pub fn run_task(&mut self, task: TaskId, costs: &MoveCosts, mut now: f64) -> Result<f64, ExecutorError> {
        while let Some(item) = self.next_item(task) {
            match item {
                QueueItem::Tuple(t) => {
                    now += costs.service_time;
                    self.process_tuple(task, t, now)?;
                }
                QueueItem::Label { shard } => {
                    if let MigrationStep::Transfer { bytes, .. } = self.label_reached(shard, now)? {
                        now += costs.migration_time(bytes);
                    }
                    self.complete_move(shard, now)?;
                }
            }
        }
        Ok(now)
    }

    /// Runs one shard move to completion: pause, label, drain the source
    /// queue up to the label, migrate if needed, switch routing and resume.
    /// Returns the protocol events emitted, tuple processing included.
    pub fn execute_shard_move(
        &mut self,
        mv: ShardMove,
        costs: &MoveCosts,
        now: f64,
    ) -> Result<Vec<ProtocolEvent>, ExecutorError> {
        let start = self.events.len();
        self.begin_move(mv, now)?;
        let mut now = now;
        while let Some(item) = self.next_item(mv.source) {
            match item {
                QueueItem::Tuple(t) => {
                    now += costs.service_time;
                    self.process_tuple(mv.source, t, now)?;
                }
                QueueItem::Label { shard } => {
                    if let MigrationStep::Transfer { bytes, .. } = self.label_reached(shard, now)? {
                        now += costs.migration_time(bytes);
                    }
                    self.complete_move(shard, now)?;
                    if shard == mv.shard {
                        break;
                    }
                }
            }
        }
        Ok(self.events[start..].to_vec())
    }

    /// Synchronous task removal: drains every shard of `task` through the
    /// move protocol, then destroys the task.
    pub fn remove_task(&mut self, task: TaskId, costs: &MoveCosts, now: f64) -> Result<Vec<ProtocolEvent>, ExecutorError> {
        let start = self.events.len();
        let moves = self.begin_remove_task(task, now)?;
        let now = self.run_task(task, costs, now)?;
        debug_assert!(moves.iter().all(|mv| !self.is_in_flight(mv.shard)));
        let freed = self.try_destroy(task, now);
        debug_assert!(freed.is_some());
        Ok(self.events[start..].to_vec())
    }
}
