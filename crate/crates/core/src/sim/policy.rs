use crate::executor::{
    net_moves, plan_rebalance, CoreId, EventKind as PEvent, ExecutorError, ProcessId, ProtocolEvent,
    RoutingTable, ShardStats, TaskId, TaskRef,
};
use crate::metrics::MetricEvent;
use crate::scheduler::{allocate, assign_adaptive, AssignmentMatrix, ClusterSpec};

use super::{Decision, EventKind, OpRouting, PolicyKind, RcStep, SimError, Simulation};

/// Phase of an operator-level repartitioning round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RcPhase {
    /// Pausing upstream executors one by one.
    Pausing,
    /// Waiting for every in-flight tuple of the operator to be processed.
    Draining,
    Migrating,
    /// Updating upstream routing tables one by one.
    Updating,
}

#[derive(Debug, Clone)]
pub(super) struct RcRound {
    pub phase: RcPhase,
    /// (shard, destination executor slot).
    pub moves: Vec<(u32, u32)>,
    pub upstream: u32,
}

impl RcRound {
    /// Input stays buffered from the first pause until resume.
    pub fn holds_input(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(super) struct PendingRemoval {
    pub exec: u32,
    pub node: u32,
}

impl Simulation {
    // ---- executor-centric ----

    /// Cores per (node, scheduled executor) held by active tasks.
    pub fn current_assignment(&self) -> AssignmentMatrix {
        let nodes = self.cfg.cluster.nodes as usize;
        let local: Vec<usize> = self
            .sched
            .iter()
            .map(|&e| self.execs[e as usize].node.0 as usize)
            .collect();
        let mut x = AssignmentMatrix::new(nodes, local);
        for (j, &e) in self.sched.iter().enumerate() {
            let ex = self.execs[e as usize].ex.as_ref().expect("scheduled");
            for t in ex.active_tasks() {
                let i = t.core.node.0 as usize;
                x.set(i, j, x.get(i, j) + 1);
            }
        }
        x
    }

    pub fn cluster_spec(&self) -> ClusterSpec {
        ClusterSpec::uniform(self.cfg.cluster.nodes as usize, self.cfg.cluster.cores_per_node)
    }

    /// Whether core transitions or drains are still in progress.
    pub fn transition_pending(&self) -> bool {
        !self.pending_grants.is_empty()
            || !self.pending_removals.is_empty()
            || self
                .execs
                .iter()
                .filter_map(|e| e.ex.as_ref())
                .any(|ex| ex.tasks().any(|t| ex.is_retiring(t.id)))
    }

    /// Moves the cluster towards `target`: surplus tasks drain and retire,
    /// new tasks start as soon as a core on the requested node is free.
    /// Returns the number of cores changing hands.
    pub fn apply_assignment(&mut self, target: &AssignmentMatrix) -> Result<u32, SimError> {
        if self.cfg.policy != PolicyKind::ExecutorCentric {
            return Err(SimError::WrongPolicy {
                expected: PolicyKind::ExecutorCentric,
                actual: self.cfg.policy,
            });
        }
        let nodes = self.cfg.cluster.nodes as usize;
        if target.nodes() != nodes || target.executors() != self.sched.len() {
            return Err(SimError::InfeasibleAssignment(format!(
                "expected {nodes} x {} matrix, got {} x {}",
                self.sched.len(),
                target.nodes(),
                target.executors()
            )));
        }
        for i in 0..nodes {
            if target.node_load(i) > self.cfg.cluster.cores_per_node {
                return Err(SimError::InfeasibleAssignment(format!("node {i} over capacity")));
            }
        }
        if let Some(j) = (0..self.sched.len()).find(|&j| target.total(j) == 0) {
            return Err(SimError::InfeasibleAssignment(format!("executor {j} would have no core")));
        }
        let cur = self.current_assignment();
        let mut moved = 0;
        for j in 0..self.sched.len() {
            let e = self.sched[j];
            for i in 0..nodes {
                let (have, want) = (cur.get(i, j), target.get(i, j));
                for _ in want..have {
                    self.pending_removals.push(PendingRemoval { exec: e, node: i as u32 });
                    moved += 1;
                }
                for _ in have..want {
                    self.pending_grants.push_back((e, i as u32));
                }
            }
        }
        self.retry_removals()?;
        self.satisfy_grants()?;
        Ok(moved)
    }

    /// Starts every pending removal that is currently possible.
    fn retry_removals(&mut self) -> Result<(), SimError> {
        let pending = std::mem::take(&mut self.pending_removals);
        for r in pending {
            let ex = self.execs[r.exec as usize].ex.as_mut().expect("scheduled");
            let victim = ex
                .active_tasks()
                .into_iter()
                .filter(|t| t.core.node.0 == r.node)
                .map(|t| t.id)
                .max();
            let Some(task) = victim else { continue };
            match ex.begin_remove_task(task, self.now) {
                Ok(_) => {
                    // Labels may already sit at the head of idle queues.
                    self.kick(r.exec, task)?;
                    self.maybe_destroy(r.exec, task)?;
                }
                Err(ExecutorError::ShardInFlight(_) | ExecutorError::LastTask) => self.pending_removals.push(r),
                Err(e) => return Err(e.into()),
            }
        }
        Ok(())
    }

    /// Starts granted tasks whose node has a free core, in request order.
    pub(super) fn satisfy_grants(&mut self) -> Result<(), SimError> {
        let mut waiting = std::collections::VecDeque::new();
        while let Some((e, node)) = self.pending_grants.pop_front() {
            match self.take_core(node as usize, e) {
                Some(core) => {
                    let ex = self.execs[e as usize].ex.as_mut().expect("scheduled");
                    ex.add_task(core, self.now)?;
                    self.rebalance_executor(e)?;
                }
                None => waiting.push_back((e, node)),
            }
        }
        self.pending_grants = waiting;
        // A grant may unblock a removal that needed a second task.
        if !self.pending_removals.is_empty() {
            self.retry_removals()?;
        }
        Ok(())
    }

    /// Starts a rebalance of executor `e` if it is idle with respect to
    /// moves and δ exceeds θ.
    pub(super) fn rebalance_executor(&mut self, e: u32) -> Result<(), SimError> {
        let theta = self.cfg.theta;
        let now = self.now;
        let Some(ex) = self.execs[e as usize].ex.as_mut() else { return Ok(()) };
        if ex.is_stateless() || ex.tasks().any(|t| ex.is_retiring(t.id)) {
            return Ok(());
        }
        if ex.imbalance() <= theta {
            return Ok(());
        }
        let tasks = ex.active_tasks();
        let moves = net_moves(&ex.plan_rebalance(theta), &tasks);
        let sources: Vec<TaskId> = moves.iter().map(|m| m.source).collect();
        for mv in moves {
            ex.begin_move(mv, now)?;
        }
        for t in sources {
            self.kick(e, t)?;
        }
        Ok(())
    }

    /// Called whenever a shard move of `e` finishes.
    pub(super) fn after_move(&mut self, e: u32) -> Result<(), SimError> {
        let ex = self.execs[e as usize].ex.as_ref().expect("executor");
        if ex.in_flight() == 0 && self.pending_removals.iter().any(|r| r.exec == e) {
            self.retry_removals()?;
        }
        Ok(())
    }

    fn ec_tick(&mut self) -> Result<(), SimError> {
        let Some(snap) = self.last_snapshot.clone() else { return Ok(()) };
        if self.transition_pending() {
            self.log_decision("skipped", Vec::new(), false, None, 0, 0);
            return Ok(());
        }
        let total = self.cfg.cluster.nodes * self.cfg.cluster.cores_per_node;
        let budget = self.cfg.scheduler.core_budget.unwrap_or(total).min(total);
        let alloc = allocate(&snap, &self.cfg.scheduler, budget);
        let overload = alloc.is_overload();
        let k = alloc.into_vector();
        let prev = self.current_assignment();
        let outcome = assign_adaptive(&k, &prev, &self.cluster_spec(), self.cfg.scheduler.phi_base, &snap)?;
        let moved = if outcome.assignment == prev {
            0
        } else {
            self.apply_assignment(&outcome.assignment)?
        };
        let label = if overload { "overload" } else { "met" };
        self.log_decision(label, k.0, overload, Some(outcome.phi), outcome.iterations, moved);
        Ok(())
    }

    fn log_decision(
        &mut self,
        outcome: &'static str,
        allocation: Vec<u32>,
        overload: bool,
        phi: Option<f64>,
        iterations: u32,
        cores_moved: u32,
    ) {
        self.trace.decisions.push(Decision {
            time: self.now,
            policy: self.cfg.policy.name(),
            outcome,
            allocation,
            overload,
            phi,
            iterations,
            cores_moved,
            shard_moves: 0,
        });
    }

    pub(super) fn policy_tick(&mut self) -> Result<(), SimError> {
        match self.cfg.policy {
            PolicyKind::Static => Ok(()),
            PolicyKind::ExecutorCentric => self.ec_tick(),
            PolicyKind::ResourceCentric => self.rc_tick(),
        }
    }

    // ---- resource-centric ----

    /// Operator-level shard loads and the current shard → slot table.
    fn rc_view(&self, op: usize) -> Option<(ShardStats, RoutingTable, Vec<TaskRef>)> {
        let OpRouting::Shards(table) = &self.ops[op].routing else { return None };
        let z = table.len() as u32;
        let mut stats = ShardStats::new(z, self.cfg.shard_state_bytes, self.cfg.ewma_alpha);
        for (slot, &e) in self.ops[op].execs.iter().enumerate() {
            let ex = self.execs[e as usize].ex.as_ref()?;
            for s in (0..z).filter(|&s| table[s as usize] == slot as u32) {
                stats.set_workload(s, ex.stats().workload(s));
            }
        }
        let routing = RoutingTable::from_assignment(table.iter().map(|&s| TaskId(s)).collect());
        let tasks = self.ops[op]
            .execs
            .iter()
            .enumerate()
            .map(|(slot, &e)| TaskRef {
                id: TaskId(slot as u32),
                core: CoreId {
                    node: self.execs[e as usize].node,
                    slot: 0,
                },
                process: ProcessId(slot as u32),
                local: true,
            })
            .collect();
        Some((stats, routing, tasks))
    }

    /// Imbalance of operator `op` across its executors.
    pub fn operator_imbalance(&self, op: usize) -> Option<f64> {
        let (stats, routing, tasks) = self.rc_view(op)?;
        Some(crate::executor::LoadStats::from_shards(&stats, &routing, &tasks).imbalance())
    }

    fn rc_tick(&mut self) -> Result<(), SimError> {
        let Some(snap) = self.last_snapshot.clone() else { return Ok(()) };
        let total = self.cfg.cluster.nodes * self.cfg.cluster.cores_per_node;
        let budget = self.cfg.scheduler.core_budget.unwrap_or(total).min(total);
        let alloc = allocate(&snap, &self.cfg.scheduler, budget);
        let overload = alloc.is_overload();
        let k = alloc.into_vector();
        let mut shard_moves = 0;
        for op in 0..self.ops.len() {
            if self.ops[op].rc.is_some() {
                continue;
            }
            let Some((stats, routing, tasks)) = self.rc_view(op) else { continue };
            let moves = net_moves(&plan_rebalance(&stats, &routing, &tasks, self.cfg.theta), &tasks);
            if moves.is_empty() {
                continue;
            }
            shard_moves += moves.len() as u32;
            let pairs: Vec<(u32, u32)> = moves.iter().map(|m| (m.shard, m.destination.0)).collect();
            self.rc_repartition(op, &pairs)?;
        }
        let label = if overload { "overload" } else { "met" };
        self.log_decision(label, k.0, overload, None, 1, 0);
        self.trace.decisions.last_mut().expect("just pushed").shard_moves = shard_moves;
        Ok(())
    }

    fn rc_log(&mut self, kind: PEvent, op: usize) {
        if self.cfg.record_protocol {
            let first = self.ops[op].execs.first().copied().unwrap_or(0) as usize;
            self.trace.protocol.push(ProtocolEvent::new(kind, self.now, first));
        }
    }

    fn sync_message(&mut self) {
        self.acc.record(MetricEvent::SyncMessage);
        self.trace.totals.sync_messages += 1;
    }

    /// Starts an operator-level repartition of `op` moving each listed
    /// shard to the given executor slot. The round pauses every upstream
    /// executor, drains the operator, migrates state and updates every
    /// upstream routing table, even when `moves` is empty.
    pub fn rc_repartition(&mut self, op: usize, moves: &[(u32, u32)]) -> Result<(), SimError> {
        if self.cfg.policy != PolicyKind::ResourceCentric {
            return Err(SimError::WrongPolicy {
                expected: PolicyKind::ResourceCentric,
                actual: self.cfg.policy,
            });
        }
        let OpRouting::Shards(table) = &self.ops[op].routing else {
            return Err(SimError::Config(format!("operator {op} is not repartitionable")));
        };
        let slots = self.ops[op].execs.len() as u32;
        for &(s, to) in moves {
            if s as usize >= table.len() || to >= slots {
                return Err(SimError::Config(format!("bad move of shard {s} to slot {to}")));
            }
        }
        if self.ops[op].rc.is_some() {
            return Err(SimError::RepartitionBusy(op));
        }
        let upstream = self.upstream_executors(op);
        self.ops[op].rc = Some(RcRound {
            phase: RcPhase::Pausing,
            moves: moves.to_vec(),
            upstream,
        });
        if upstream == 0 {
            self.ops[op].rc.as_mut().expect("set").phase = RcPhase::Draining;
            return self.check_barrier(op);
        }
        let rtt = self.cfg.cost.rc_sync_rtt;
        self.push(
            self.now + rtt,
            EventKind::ControlTuple {
                op: op as u32,
                step: RcStep::Paused(0),
            },
        );
        Ok(())
    }

    pub fn rc_phase(&self, op: usize) -> Option<RcPhase> {
        self.ops[op].rc.as_ref().map(|r| r.phase)
    }

    pub(super) fn on_rc_step(&mut self, op: usize, step: RcStep) -> Result<(), SimError> {
        let rtt = self.cfg.cost.rc_sync_rtt;
        let upstream = self.ops[op].rc.as_ref().map_or(0, |r| r.upstream);
        match step {
            RcStep::Paused(i) => {
                self.sync_message();
                self.rc_log(PEvent::UpstreamPause, op);
                if i + 1 < upstream {
                    let next = EventKind::ControlTuple {
                        op: op as u32,
                        step: RcStep::Paused(i + 1),
                    };
                    self.push(self.now + rtt, next);
                } else {
                    self.ops[op].rc.as_mut().expect("round").phase = RcPhase::Draining;
                    self.check_barrier(op)?;
                }
            }
            RcStep::MigrationDone => self.rc_migrate(op)?,
            RcStep::Updated(i) => {
                self.sync_message();
                self.rc_log(PEvent::UpstreamRoutingUpdate, op);
                if i + 1 < upstream {
                    let next = EventKind::ControlTuple {
                        op: op as u32,
                        step: RcStep::Updated(i + 1),
                    };
                    self.push(self.now + rtt, next);
                } else {
                    self.rc_resume(op);
                }
            }
        }
        Ok(())
    }

    /// Enters the migration step once the operator holds no tuple at all.
    pub(super) fn check_barrier(&mut self, op: usize) -> Result<(), SimError> {
        if self.ops[op].rc.as_ref().map(|r| r.phase) != Some(RcPhase::Draining) {
            return Ok(());
        }
        if self.ops[op].in_transit > 0 {
            return Ok(());
        }
        let busy = self.ops[op].execs.iter().any(|&e| {
            let ex = self.execs[e as usize].ex.as_ref().expect("executor");
            ex.queued_tuples() > 0 || ex.busy_tasks() > 0
        });
        if busy {
            return Ok(());
        }
        self.rc_log(PEvent::BarrierReached, op);
        let o = &mut self.ops[op];
        let OpRouting::Shards(table) = &o.routing else { unreachable!() };
        let round = o.rc.as_mut().expect("round");
        round.phase = RcPhase::Migrating;
        let moved = round.moves.iter().filter(|(s, to)| table[*s as usize] != *to).count();
        let bytes = if o.stateless { 0 } else { moved as u64 * self.cfg.shard_state_bytes };
        let at = if bytes == 0 {
            self.now
        } else {
            self.now + self.cfg.cost.migration_time(bytes)
        };
        self.push(
            at,
            EventKind::ControlTuple {
                op: op as u32,
                step: RcStep::MigrationDone,
            },
        );
        Ok(())
    }

    fn rc_migrate(&mut self, op: usize) -> Result<(), SimError> {
        let moves = self.ops[op].rc.as_ref().expect("round").moves.clone();
        for (s, to) in moves {
            let OpRouting::Shards(table) = &mut self.ops[op].routing else { unreachable!() };
            let from = table[s as usize];
            if from == to {
                continue;
            }
            table[s as usize] = to;
            let (src, dst) = (self.ops[op].execs[from as usize], self.ops[op].execs[to as usize]);
            let load = {
                let ex = self.execs[src as usize].ex.as_mut().expect("executor");
                let w = ex.stats().workload(s);
                ex.stats_mut().set_workload(s, 0.0);
                if ex.is_stateless() {
                    None
                } else {
                    Some((ex.take_shard_state(s)?, w))
                }
            };
            let ex = self.execs[dst as usize].ex.as_mut().expect("executor");
            if let Some((state, w)) = load {
                ex.put_shard_state(s, state);
                ex.stats_mut().set_workload(s, w);
                let bytes = self.cfg.shard_state_bytes;
                self.rc_migrated += bytes;
                self.acc.record(MetricEvent::Migrated { bytes });
            }
        }
        self.ops[op].rc.as_mut().expect("round").phase = RcPhase::Updating;
        let upstream = self.ops[op].rc.as_ref().expect("round").upstream;
        if upstream == 0 {
            self.rc_resume(op);
        } else {
            let at = self.now + self.cfg.cost.rc_sync_rtt;
            self.push(
                at,
                EventKind::ControlTuple {
                    op: op as u32,
                    step: RcStep::Updated(0),
                },
            );
        }
        Ok(())
    }

    /// Resumes upstream executors and replays held input in arrival order.
    fn rc_resume(&mut self, op: usize) {
        self.ops[op].rc = None;
        self.trace.totals.repartitions += 1;
        self.rc_log(PEvent::UpstreamResume, op);
        let held = std::mem::take(&mut self.ops[op].held);
        for (tuple, from) in held {
            self.transfer(from, op as u32, tuple);
        }
    }
}
