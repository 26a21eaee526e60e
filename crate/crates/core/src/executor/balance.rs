//! Intra-executor load balancing over shards.

use std::collections::BTreeMap;

use super::{RoutingTable, ShardMove, ShardStats, TaskId, TaskRef};

/// Per-task workload (CPU-seconds per window).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LoadStats {
    pub task_loads: Vec<(TaskId, f64)>,
}

impl LoadStats {
    pub fn from_loads(loads: impl IntoIterator<Item = (TaskId, f64)>) -> Self {
        Self {
            task_loads: loads.into_iter().collect(),
        }
    }

    /// Sums shard workloads per task. Tasks without shards count as zero.
    pub fn from_shards(stats: &ShardStats, table: &RoutingTable, tasks: &[TaskRef]) -> Self {
        let mut loads: BTreeMap<TaskId, f64> = tasks.iter().map(|t| (t.id, 0.0)).collect();
        for shard in 0..table.shards() {
            if let Some(l) = loads.get_mut(&table.task_of(shard)) {
                *l += stats.workload(shard);
            }
        }
        Self::from_loads(loads)
    }

    pub fn imbalance(&self) -> f64 {
        imbalance_of(self.task_loads.iter().map(|(_, l)| *l))
    }
}

/// δ = max / mean, and 1 when the total is zero.
pub fn imbalance(load: &LoadStats) -> f64 {
    load.imbalance()
}

pub fn imbalance_of(loads: impl IntoIterator<Item = f64>) -> f64 {
    let (mut max, mut sum, mut n) = (0.0f64, 0.0, 0usize);
    for l in loads {
        max = max.max(l);
        sum += l;
        n += 1;
    }
    if n == 0 || sum <= 0.0 {
        return 1.0;
    }
    (max / (sum / n as f64)).max(1.0)
}

struct Balancer {
    tasks: Vec<TaskRef>,
    loads: Vec<f64>,
    /// Shards per task slot, ascending shard id.
    shards: Vec<Vec<u32>>,
    total: f64,
}

impl Balancer {
    fn new(stats: &ShardStats, table: &RoutingTable, tasks: &[TaskRef], frozen: &[u32]) -> Self {
        let mut tasks = tasks.to_vec();
        tasks.sort_by_key(|t| t.id);
        let mut loads = vec![0.0; tasks.len()];
        let mut shards = vec![Vec::new(); tasks.len()];
        let slot = |id: TaskId| tasks.iter().position(|t| t.id == id);
        for shard in 0..table.shards() {
            if frozen.contains(&shard) {
                continue;
            }
            if let Some(s) = slot(table.task_of(shard)) {
                loads[s] += stats.workload(shard);
                shards[s].push(shard);
            }
        }
        let total = loads.iter().sum();
        Self {
            tasks,
            loads,
            shards,
            total,
        }
    }

    fn mean(&self) -> f64 {
        self.total / self.loads.len() as f64
    }

    fn delta(&self) -> f64 {
        imbalance_of(self.loads.iter().copied())
    }

    /// Heaviest and lightest slots, lowest id on ties.
    fn extremes(&self) -> (usize, usize) {
        let mut hi = 0;
        let mut lo = 0;
        for s in 1..self.loads.len() {
            if self.loads[s] > self.loads[hi] {
                hi = s;
            }
            if self.loads[s] < self.loads[lo] {
                lo = s;
            }
        }
        (hi, lo)
    }

    fn delta_after(&self, from: usize, to: usize, w: f64) -> f64 {
        let mut max = 0.0f64;
        for (s, &l) in self.loads.iter().enumerate() {
            let l = if s == from {
                l - w
            } else if s == to {
                l + w
            } else {
                l
            };
            max = max.max(l);
        }
        (max / self.mean()).max(1.0)
    }

    fn apply(&mut self, from: usize, to: usize, shard: u32, w: f64) -> ShardMove {
        self.loads[from] -= w;
        self.loads[to] += w;
        self.shards[from].retain(|&s| s != shard);
        let pos = self.shards[to].partition_point(|&s| s < shard);
        self.shards[to].insert(pos, shard);
        let (src, dst) = (&self.tasks[from], &self.tasks[to]);
        ShardMove {
            shard,
            source: src.id,
            destination: dst.id,
            requires_migration: src.process != dst.process,
        }
    }
}

/// Refines the shard-to-task assignment in rounds until δ ≤ θ.
///
/// Each round only considers moving one shard from the most loaded task to
/// the least loaded one and picks the shard that lowers δ the most (ties:
/// lowest shard id). Stops at δ ≤ θ, when no candidate strictly lowers δ,
/// or after `z` rounds. Moves are returned in execution order.
pub fn plan_rebalance(stats: &ShardStats, table: &RoutingTable, tasks: &[TaskRef], theta: f64) -> Vec<ShardMove> {
    plan_rebalance_excluding(stats, table, tasks, theta, &[])
}

/// [`plan_rebalance`] with some shards pinned in place (e.g. in flight).
pub fn plan_rebalance_excluding(
    stats: &ShardStats,
    table: &RoutingTable,
    tasks: &[TaskRef],
    theta: f64,
    frozen: &[u32],
) -> Vec<ShardMove> {
    let mut moves = Vec::new();
    if tasks.len() < 2 {
        return moves;
    }
    let mut b = Balancer::new(stats, table, tasks, frozen);
    if b.total <= 0.0 {
        return moves;
    }
    for _ in 0..table.shards() {
        let delta = b.delta();
        if delta <= theta {
            break;
        }
        let (hi, lo) = b.extremes();
        if hi == lo {
            break;
        }
        let mut best: Option<(u32, f64)> = None;
        for &shard in &b.shards[hi] {
            let after = b.delta_after(hi, lo, stats.workload(shard));
            // Incremental loads drift by a few ulps; ignore gains below that.
            if after < delta * (1.0 - 1e-9) && best.map_or(true, |(_, d)| after < d) {
                best = Some((shard, after));
            }
        }
        let Some((shard, _)) = best else { break };
        moves.push(b.apply(hi, lo, shard, stats.workload(shard)));
    }
    moves
}

/// Empties `leaving` onto the surviving tasks: its shards, heaviest first
/// (ties: lowest id), each go to the currently least loaded survivor.
pub fn plan_drain(stats: &ShardStats, table: &RoutingTable, tasks: &[TaskRef], leaving: TaskId) -> Vec<ShardMove> {
    let Some(src) = tasks.iter().find(|t| t.id == leaving).copied() else {
        return Vec::new();
    };
    let survivors: Vec<TaskRef> = tasks.iter().filter(|t| t.id != leaving).copied().collect();
    if survivors.is_empty() {
        return Vec::new();
    }
    let mut loads: Vec<f64> = vec![0.0; survivors.len()];
    for shard in 0..table.shards() {
        if let Some(s) = survivors.iter().position(|t| t.id == table.task_of(shard)) {
            loads[s] += stats.workload(shard);
        }
    }
    let mut mine: Vec<u32> = (0..table.shards()).filter(|&s| table.task_of(s) == leaving).collect();
    mine.sort_by(|&a, &b| stats.workload(b).total_cmp(&stats.workload(a)).then(a.cmp(&b)));
    mine.into_iter()
        .map(|shard| {
            let mut lo = 0;
            for s in 1..loads.len() {
                if loads[s] < loads[lo] || (loads[s] == loads[lo] && survivors[s].id < survivors[lo].id) {
                    lo = s;
                }
            }
            loads[lo] += stats.workload(shard);
            let dst = survivors[lo];
            ShardMove {
                shard,
                source: src.id,
                destination: dst.id,
                requires_migration: src.process != dst.process,
            }
        })
        .collect()
}

/// Collapses a move list so each shard moves at most once, from its
/// original task to its final one. Order follows first appearance.
pub fn net_moves(moves: &[ShardMove], tasks: &[TaskRef]) -> Vec<ShardMove> {
    let mut out: Vec<ShardMove> = Vec::new();
    for mv in moves {
        if let Some(existing) = out.iter_mut().find(|m| m.shard == mv.shard) {
            existing.destination = mv.destination;
        } else {
            out.push(*mv);
        }
    }
    let process = |id: TaskId| tasks.iter().find(|t| t.id == id).map(|t| t.process);
    out.retain(|m| m.source != m.destination);
    for m in &mut out {
        m.requires_migration = process(m.source) != process(m.destination);
    }
    out
}
