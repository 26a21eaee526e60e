use std::collections::BTreeMap;

use proptest::prelude::*;

use shardflow_core::executor::{
    imbalance_of, plan_rebalance, CoreId, ElasticExecutor, ExecutorConfig, ExecutorError, MigrationStep, NodeId,
    ProcessId, QueueItem, RoutingTable, ShardMove, ShardStats, StateUpdate, TaskId, TaskRef,
};
use shardflow_core::model::Tuple;

fn core(node: u32, slot: u32) -> CoreId {
    CoreId { node: NodeId(node), slot }
}

fn task(id: u32) -> TaskRef {
    TaskRef {
        id: TaskId(id),
        core: core(0, id),
        process: ProcessId(0),
        local: true,
    }
}

fn delta(assign: &[TaskId], loads: &[f64], n: usize) -> f64 {
    let mut per = vec![0.0; n];
    for (s, w) in loads.iter().enumerate() {
        per[assign[s].0 as usize] += w;
    }
    imbalance_of(per)
}

fn layout() -> impl Strategy<Value = (usize, Vec<f64>, Vec<u32>)> {
    (2usize..6, 2usize..40).prop_flat_map(|(n, z)| {
        (
            Just(n),
            prop::collection::vec(prop_oneof![Just(0.0), 0.0f64..10.0], z),
            prop::collection::vec(0..n as u32, z),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn every_move_strictly_lowers_imbalance((n, loads, owner) in layout(), theta in 1.0f64..1.5) {
        let z = loads.len() as u32;
        let mut stats = ShardStats::new(z, 0, 1.0);
        for (s, &w) in loads.iter().enumerate() {
            stats.set_workload(s as u32, w);
        }
        let mut assign: Vec<TaskId> = owner.iter().map(|&t| TaskId(t)).collect();
        let table = RoutingTable::from_assignment(assign.clone());
        let tasks: Vec<TaskRef> = (0..n as u32).map(task).collect();
        let start = delta(&assign, &loads, n);
        prop_assert!(start >= 1.0);
        let plan = plan_rebalance(&stats, &table, &tasks, theta);
        if start <= theta {
            prop_assert!(plan.is_empty());
        }
        let mut d = start;
        for mv in &plan {
            prop_assert_ne!(mv.source, mv.destination);
            prop_assert_eq!(assign[mv.shard as usize], mv.source);
            assign[mv.shard as usize] = mv.destination;
            let next = delta(&assign, &loads, n);
            prop_assert!(next < d && next >= 1.0);
            d = next;
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Send(u64),
    Step(u8),
    Move(u32, u8),
    Finish(u8),
    Add(u8),
    Remove(u8),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        6 => (0u64..40).prop_map(Op::Send),
        5 => any::<u8>().prop_map(Op::Step),
        2 => (0u32..16, any::<u8>()).prop_map(|(s, d)| Op::Move(s, d)),
        1 => any::<u8>().prop_map(Op::Finish),
        1 => any::<u8>().prop_map(Op::Add),
        1 => any::<u8>().prop_map(Op::Remove),
    ]
}

struct Run {
    ex: ElasticExecutor,
    migrating: Vec<u32>,
    last: BTreeMap<u64, u64>,
    violations: u64,
}

impl Run {
    fn step(&mut self, task: TaskId) -> Result<bool, ExecutorError> {
        let Some(item) = self.ex.next_item(task) else { return Ok(false) };
        match item {
            QueueItem::Tuple(tp) => {
                if self.last.get(&tp.key).is_some_and(|&l| tp.seq < l) {
                    self.violations += 1;
                }
                self.last.insert(tp.key, tp.seq);
                self.ex.state_apply(task, tp.key, StateUpdate::Observe { seq: tp.seq })?;
            }
            QueueItem::Label { shard } => match self.ex.label_reached(shard, 0.0)? {
                MigrationStep::Local => {
                    self.ex.complete_move(shard, 0.0)?;
                }
                MigrationStep::Transfer { .. } => self.migrating.push(shard),
            },
        }
        Ok(true)
    }
}

fn pick<T: Copy>(v: &[T], i: u8) -> T {
    v[i as usize % v.len()]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn random_schedules_keep_order_and_state(ops in prop::collection::vec(op(), 1..400)) {
        // two nodes, so added cores may open a second process
        let all: Vec<CoreId> = (0..2).flat_map(|n| (0..3).map(move |s| core(n, s))).collect();
        let cfg = ExecutorConfig { shards: 16, ..Default::default() };
        let mut run = Run {
            ex: ElasticExecutor::new(0, NodeId(0), cfg, &all[..1]).unwrap(),
            migrating: Vec::new(),
            last: BTreeMap::new(),
            violations: 0,
        };
        let mut sent: BTreeMap<u64, u64> = BTreeMap::new();
        let mut seq = 0;
        for op in ops {
            let tasks: Vec<TaskId> = run.ex.tasks().map(|t| t.id).collect();
            match op {
                Op::Send(key) => {
                    run.ex.dispatch(Tuple::new(key, seq, 64, 0.0)).unwrap();
                    *sent.entry(key).or_insert(0) += 1;
                    seq += 1;
                }
                Op::Step(i) => {
                    run.step(pick(&tasks, i)).unwrap();
                }
                Op::Move(shard, d) => {
                    let active: Vec<TaskRef> = run.ex.active_tasks();
                    let src = run.ex.routing().task_of(shard);
                    let dst = pick(&active, d);
                    let mv = ShardMove { shard, source: src, destination: dst.id, requires_migration: false };
                    let local_before = run.ex.counters().intra_process_bytes;
                    match run.ex.begin_move(mv, 0.0) {
                        Ok(()) => prop_assert!(src != dst.id && !run.ex.is_retiring(dst.id)),
                        Err(ExecutorError::InvalidMove { .. } | ExecutorError::ShardInFlight(_)) => {}
                        Err(e) => return Err(TestCaseError::fail(e.to_string())),
                    }
                    prop_assert_eq!(run.ex.counters().intra_process_bytes, local_before);
                }
                Op::Finish(i) => {
                    if !run.migrating.is_empty() {
                        let shard = run.migrating.swap_remove(i as usize % run.migrating.len());
                        run.ex.complete_move(shard, 0.0).unwrap();
                    }
                }
                Op::Add(i) => {
                    let used = run.ex.cores();
                    let free: Vec<CoreId> = all.iter().copied().filter(|c| !used.contains(c)).collect();
                    if !free.is_empty() {
                        run.ex.add_task(pick(&free, i), 0.0).unwrap();
                    }
                }
                Op::Remove(i) => {
                    match run.ex.begin_remove_task(pick(&tasks, i), 0.0) {
                        Ok(_) | Err(ExecutorError::ShardInFlight(_) | ExecutorError::LastTask) => {}
                        Err(ExecutorError::InvalidMove { .. } | ExecutorError::UnknownTask(_)) => {}
                        Err(e) => return Err(TestCaseError::fail(e.to_string())),
                    }
                }
            }
            for shard in 0..16 {
                let owners = run.ex.owners_of(shard).len();
                prop_assert!(owners == 1 || (owners == 0 && run.ex.is_in_flight(shard)));
            }
        }
        // drain everything
        loop {
            let mut progressed = false;
            for t in run.ex.tasks().map(|t| t.id).collect::<Vec<_>>() {
                while run.step(t).unwrap() {
                    progressed = true;
                }
            }
            for shard in std::mem::take(&mut run.migrating) {
                progressed = true;
                run.ex.complete_move(shard, 0.0).unwrap();
            }
            if !progressed {
                break;
            }
        }
        prop_assert_eq!(run.violations, 0);
        prop_assert_eq!(run.ex.in_flight(), 0);
        let mut counted: BTreeMap<u64, u64> = BTreeMap::new();
        for store in run.ex.stores() {
            prop_assert_eq!(store.order_violations(), 0);
            for (k, v) in store.key_states() {
                *counted.entry(k).or_insert(0) += v.count;
            }
        }
        prop_assert_eq!(counted, sent);
        for shard in 0..16 {
            prop_assert_eq!(run.ex.owners_of(shard).len(), 1);
        }
        let c = run.ex.counters();
        prop_assert_eq!(c.intra_process_bytes, 0);
        if c.remote_moves == 0 {
            prop_assert_eq!(c.migrated_bytes, 0);
        }
    }
}
