use proptest::prelude::*;

use shardflow_core::bench::{run_experiment, ExperimentConfig};
use shardflow_core::metrics::{Reservoir, RESERVOIR_SIZE};
use shardflow_core::sim::{ClusterConfig, EventKind, EventQueue, PolicyKind, SimConfig, Simulation};
use shardflow_core::workload::micro_benchmark_topology;

fn small(policy: PolicyKind, seed: u64) -> SimConfig {
    let mut cfg = SimConfig::new(micro_benchmark_topology(2, 4, 32, 0.001, 3000.0), policy);
    cfg.cluster = ClusterConfig { nodes: 2, cores_per_node: 4 };
    cfg.duration = 4.0;
    cfg.workload.key_count = 200;
    cfg.workload.shuffles_per_minute = 16.0;
    cfg.workload.seed = seed;
    cfg
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn queue_pops_in_time_then_insertion_order(times in prop::collection::vec(0u8..20, 1..200)) {
        let mut q = EventQueue::default();
        for &t in &times {
            q.push(f64::from(t) * 0.25, EventKind::Arrival);
        }
        let mut prev: Option<(f64, u64)> = None;
        while let Some(ev) = q.pop() {
            if let Some((t, s)) = prev {
                prop_assert!(t < ev.time || (t == ev.time && s < ev.seq));
            }
            prev = Some((ev.time, ev.seq));
        }
    }

    #[test]
    fn reservoir_never_exceeds_its_bound(n in 0usize..20_000, seed in any::<u64>()) {
        let mut r = Reservoir::new(RESERVOIR_SIZE, seed);
        for i in 0..n {
            r.push(i as f64);
        }
        prop_assert_eq!(r.len(), n.min(RESERVOIR_SIZE));
        prop_assert_eq!(r.seen(), n as u64);
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = small(PolicyKind::ExecutorCentric, 1);
    cfg.workload.key_count = 0;
    assert!(Simulation::new(cfg).is_err());
    let mut cfg = small(PolicyKind::ExecutorCentric, 1);
    cfg.workload.zipf_skew = -0.1;
    assert!(Simulation::new(cfg).is_err());
    let mut cfg = small(PolicyKind::ExecutorCentric, 1);
    cfg.workload.shuffles_per_minute = -1.0;
    assert!(Simulation::new(cfg).is_err());
    let mut cfg = small(PolicyKind::ExecutorCentric, 1);
    cfg.duration = 0.0;
    assert!(Simulation::new(cfg).is_err());
    let mut cfg = small(PolicyKind::ExecutorCentric, 1);
    cfg.topology.operators[1].executor_count = 0;
    assert!(Simulation::new(cfg).is_err());
}

#[test]
fn every_policy_conserves_tuples_and_ownership() {
    for policy in PolicyKind::ALL {
        let mut cfg = small(policy, 7);
        cfg.track_keys = true;
        let mut sim = Simulation::new(cfg).unwrap();
        sim.run_until(4.0).unwrap();
        assert!(sim.drain(60.0).unwrap(), "{policy}");
        assert_eq!(sim.order_violations(), 0, "{policy}");
        assert_eq!(sim.ownership_errors(1), 0, "{policy}");
        assert_eq!(&sim.state_counts(1), sim.delivered_per_key(1), "{policy}");
        let t = &sim.trace().totals;
        assert_eq!(t.tuples_completed, t.tuples_generated, "{policy}");
        // static plans never touch shards
        if policy == PolicyKind::Static {
            assert_eq!(t.local_shard_moves + t.remote_shard_moves, 0);
        }
    }
}

#[test]
fn same_seed_same_trace() {
    for policy in PolicyKind::ALL {
        let a = Simulation::new(small(policy, 3)).unwrap().run().unwrap();
        let b = Simulation::new(small(policy, 3)).unwrap().run().unwrap();
        assert_eq!(a, b, "{policy}");
    }
}

#[test]
fn experiment_output_is_byte_identical() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/smoke.json");
    let mut exp = ExperimentConfig::load(path.as_ref()).unwrap();
    exp.seeds = vec![5];
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_experiment(&exp, a.path(), 2, true).unwrap();
    run_experiment(&exp, b.path(), 1, true).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() >= 7, "{names:?}");
    for name in names {
        let x = std::fs::read(a.path().join(&name)).unwrap();
        let y = std::fs::read(b.path().join(&name)).unwrap();
        assert!(x == y, "{name:?} differs");
    }
}
