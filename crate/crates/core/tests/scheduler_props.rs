use proptest::prelude::*;

use shardflow_core::scheduler::{
    allocate, assign_adaptive, pipeline_latency, transition_cost, Allocation, AllocationVector, AssignmentMatrix,
    ClusterSpec, MetricsSnapshot, SchedulerConfig,
};

#[derive(Debug, Clone)]
struct Case {
    cluster: ClusterSpec,
    prev: AssignmentMatrix,
    k: AllocationVector,
    snap: MetricsSnapshot,
}

fn case() -> impl Strategy<Value = Case> {
    (1usize..4, 1usize..5)
        .prop_flat_map(|(n, m)| {
            (
                prop::collection::vec(1u32..6, n),
                prop::collection::vec(0usize..n, m),
                prop::collection::vec(prop::collection::vec(0u32..4, m), n),
                prop::collection::vec(1u32..5, m),
                prop::collection::vec(0.0f64..4e6, m),
                prop::collection::vec(1.0f64..1e6, m),
            )
        })
        .prop_filter_map("needs enough cores", |(cores, local, rows, want, data, state)| {
            let n = cores.len();
            let m = local.len();
            // clip the previous layout to node capacity
            let mut rows = rows;
            for i in 0..n {
                let mut left = cores[i];
                for v in rows[i].iter_mut() {
                    *v = (*v).min(left);
                    left -= *v;
                }
            }
            let total: u32 = cores.iter().sum();
            let mut k = want;
            while k.iter().sum::<u32>() > total {
                let j = (0..m).max_by_key(|&j| k[j]).unwrap();
                if k[j] == 1 {
                    return None;
                }
                k[j] -= 1;
            }
            let prev = AssignmentMatrix::from_rows(&rows, local);
            let snap = MetricsSnapshot {
                source_rate: 1.0,
                arrival_rate: vec![1.0; m],
                service_rate: vec![1.0; m],
                state_bytes: state,
                data_rate: data,
                cores: (0..m).map(|j| prev.total(j).max(1)).collect(),
            };
            Some(Case {
                cluster: ClusterSpec { cores },
                prev,
                k: AllocationVector(k),
                snap,
            })
        })
}

fn snapshot() -> impl Strategy<Value = MetricsSnapshot> {
    prop::collection::vec((1.0f64..500.0, 20.0f64..200.0), 1..5).prop_map(|v| {
        let arrival: Vec<f64> = v.iter().map(|p| p.0).collect();
        MetricsSnapshot {
            source_rate: arrival[0],
            service_rate: v.iter().map(|p| p.1).collect(),
            state_bytes: vec![0.0; v.len()],
            data_rate: vec![0.0; v.len()],
            cores: vec![1; v.len()],
            arrival_rate: arrival,
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(400))]

    #[test]
    fn assignment_respects_constraints(c in case()) {
        let out = assign_adaptive(&c.k, &c.prev, &c.cluster, 512.0 * 1024.0, &c.snap).unwrap();
        let x = &out.assignment;
        for i in 0..c.cluster.nodes() {
            prop_assert!(x.node_load(i) <= c.cluster.cores[i]);
        }
        for j in 0..c.k.0.len() {
            prop_assert_eq!(x.total(j), c.k.0[j]);
            if c.snap.intensity(j) > out.phi {
                prop_assert_eq!(x.get(x.local_node(j), j), x.total(j));
            }
        }
    }

    #[test]
    fn transition_cost_is_non_negative_and_zero_on_identity(a in case(), b in case()) {
        let s = &a.snap.state_bytes;
        prop_assert_eq!(transition_cost(&a.prev, &a.prev, s).unwrap(), 0.0);
        if a.prev.nodes() == b.prev.nodes() && a.prev.executors() == b.prev.executors() {
            prop_assert!(transition_cost(&a.prev, &b.prev, s).unwrap() >= 0.0);
        }
    }

    #[test]
    fn allocation_meets_target_when_it_says_so(snap in snapshot(), t in 0.006f64..0.2, budget in 1u32..40) {
        let cfg = SchedulerConfig { latency_target: t, ..SchedulerConfig::default() };
        let got = allocate(&snap, &cfg, budget);
        prop_assert!(got.vector().0.iter().all(|&k| k >= 1));
        if let Allocation::Met(k) = &got {
            prop_assert!(k.total() <= budget);
            prop_assert!(pipeline_latency(k, &snap).unwrap().seconds() <= t);
        }
    }
}
