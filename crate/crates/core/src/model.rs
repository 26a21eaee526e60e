//! Topology model, key space and the two hash tiers shared by every policy.
//!
//! Keys are 64-bit integers. The executor tier maps a key to one of the `y`
//! executors of an operator and never changes during a run under the
//! executor-centric policy. The shard tier splits an executor's key subspace
//! into `z` mini-partitions that can be moved between tasks.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Salt XOR-ed into the key before hashing on the shard tier.
pub const SHARD_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// FNV-1a, 64-bit.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Static operator-level partitioning: `FNV1a64(le_bytes(key)) mod y`.
pub fn hash_key_to_executor(key: u64, y: u32) -> u32 {
    assert!(y >= 1, "executor count must be positive");
    (fnv1a64(&key.to_le_bytes()) % u64::from(y)) as u32
}

/// Shard tier: the salted key is hashed and the high half folded into the
/// low half before the modulo.
///
/// FNV-1a's low bits depend only on the low bits of each input byte, so
/// without the fold a power-of-two `z` would be correlated with a
/// power-of-two executor count and most shards of an executor would stay
/// empty.
pub fn hash_key_to_shard(key: u64, z: u32) -> u32 {
    assert!(z >= 1, "shard count must be positive");
    let h = fnv1a64(&(key ^ SHARD_SALT).to_le_bytes());
    ((h ^ (h >> 32)) % u64::from(z)) as u32
}

/// Pre-hashes a string key into the 64-bit key domain.
pub fn string_key(key: &str) -> u64 {
    fnv1a64(key.as_bytes())
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("topology contains a cycle through operator `{0}`")]
    CycleDetected(String),
    #[error("edge {from} -> {to} references an undeclared operator")]
    DanglingEdge { from: String, to: String },
    #[error("operator `{operator}`: {field} must be positive (got {value})")]
    NonPositiveParameter {
        operator: String,
        field: &'static str,
        value: f64,
    },
    #[error("operator `{0}` declared twice")]
    DuplicateOperator(String),
    #[error("topology has no operators")]
    Empty,
    #[error("invalid topology document: {0}")]
    Parse(String),
}

/// How per-tuple CPU cost is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ServiceMode {
    /// Exponential with mean `cpu_cost_per_tuple` (M/M/k assumption).
    #[default]
    Exponential,
    /// Exactly `cpu_cost_per_tuple`; used by protocol tests.
    Fixed,
}

fn default_shards() -> u32 {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorSpec {
    pub id: String,
    /// y: number of executors.
    pub executor_count: u32,
    /// z: shards per executor.
    #[serde(default = "default_shards")]
    pub shards_per_executor: u32,
    /// Mean CPU seconds per tuple.
    pub cpu_cost_per_tuple: f64,
    /// Expected output tuples per input tuple.
    #[serde(default)]
    pub output_selectivity: f64,
    #[serde(default)]
    pub output_tuple_bytes: u64,
    /// Stateless operators dispatch from one shared executor queue to any
    /// idle task instead of routing by shard.
    #[serde(default)]
    pub stateless: bool,
}

impl OperatorSpec {
    pub fn new(id: impl Into<String>, executor_count: u32, cpu_cost_per_tuple: f64) -> Self {
        Self {
            id: id.into(),
            executor_count,
            shards_per_executor: default_shards(),
            cpu_cost_per_tuple,
            output_selectivity: 0.0,
            output_tuple_bytes: 0,
            stateless: false,
        }
    }
}

/// Dataflow graph as written in a config document.
///
/// Operators without incoming edges are sources: they are fed by the
/// workload generator and forward tuples without consuming scheduled cores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologySpec {
    pub operators: Vec<OperatorSpec>,
    #[serde(default)]
    pub edges: Vec<(String, String)>,
    /// λ₀ in tuples per second.
    #[serde(default)]
    pub source_rate: f64,
}

impl TopologySpec {
    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        serde_json::from_str(text).map_err(|e| ModelError::Parse(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("topology serializes")
    }
}

/// A data tuple flowing through the simulated engine.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tuple {
    pub key: u64,
    /// Arrival sequence number; the source numbers tuples globally and the
    /// simulator renumbers them by arrival at each operator.
    pub seq: u64,
    pub payload_bytes: u64,
    /// Logical seconds at which the source emitted the root tuple.
    pub created_at: f64,
    /// Operators traversed so far.
    pub hops: u16,
}

impl Tuple {
    pub fn new(key: u64, seq: u64, payload_bytes: u64, created_at: f64) -> Self {
        debug_assert!(created_at >= 0.0);
        Self {
            key,
            seq,
            payload_bytes,
            created_at,
            hops: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OperatorIdx(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ExecutorIdx(pub usize);

impl fmt::Display for ExecutorIdx {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}", self.0)
    }
}

/// Executor-tier and shard-tier partitioning of one operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyPartition {
    pub operator: OperatorIdx,
    pub executors: u32,
    pub shards_per_executor: u32,
}

impl KeyPartition {
    pub fn executor_of(&self, key: u64) -> u32 {
        hash_key_to_executor(key, self.executors)
    }

    pub fn shard_of(&self, key: u64) -> u32 {
        hash_key_to_shard(key, self.shards_per_executor)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Operator {
    pub idx: OperatorIdx,
    pub spec: OperatorSpec,
    /// Global ids of this operator's executors (dense, contiguous).
    pub executors: std::ops::Range<usize>,
    pub upstream: Vec<OperatorIdx>,
    pub downstream: Vec<OperatorIdx>,
}

impl Operator {
    pub fn is_source(&self) -> bool {
        self.upstream.is_empty()
    }

    pub fn partition(&self) -> KeyPartition {
        KeyPartition {
            operator: self.idx,
            executors: self.spec.executor_count,
            shards_per_executor: self.spec.shards_per_executor,
        }
    }
}

/// A validated topology with dense operator and executor ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub operators: Vec<Operator>,
    pub source_rate: f64,
    /// Operators in topological order.
    pub order: Vec<OperatorIdx>,
}

impl Topology {
    /// m: total executor count over all operators.
    pub fn executor_count(&self) -> usize {
        self.operators.last().map_or(0, |op| op.executors.end)
    }

    pub fn operator(&self, idx: OperatorIdx) -> &Operator {
        &self.operators[idx.0]
    }

    pub fn by_name(&self, id: &str) -> Option<&Operator> {
        self.operators.iter().find(|op| op.spec.id == id)
    }

    pub fn operator_of(&self, exec: ExecutorIdx) -> OperatorIdx {
        self.operators
            .iter()
            .find(|op| op.executors.contains(&exec.0))
            .map(|op| op.idx)
            .expect("executor index in range")
    }

    pub fn sources(&self) -> impl Iterator<Item = &Operator> {
        self.operators.iter().filter(|op| op.is_source())
    }

    pub fn sinks(&self) -> impl Iterator<Item = &Operator> {
        self.operators.iter().filter(|op| op.downstream.is_empty())
    }

    pub fn edges(&self) -> Vec<(OperatorIdx, OperatorIdx)> {
        self.operators
            .iter()
            .flat_map(|op| op.downstream.iter().map(move |d| (op.idx, *d)))
            .collect()
    }
}

fn check_positive(op: &OperatorSpec) -> Result<(), ModelError> {
    let bad = |field: &'static str, value: f64| ModelError::NonPositiveParameter {
        operator: op.id.clone(),
        field,
        value,
    };
    if op.executor_count < 1 {
        return Err(bad("executor_count", f64::from(op.executor_count)));
    }
    if op.shards_per_executor < 1 {
        return Err(bad("shards_per_executor", f64::from(op.shards_per_executor)));
    }
    if !(op.cpu_cost_per_tuple > 0.0) || !op.cpu_cost_per_tuple.is_finite() {
        return Err(bad("cpu_cost_per_tuple", op.cpu_cost_per_tuple));
    }
    if !(op.output_selectivity >= 0.0) || !op.output_selectivity.is_finite() {
        return Err(bad("output_selectivity", op.output_selectivity));
    }
    Ok(())
}

/// Validates a topology document and assigns dense ids.
///
/// Executors are numbered operator by operator in declaration order, so
/// operator `i` owns executors `Σ_{h<i} y_h .. Σ_{h≤i} y_h`.
pub fn validate_topology(spec: &TopologySpec) -> Result<Topology, ModelError> {
    if spec.operators.is_empty() {
        return Err(ModelError::Empty);
    }
    if !(spec.source_rate >= 0.0) || !spec.source_rate.is_finite() {
        return Err(ModelError::NonPositiveParameter {
            operator: "<topology>".into(),
            field: "source_rate",
            value: spec.source_rate,
        });
    }
    let mut index: HashMap<&str, usize> = HashMap::new();
    for (i, op) in spec.operators.iter().enumerate() {
        check_positive(op)?;
        if index.insert(op.id.as_str(), i).is_some() {
            return Err(ModelError::DuplicateOperator(op.id.clone()));
        }
    }
    let n = spec.operators.len();
    let mut downstream: Vec<Vec<OperatorIdx>> = vec![Vec::new(); n];
    let mut upstream: Vec<Vec<OperatorIdx>> = vec![Vec::new(); n];
    for (from, to) in &spec.edges {
        let (Some(&a), Some(&b)) = (index.get(from.as_str()), index.get(to.as_str())) else {
            return Err(ModelError::DanglingEdge {
                from: from.clone(),
                to: to.clone(),
            });
        };
        if !downstream[a].contains(&OperatorIdx(b)) {
            downstream[a].push(OperatorIdx(b));
            upstream[b].push(OperatorIdx(a));
        }
    }

    // Kahn's algorithm; lowest index first keeps the order deterministic.
    let mut indegree: Vec<usize> = upstream.iter().map(Vec::len).collect();
    let mut ready: BTreeMap<usize, ()> = indegree
        .iter()
        .enumerate()
        .filter(|(_, d)| **d == 0)
        .map(|(i, _)| (i, ()))
        .collect();
    let mut order = Vec::with_capacity(n);
    while let Some((&i, _)) = ready.iter().next() {
        ready.remove(&i);
        order.push(OperatorIdx(i));
        for d in &downstream[i] {
            indegree[d.0] -= 1;
            if indegree[d.0] == 0 {
                ready.insert(d.0, ());
            }
        }
    }
    if order.len() != n {
        let stuck = indegree.iter().position(|d| *d > 0).expect("cycle member");
        return Err(ModelError::CycleDetected(spec.operators[stuck].id.clone()));
    }

    let mut next = 0usize;
    let operators = spec
        .operators
        .iter()
        .enumerate()
        .map(|(i, op)| {
            let start = next;
            next += op.executor_count as usize;
            Operator {
                idx: OperatorIdx(i),
                spec: op.clone(),
                executors: start..next,
                upstream: upstream[i].clone(),
                downstream: downstream[i].clone(),
            }
        })
        .collect();

    Ok(Topology {
        operators,
        source_rate: spec.source_rate,
        order,
    })
}
