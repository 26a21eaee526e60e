use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::executor::{DEFAULT_SHARD_STATE_BYTES, DEFAULT_THETA};
use crate::metrics::{DEFAULT_ALPHA, DEFAULT_WINDOW};
use crate::model::{ServiceMode, TopologySpec};
use crate::scheduler::SchedulerConfig;
use crate::workload::WorkloadConfig;

use super::SimError;

fn d_latency() -> f64 {
    0.0005
}
fn d_bandwidth() -> f64 {
    1e9 / 8.0
}
fn d_rtt() -> f64 {
    0.05
}
fn d_ser() -> f64 {
    1e-9
}

/// Simulated costs of moving data and control messages around.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// One-way latency per message (s).
    #[serde(default = "d_latency")]
    pub network_latency: f64,
    /// Per-node link bandwidth (bytes/s).
    #[serde(default = "d_bandwidth")]
    pub bandwidth: f64,
    /// Round trip of one synchronization message to an upstream executor
    /// during operator-level repartitioning (s).
    #[serde(default = "d_rtt")]
    pub rc_sync_rtt: f64,
    /// Serialization cost (s/byte).
    #[serde(default = "d_ser")]
    pub serialization_per_byte: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            network_latency: d_latency(),
            bandwidth: d_bandwidth(),
            rc_sync_rtt: d_rtt(),
            serialization_per_byte: d_ser(),
        }
    }
}

impl CostModel {
    /// Time to ship `bytes` of state between nodes.
    pub fn migration_time(&self, bytes: u64) -> f64 {
        bytes as f64 / self.bandwidth + self.network_latency
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PolicyKind {
    #[serde(rename = "static")]
    Static,
    #[serde(rename = "rc", alias = "resource_centric")]
    ResourceCentric,
    #[serde(rename = "ec", alias = "executor_centric")]
    ExecutorCentric,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 3] = [PolicyKind::Static, PolicyKind::ResourceCentric, PolicyKind::ExecutorCentric];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Static => "static",
            PolicyKind::ResourceCentric => "rc",
            PolicyKind::ExecutorCentric => "ec",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "static" => Ok(PolicyKind::Static),
            "rc" | "resource_centric" => Ok(PolicyKind::ResourceCentric),
            "ec" | "executor_centric" => Ok(PolicyKind::ExecutorCentric),
            other => Err(format!("unknown policy `{other}` (expected static, rc or ec)")),
        }
    }
}

fn d_nodes() -> u32 {
    8
}
fn d_cores() -> u32 {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    #[serde(default = "d_nodes")]
    pub nodes: u32,
    #[serde(default = "d_cores")]
    pub cores_per_node: u32,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            nodes: d_nodes(),
            cores_per_node: d_cores(),
        }
    }
}

fn d_policy() -> PolicyKind {
    PolicyKind::ExecutorCentric
}
fn d_duration() -> f64 {
    60.0
}
fn d_window() -> f64 {
    DEFAULT_WINDOW
}
fn d_alpha() -> f64 {
    DEFAULT_ALPHA
}
fn d_theta() -> f64 {
    DEFAULT_THETA
}
fn d_state() -> u64 {
    DEFAULT_SHARD_STATE_BYTES
}
fn d_pending() -> Option<u64> {
    Some(4096)
}

/// One simulation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub topology: TopologySpec,
    #[serde(default)]
    pub workload: WorkloadConfig,
    #[serde(default)]
    pub cluster: ClusterConfig,
    #[serde(default)]
    pub scheduler: SchedulerConfig,
    #[serde(default)]
    pub cost: CostModel,
    #[serde(default = "d_policy")]
    pub policy: PolicyKind,
    /// Logical seconds to simulate.
    #[serde(default = "d_duration")]
    pub duration: f64,
    /// Metrics window (s).
    #[serde(default = "d_window")]
    pub window: f64,
    #[serde(default = "d_alpha")]
    pub ewma_alpha: f64,
    /// θ.
    #[serde(default = "d_theta")]
    pub theta: f64,
    #[serde(default = "d_state")]
    pub shard_state_bytes: u64,
    /// Cap on tuples alive in the engine; the source blocks at the cap.
    #[serde(default = "d_pending")]
    pub max_pending: Option<u64>,
    #[serde(default)]
    pub service: ServiceMode,
    /// Stop the source after this many tuples.
    #[serde(default)]
    pub max_tuples: Option<u64>,
    /// Keep every protocol event in the trace.
    #[serde(default)]
    pub record_protocol: bool,
    /// Count delivered tuples per (operator, key).
    #[serde(default)]
    pub track_keys: bool,
    /// Run the scheduler (elastic policies only).
    #[serde(default = "yes")]
    pub scheduling: bool,
}

fn yes() -> bool {
    true
}

impl SimConfig {
    pub fn new(topology: TopologySpec, policy: PolicyKind) -> Self {
        Self {
            topology,
            workload: WorkloadConfig::default(),
            cluster: ClusterConfig::default(),
            scheduler: SchedulerConfig::default(),
            cost: CostModel::default(),
            policy,
            duration: d_duration(),
            window: d_window(),
            ewma_alpha: d_alpha(),
            theta: d_theta(),
            shard_state_bytes: d_state(),
            max_pending: d_pending(),
            service: ServiceMode::default(),
            max_tuples: None,
            record_protocol: false,
            track_keys: false,
            scheduling: true,
        }
    }

    pub fn seed(&self) -> u64 {
        self.workload.seed
    }

    /// λ₀ from the workload, else from the topology.
    pub fn source_rate(&self) -> f64 {
        self.workload.source_rate.unwrap_or(self.topology.source_rate)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |field: &str, why: &str| Err(SimError::Config(format!("{field}: {why}")));
        self.workload
            .validate()
            .map_err(|e| SimError::Config(e.to_string()))?;
        if !(self.duration > 0.0) {
            return bad("duration", "must be > 0");
        }
        if !(self.window > 0.0) {
            return bad("window", "must be > 0");
        }
        if !(self.ewma_alpha > 0.0 && self.ewma_alpha <= 1.0) {
            return bad("ewma_alpha", "must be in (0, 1]");
        }
        if !(self.theta > 1.0) {
            return bad("theta", "must be > 1");
        }
        if self.cluster.nodes == 0 || self.cluster.cores_per_node == 0 {
            return bad("cluster", "needs at least one node and one core per node");
        }
        let c = &self.cost;
        for (name, v) in [
            ("cost.network_latency", c.network_latency),
            ("cost.rc_sync_rtt", c.rc_sync_rtt),
            ("cost.serialization_per_byte", c.serialization_per_byte),
        ] {
            if !(v >= 0.0) {
                return bad(name, "must be >= 0");
            }
        }
        if !(c.bandwidth > 0.0) {
            return bad("cost.bandwidth", "must be > 0");
        }
        if !(self.scheduler.period > 0.0) {
            return bad("scheduler.period", "must be > 0");
        }
        if !(self.scheduler.latency_target > 0.0) {
            return bad("scheduler.latency_target", "must be > 0");
        }
        if self.max_pending == Some(0) {
            return bad("max_pending", "must be >= 1");
        }
        Ok(())
    }
}
