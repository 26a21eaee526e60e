//! Core scheduler: how many cores each executor needs (queueing model) and
//! which physical cores they get (migration-cost-aware assignment).

mod assignment;
mod queueing;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use assignment::{
    assign, assign_adaptive, marginal_costs, transition_cost, AdaptiveOutcome, AssignmentMatrix,
    MarginalCosts,
};
pub use queueing::{allocate, erlang_c, mmk_latency, pipeline_latency, Allocation, Latency};

/// 512 KB/s.
pub const DEFAULT_PHI_BASE: f64 = 512.0 * 1024.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchedulerError {
    #[error("source rate λ₀ is zero")]
    ZeroSourceRate,
    #[error("matrix shape mismatch: {0}")]
    Shape(String),
    #[error("requested {requested} cores but the cluster has {available}")]
    Infeasible { requested: u32, available: u32 },
    #[error("executor {0} is allocated no cores")]
    ZeroAllocation(usize),
    #[error("no feasible core transfer at φ = {phi}")]
    Fail { phi: f64 },
}

/// Measured inputs of one scheduling round.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    /// λ₀ (tuples/s).
    pub source_rate: f64,
    /// λ_j (tuples/s).
    pub arrival_rate: Vec<f64>,
    /// μ_j per core (tuples/s); zero while unmeasured.
    pub service_rate: Vec<f64>,
    /// s_j (bytes).
    pub state_bytes: Vec<f64>,
    /// Input plus output bytes per second.
    pub data_rate: Vec<f64>,
    /// Current k_j.
    pub cores: Vec<u32>,
}

impl MetricsSnapshot {
    pub fn executors(&self) -> usize {
        self.arrival_rate.len()
    }

    /// Per-core data intensity: (input + output bytes/s) / k_j.
    pub fn intensity(&self, j: usize) -> f64 {
        let k = self.cores.get(j).copied().unwrap_or(1).max(1);
        self.data_rate.get(j).copied().unwrap_or(0.0) / f64::from(k)
    }
}

/// k: cores per executor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocationVector(pub Vec<u32>);

impl AllocationVector {
    pub fn total(&self) -> u32 {
        self.0.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterSpec {
    /// c_i: core capacity per node.
    pub cores: Vec<u32>,
}

impl ClusterSpec {
    pub fn uniform(nodes: usize, cores_per_node: u32) -> Self {
        Self {
            cores: vec![cores_per_node; nodes],
        }
    }

    pub fn nodes(&self) -> usize {
        self.cores.len()
    }

    pub fn total_cores(&self) -> u32 {
        self.cores.iter().sum()
    }
}

fn default_t_max() -> f64 {
    0.005
}
fn default_phi() -> f64 {
    DEFAULT_PHI_BASE
}
fn default_period() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    /// T_max (s).
    #[serde(default = "default_t_max")]
    pub latency_target: f64,
    /// φ̃ (bytes/s per core).
    #[serde(default = "default_phi")]
    pub phi_base: f64,
    /// Scheduling period (logical s).
    #[serde(default = "default_period")]
    pub period: f64,
    /// Total core budget; defaults to the whole cluster.
    #[serde(default)]
    pub core_budget: Option<u32>,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            latency_target: default_t_max(),
            phi_base: default_phi(),
            period: default_period(),
            core_budget: None,
        }
    }
}
