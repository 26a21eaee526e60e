//! Synthetic workloads: Poisson arrivals over a zipf-distributed key space
//! whose frequencies are periodically permuted, plus a multi-operator
//! exchange-like topology.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{OperatorSpec, TopologySpec};

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid workload: {0}")]
    Invalid(String),
    #[error("rate trace: {0}")]
    Trace(String),
}

fn default_keys() -> u64 {
    10_000
}
fn default_skew() -> f64 {
    0.5
}
fn default_payload() -> u64 {
    128
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadConfig {
    /// K: number of distinct keys.
    #[serde(default = "default_keys")]
    pub key_count: u64,
    #[serde(default = "default_skew")]
    pub zipf_skew: f64,
    /// λ₀; falls back to the topology's source rate when absent.
    #[serde(default)]
    pub source_rate: Option<f64>,
    #[serde(default = "default_payload")]
    pub payload_bytes: u64,
    /// ω: random permutations of the key frequencies per minute.
    #[serde(default)]
    pub shuffles_per_minute: f64,
    #[serde(default)]
    pub seed: u64,
    /// Optional CSV `(time_s, rate_tps)` replacing the constant rate.
    #[serde(default)]
    pub rate_trace: Option<String>,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self {
            key_count: default_keys(),
            zipf_skew: default_skew(),
            source_rate: None,
            payload_bytes: default_payload(),
            shuffles_per_minute: 0.0,
            seed: 0,
            rate_trace: None,
        }
    }
}

impl WorkloadConfig {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.key_count < 1 {
            return Err(WorkloadError::Invalid("key_count must be >= 1".into()));
        }
        if !(self.zipf_skew >= 0.0) {
            return Err(WorkloadError::Invalid("zipf_skew must be >= 0".into()));
        }
        if !(self.shuffles_per_minute >= 0.0) {
            return Err(WorkloadError::Invalid("shuffles_per_minute must be >= 0".into()));
        }
        if let Some(rate) = self.source_rate {
            if !(rate >= 0.0) {
                return Err(WorkloadError::Invalid("source_rate must be >= 0".into()));
            }
        }
        Ok(())
    }

    /// Seconds between shuffles, or `None` for a stationary workload.
    pub fn shuffle_interval(&self) -> Option<f64> {
        (self.shuffles_per_minute > 0.0).then(|| 60.0 / self.shuffles_per_minute)
    }
}

/// `p_i ∝ i^(-skew)` for ranks `i = 1..=K`.
pub fn zipf_frequencies(key_count: usize, skew: f64) -> Vec<f64> {
    assert!(key_count >= 1 && skew >= 0.0);
    let raw: Vec<f64> = (1..=key_count).map(|i| (i as f64).powf(-skew)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Fisher–Yates permutation of the frequency-to-key mapping.
pub fn shuffle_frequencies<R: Rng + ?Sized>(freqs: &[f64], rng: &mut R) -> Vec<f64> {
    let mut out = freqs.to_vec();
    out.shuffle(rng);
    out
}

/// Inverse-CDF exponential sample.
pub fn exponential<R: Rng + ?Sized>(rng: &mut R, rate: f64) -> f64 {
    debug_assert!(rate > 0.0);
    let u: f64 = rng.gen();
    -(1.0 - u).ln() / rate
}

/// Samples keys by binary search over the cumulative distribution.
#[derive(Debug, Clone)]
pub struct KeySampler {
    cdf: Vec<f64>,
}

impl KeySampler {
    pub fn new(freqs: &[f64]) -> Self {
        let mut acc = 0.0;
        let mut cdf: Vec<f64> = freqs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        if let Some(last) = cdf.last_mut() {
            *last = f64::INFINITY;
        }
        Self { cdf }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        let u: f64 = rng.gen();
        // The last bucket is open-ended, so the search never runs off the end.
        self.cdf.partition_point(|&c| c <= u) as u64
    }
}

/// Piecewise-constant arrival rate read from `(time_s, rate_tps)` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct RateTrace {
    points: Vec<(f64, f64)>,
}

impl RateTrace {
    pub fn new(mut points: Vec<(f64, f64)>) -> Result<Self, WorkloadError> {
        if points.is_empty() {
            return Err(WorkloadError::Trace("empty trace".into()));
        }
        if points.iter().any(|(t, r)| !(*t >= 0.0) || !(*r >= 0.0)) {
            return Err(WorkloadError::Trace("negative time or rate".into()));
        }
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(Self { points })
    }

    pub fn from_csv(path: &Path) -> Result<Self, WorkloadError> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| WorkloadError::Trace(e.to_string()))?;
        let mut points = Vec::new();
        for row in reader.deserialize::<(f64, f64)>() {
            points.push(row.map_err(|e| WorkloadError::Trace(e.to_string()))?);
        }
        Self::new(points)
    }

    pub fn rate_at(&self, t: f64) -> f64 {
        let i = self.points.partition_point(|(pt, _)| *pt <= t);
        if i == 0 {
            self.points[0].1
        } else {
            self.points[i - 1].1
        }
    }
}

/// Key stream state owned by one simulation.
#[derive(Debug, Clone)]
pub struct KeyStream {
    freqs: Vec<f64>,
    sampler: KeySampler,
}

impl KeyStream {
    pub fn new(cfg: &WorkloadConfig) -> Self {
        let freqs = zipf_frequencies(cfg.key_count as usize, cfg.zipf_skew);
        let sampler = KeySampler::new(&freqs);
        Self { freqs, sampler }
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.freqs
    }

    pub fn shuffle<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.freqs = shuffle_frequencies(&self.freqs, rng);
        self.sampler = KeySampler::new(&self.freqs);
    }

    /// Inter-arrival time at `rate` and the key of the next tuple.
    pub fn next_arrival<R: Rng + ?Sized>(&self, rng: &mut R, rate: f64) -> (f64, u64) {
        let gap = exponential(rng, rate);
        (gap, self.sampler.sample(rng))
    }
}

/// One source fanned out to one stateful operator (the calculator).
pub fn micro_benchmark_topology(
    upstream_executors: u32,
    executors: u32,
    shards: u32,
    cpu_cost: f64,
    source_rate: f64,
) -> TopologySpec {
    let mut source = OperatorSpec::new("source", upstream_executors, 1e-6);
    source.output_selectivity = 1.0;
    source.output_tuple_bytes = default_payload();
    let mut calc = OperatorSpec::new("calculator", executors, cpu_cost);
    calc.shards_per_executor = shards;
    TopologySpec {
        operators: vec![source, calc],
        edges: vec![("source".into(), "calculator".into())],
        source_rate,
    }
}

/// Order source -> transactor -> 6 statistics + 5 event-processing operators.
pub fn exchange_topology(executors: u32, shards: u32, source_rate: f64) -> TopologySpec {
    let mut orders = OperatorSpec::new("orders", executors, 1e-6);
    orders.output_selectivity = 1.0;
    orders.output_tuple_bytes = 96;
    let mut transactor = OperatorSpec::new("transactor", executors, 0.5e-3);
    transactor.shards_per_executor = shards;
    transactor.output_selectivity = 0.6;
    transactor.output_tuple_bytes = 160;
    let mut operators = vec![orders, transactor];
    let mut edges = vec![("orders".to_string(), "transactor".to_string())];
    for i in 0..6 {
        let mut op = OperatorSpec::new(format!("stats_{i}"), executors, 0.2e-3);
        op.shards_per_executor = shards;
        edges.push(("transactor".into(), op.id.clone()));
        operators.push(op);
    }
    for i in 0..5 {
        let mut op = OperatorSpec::new(format!("events_{i}"), executors, 0.3e-3);
        op.shards_per_executor = shards;
        edges.push(("transactor".into(), op.id.clone()));
        operators.push(op);
    }
    TopologySpec {
        operators,
        edges,
        source_rate,
    }
}
