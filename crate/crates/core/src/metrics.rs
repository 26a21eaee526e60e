//! Windowed counters feeding the scheduler and the trace.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::scheduler::MetricsSnapshot;

pub const RESERVOIR_SIZE: usize = 4096;
pub const DEFAULT_WINDOW: f64 = 1.0;
pub const DEFAULT_ALPHA: f64 = 0.5;
/// μ is re-estimated only from windows with at least this many tuples.
pub const MIN_SERVICE_SAMPLES: u64 = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("executor {0} has no busy time in this window")]
    InsufficientData(usize),
}

/// Uniform fixed-size sample of a stream (Algorithm R).
#[derive(Debug, Clone)]
pub struct Reservoir {
    samples: Vec<f64>,
    seen: u64,
    cap: usize,
    rng: ChaCha8Rng,
}

impl Reservoir {
    pub fn new(cap: usize, seed: u64) -> Self {
        Self {
            samples: Vec::with_capacity(cap),
            seen: 0,
            cap,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn push(&mut self, x: f64) {
        self.seen += 1;
        if self.samples.len() < self.cap {
            self.samples.push(x);
        } else {
            let j = self.rng.gen_range(0..self.seen);
            if (j as usize) < self.cap {
                self.samples[j as usize] = x;
            }
        }
    }

    /// Nearest-rank quantile of the retained samples.
    pub fn quantile(&self, q: f64) -> Option<f64> {
        if self.samples.is_empty() {
            return None;
        }
        let mut v = self.samples.clone();
        v.sort_by(f64::total_cmp);
        let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
        Some(v[rank - 1])
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn clear(&mut self) {
        self.samples.clear();
        self.seen = 0;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct ExecutorCounters {
    pub tuples_in: u64,
    pub tuples_out: u64,
    pub bytes_in: u64,
    pub bytes_out: u64,
    pub processed: u64,
    pub busy_seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MetricEvent {
    SourceEmit,
    Arrived { executor: usize, bytes: u64 },
    Processed { executor: usize, cpu_seconds: f64 },
    Emitted { executor: usize, bytes: u64 },
    Completed { latency: f64 },
    Migrated { bytes: u64 },
    SyncMessage,
    RemoteTransfer { bytes: u64 },
}

/// Everything one window contributes to the trace.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct WindowSummary {
    pub window_end: f64,
    pub source_tuples: u64,
    pub completed: u64,
    pub throughput: f64,
    pub mean_latency: f64,
    pub p99_latency: f64,
    pub migrated_bytes: u64,
    pub sync_messages: u64,
    pub remote_transfer_bytes: u64,
}

/// Smoothed per-executor estimates carried across windows.
#[derive(Debug, Clone, Default)]
struct Smoothed {
    primed: bool,
    source_rate: f64,
    arrival: Vec<f64>,
    service: Vec<f64>,
    service_measured: Vec<bool>,
    data: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct WindowAccumulator {
    window: f64,
    alpha: f64,
    counters: Vec<ExecutorCounters>,
    source_tuples: u64,
    completed: u64,
    latency_sum: f64,
    reservoir: Reservoir,
    migrated_bytes: u64,
    sync_messages: u64,
    remote_bytes: u64,
    smoothed: Smoothed,
}

impl WindowAccumulator {
    /// `cold_service_rate[j]` is μ_j until the first usable measurement.
    pub fn new(window: f64, alpha: f64, cold_service_rate: Vec<f64>, seed: u64) -> Self {
        let n = cold_service_rate.len();
        Self {
            window,
            alpha,
            counters: vec![ExecutorCounters::default(); n],
            source_tuples: 0,
            completed: 0,
            latency_sum: 0.0,
            reservoir: Reservoir::new(RESERVOIR_SIZE, seed),
            migrated_bytes: 0,
            sync_messages: 0,
            remote_bytes: 0,
            smoothed: Smoothed {
                service: cold_service_rate,
                service_measured: vec![false; n],
                arrival: vec![0.0; n],
                data: vec![0.0; n],
                ..Smoothed::default()
            },
        }
    }

    pub fn window(&self) -> f64 {
        self.window
    }

    pub fn executors(&self) -> usize {
        self.counters.len()
    }

    pub fn counters(&self, j: usize) -> &ExecutorCounters {
        &self.counters[j]
    }

    pub fn record(&mut self, ev: MetricEvent) {
        match ev {
            MetricEvent::SourceEmit => self.source_tuples += 1,
            MetricEvent::Arrived { executor, bytes } => {
                let c = &mut self.counters[executor];
                c.tuples_in += 1;
                c.bytes_in += bytes;
            }
            MetricEvent::Processed { executor, cpu_seconds } => {
                let c = &mut self.counters[executor];
                c.processed += 1;
                c.busy_seconds += cpu_seconds;
            }
            MetricEvent::Emitted { executor, bytes } => {
                let c = &mut self.counters[executor];
                c.tuples_out += 1;
                c.bytes_out += bytes;
            }
            MetricEvent::Completed { latency } => {
                self.completed += 1;
                self.latency_sum += latency;
                self.reservoir.push(latency);
            }
            MetricEvent::Migrated { bytes } => self.migrated_bytes += bytes,
            MetricEvent::SyncMessage => self.sync_messages += 1,
            MetricEvent::RemoteTransfer { bytes } => self.remote_bytes += bytes,
        }
    }

    /// Raw μ_j of the current window.
    pub fn measured_service_rate(&self, j: usize) -> Result<f64, MetricsError> {
        let c = &self.counters[j];
        if c.busy_seconds <= 0.0 {
            return Err(MetricsError::InsufficientData(j));
        }
        Ok(c.processed as f64 / c.busy_seconds)
    }

    fn ewma(&self, old: f64, new: f64) -> f64 {
        self.alpha * new + (1.0 - self.alpha) * old
    }

    /// Closes the window: folds counters into the smoothed estimates,
    /// builds the scheduler snapshot for executors `0..n` and resets.
    ///
    /// `cores[j]` is k_j and `state_bytes[j]` is s_j at the window end.
    pub fn snapshot(&mut self, window_end: f64, cores: &[u32], state_bytes: &[f64]) -> (MetricsSnapshot, WindowSummary) {
        let w = self.window;
        let n = self.counters.len();
        let lambda0 = self.source_tuples as f64 / w;
        let first = !self.smoothed.primed;
        self.smoothed.source_rate = if first {
            lambda0
        } else {
            self.ewma(self.smoothed.source_rate, lambda0)
        };
        for j in 0..n {
            let c = self.counters[j];
            let lambda = c.tuples_in as f64 / w;
            let data = (c.bytes_in + c.bytes_out) as f64 / w;
            let (a, d) = (self.smoothed.arrival[j], self.smoothed.data[j]);
            self.smoothed.arrival[j] = if first { lambda } else { self.ewma(a, lambda) };
            self.smoothed.data[j] = if first { data } else { self.ewma(d, data) };
            if c.processed >= MIN_SERVICE_SAMPLES && c.busy_seconds > 0.0 {
                let mu = c.processed as f64 / c.busy_seconds;
                let old = self.smoothed.service[j];
                self.smoothed.service[j] = if self.smoothed.service_measured[j] {
                    self.ewma(old, mu)
                } else {
                    mu
                };
                self.smoothed.service_measured[j] = true;
            }
        }
        self.smoothed.primed = true;

        let snap = MetricsSnapshot {
            source_rate: self.smoothed.source_rate,
            arrival_rate: self.smoothed.arrival.clone(),
            service_rate: self.smoothed.service.clone(),
            state_bytes: state_bytes.to_vec(),
            data_rate: self.smoothed.data.clone(),
            cores: cores.to_vec(),
        };
        let summary = WindowSummary {
            window_end,
            source_tuples: self.source_tuples,
            completed: self.completed,
            throughput: self.completed as f64 / w,
            mean_latency: if self.completed > 0 {
                self.latency_sum / self.completed as f64
            } else {
                0.0
            },
            p99_latency: self.reservoir.quantile(0.99).unwrap_or(0.0),
            migrated_bytes: self.migrated_bytes,
            sync_messages: self.sync_messages,
            remote_transfer_bytes: self.remote_bytes,
        };
        self.reset();
        (snap, summary)
    }

    fn reset(&mut self) {
        self.counters.iter_mut().for_each(|c| *c = ExecutorCounters::default());
        self.source_tuples = 0;
        self.completed = 0;
        self.latency_sum = 0.0;
        self.reservoir.clear();
        self.migrated_bytes = 0;
        self.sync_messages = 0;
        self.remote_bytes = 0;
    }
}
