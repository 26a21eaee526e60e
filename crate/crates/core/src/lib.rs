//! Executor-centric elastic stream processing on a deterministic
//! discrete-event simulator.

pub mod bench;
pub mod executor;
pub mod metrics;
pub mod model;
pub mod scheduler;
pub mod sim;
pub mod workload;
