use std::io::{self, Write};

use serde::Serialize;

use crate::executor::{write_jsonl, ProtocolEvent};

use super::PolicyKind;

/// One CSV row per metrics window.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowRow {
    pub window_end_s: f64,
    pub policy: &'static str,
    pub throughput_tps: f64,
    pub mean_latency_s: f64,
    pub p99_latency_s: f64,
    pub migrated_bytes: u64,
    pub sync_messages: u64,
    pub remote_transfer_bytes: u64,
}

/// One scheduler decision.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Decision {
    pub time: f64,
    pub policy: &'static str,
    pub outcome: &'static str,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub allocation: Vec<u32>,
    pub overload: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phi: Option<f64>,
    pub iterations: u32,
    pub cores_moved: u32,
    pub shard_moves: u32,
}

/// Whole-run totals.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunTotals {
    pub tuples_generated: u64,
    pub tuples_completed: u64,
    pub latency_sum: f64,
    pub p99_latency: f64,
    pub migrated_bytes: u64,
    pub intra_process_migrated_bytes: u64,
    pub sync_messages: u64,
    pub remote_transfer_bytes: u64,
    pub local_shard_moves: u64,
    pub remote_shard_moves: u64,
    pub repartitions: u64,
    pub order_violations: u64,
}

impl RunTotals {
    pub fn mean_latency(&self) -> f64 {
        if self.tuples_completed == 0 {
            0.0
        } else {
            self.latency_sum / self.tuples_completed as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub policy: PolicyKind,
    pub windows: Vec<WindowRow>,
    pub decisions: Vec<Decision>,
    pub protocol: Vec<ProtocolEvent>,
    pub totals: RunTotals,
}

impl Trace {
    pub fn new(policy: PolicyKind) -> Self {
        Self {
            policy,
            windows: Vec::new(),
            decisions: Vec::new(),
            protocol: Vec::new(),
            totals: RunTotals::default(),
        }
    }

    /// No tuple ever entered the engine.
    pub fn is_empty(&self) -> bool {
        self.totals.tuples_generated == 0 && self.windows.is_empty()
    }

    /// Mean per-window throughput over windows ending after `from` (s).
    pub fn mean_throughput(&self, from: f64) -> f64 {
        let w: Vec<f64> = self
            .windows
            .iter()
            .filter(|r| r.window_end_s > from)
            .map(|r| r.throughput_tps)
            .collect();
        if w.is_empty() {
            0.0
        } else {
            w.iter().sum::<f64>() / w.len() as f64
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        if self.windows.is_empty() {
            out.write_record([
                "window_end_s",
                "policy",
                "throughput_tps",
                "mean_latency_s",
                "p99_latency_s",
                "migrated_bytes",
                "sync_messages",
                "remote_transfer_bytes",
            ])?;
        }
        for row in &self.windows {
            out.serialize(row)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("in-memory CSV");
        String::from_utf8(buf).expect("CSV is UTF-8")
    }

    pub fn write_decisions<W: Write>(&self, mut w: W) -> io::Result<()> {
        for d in &self.decisions {
            serde_json::to_writer(&mut w, d)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn write_protocol<W: Write>(&self, w: W) -> io::Result<()> {
        write_jsonl(&self.protocol, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(t: f64, tput: f64) -> WindowRow {
        WindowRow {
            window_end_s: t,
            policy: "ec",
            throughput_tps: tput,
            mean_latency_s: 0.001,
            p99_latency_s: 0.002,
            migrated_bytes: 0,
            sync_messages: 0,
            remote_transfer_bytes: 0,
        }
    }

    #[test]
    fn csv_has_the_documented_columns() {
        let mut t = Trace::new(PolicyKind::ExecutorCentric);
        t.windows.push(row(1.0, 10.0));
        let csv = t.to_csv_string();
        let header = csv.lines().next().unwrap();
        assert_eq!(
            header,
            "window_end_s,policy,throughput_tps,mean_latency_s,p99_latency_s,migrated_bytes,sync_messages,remote_transfer_bytes"
        );
        assert_eq!(csv.lines().count(), 2);
        let empty = Trace::new(PolicyKind::Static).to_csv_string();
        assert_eq!(empty.lines().next().unwrap(), header);
    }

    #[test]
    fn mean_throughput_skips_warmup() {
        let mut t = Trace::new(PolicyKind::Static);
        t.windows.extend([row(1.0, 0.0), row(2.0, 10.0), row(3.0, 20.0)]);
        assert_eq!(t.mean_throughput(1.0), 15.0);
        assert_eq!(t.mean_throughput(10.0), 0.0);
    }
}
