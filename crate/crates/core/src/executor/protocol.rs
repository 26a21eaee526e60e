//! Protocol event records, exportable as JSON lines.

use std::io::{self, Write};

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Pause,
    LabelEnqueued,
    LabelDequeued,
    TupleProcessed,
    MigrationStart,
    MigrationSkipped,
    MigrationDone,
    RoutingUpdated,
    Resume,
    TaskAdded,
    TaskRemoved,
    ProcessCreated,
    ProcessDestroyed,
    UpstreamPause,
    BarrierReached,
    UpstreamRoutingUpdate,
    UpstreamResume,
}

/// Who an event is addressed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Executor,
    Upstream,
    Downstream,
}

impl EventKind {
    pub fn scope(self) -> Scope {
        match self {
            EventKind::UpstreamPause | EventKind::UpstreamRoutingUpdate | EventKind::UpstreamResume => {
                Scope::Upstream
            }
            _ => Scope::Executor,
        }
    }

    /// Messages that cross an operator boundary and count as synchronization.
    pub fn is_sync_message(self) -> bool {
        matches!(self, EventKind::UpstreamPause | EventKind::UpstreamRoutingUpdate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProtocolEvent {
    pub kind: EventKind,
    pub time: f64,
    pub executor: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shard: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub destination: Option<u32>,
    pub bytes: u64,
    pub scope: Scope,
}

impl ProtocolEvent {
    pub fn new(kind: EventKind, time: f64, executor: usize) -> Self {
        Self {
            kind,
            time,
            executor,
            shard: None,
            source: None,
            destination: None,
            bytes: 0,
            scope: kind.scope(),
        }
    }

    pub fn shard(mut self, shard: u32) -> Self {
        self.shard = Some(shard);
        self
    }

    pub fn between(mut self, source: u32, destination: u32) -> Self {
        self.source = Some(source);
        self.destination = Some(destination);
        self
    }

    pub fn source(mut self, source: u32) -> Self {
        self.source = Some(source);
        self
    }

    pub fn destination(mut self, destination: u32) -> Self {
        self.destination = Some(destination);
        self
    }

    pub fn bytes(mut self, bytes: u64) -> Self {
        self.bytes = bytes;
        self
    }

    pub fn is_inter_operator(&self) -> bool {
        self.scope != Scope::Executor
    }
}

pub fn write_jsonl<'a, W: Write>(events: impl IntoIterator<Item = &'a ProtocolEvent>, mut w: W) -> io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_has_one_record_per_line() {
        let events = [
            ProtocolEvent::new(EventKind::Pause, 0.5, 3).shard(7),
            ProtocolEvent::new(EventKind::MigrationDone, 1.0, 3)
                .shard(7)
                .between(0, 2)
                .bytes(32768),
        ];
        let mut buf = Vec::new();
        write_jsonl(&events, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let v: serde_json::Value = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(v["kind"], "migration_done");
        assert_eq!(v["bytes"], 32768);
        assert_eq!(v["destination"], 2);
        assert_eq!(v["scope"], "executor");
    }

    #[test]
    fn only_upstream_kinds_leave_the_executor() {
        assert!(ProtocolEvent::new(EventKind::UpstreamPause, 0.0, 0).is_inter_operator());
        assert!(!ProtocolEvent::new(EventKind::Pause, 0.0, 0).is_inter_operator());
        assert!(!EventKind::UpstreamResume.is_sync_message());
    }
}
