use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::executor::TaskId;
use crate::model::Tuple;

/// Steps of the operator-level repartitioning protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RcStep {
    /// Pause message `i` acknowledged by upstream executor `i`.
    Paused(u32),
    MigrationDone,
    /// Routing update `i` acknowledged.
    Updated(u32),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EventKind {
    /// Next source tuple.
    Arrival,
    /// A tuple reached the receiver of executor `exec`.
    NetTransferDone { exec: u32, tuple: Tuple },
    ServiceDone { exec: u32, task: TaskId, tuple: Tuple, cpu: f64 },
    /// Shard state landed at the destination process.
    MigrationDone { exec: u32, shard: u32 },
    /// Control message of a repartitioning round of operator `op`.
    ControlTuple { op: u32, step: RcStep },
    SchedulerTick,
    ShuffleTick,
    MetricsWindow,
}

#[derive(Debug, Clone, Copy)]
pub struct Event {
    pub time: f64,
    pub seq: u64,
    pub kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    /// Reversed so the max-heap pops the earliest (time, seq) first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

#[derive(Debug, Default, Clone)]
pub struct EventQueue {
    heap: BinaryHeap<Event>,
    next_seq: u64,
}

impl EventQueue {
    pub fn push(&mut self, time: f64, kind: EventKind) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Event { time, seq, kind });
    }

    pub fn pop(&mut self) -> Option<Event> {
        self.heap.pop()
    }

    pub fn peek_time(&self) -> Option<f64> {
        self.heap.peek().map(|e| e.time)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}
