//! Per-process key-value state.

use std::collections::BTreeMap;

use serde::Serialize;

use super::{ExecutorError, ProcessId};

/// Test-friendly application state: a counter, an order-sensitive
/// checksum and the last sequence number seen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct KeyState {
    pub count: u64,
    pub checksum: u64,
    pub last_seq: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateUpdate {
    Increment,
    /// Counts the tuple and folds its sequence number into the checksum.
    Observe { seq: u64 },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ShardState {
    keys: BTreeMap<u64, KeyState>,
}

impl ShardState {
    pub fn keys(&self) -> impl Iterator<Item = (&u64, &KeyState)> {
        self.keys.iter()
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

/// Key states of every shard owned by one process. Tasks of the same
/// process share it, so moving a shard between them copies nothing.
#[derive(Debug, Clone, Default)]
pub struct StateStore {
    process: ProcessId,
    shards: BTreeMap<u32, ShardState>,
    order_violations: u64,
}

impl StateStore {
    pub fn new(process: ProcessId) -> Self {
        Self {
            process,
            ..Self::default()
        }
    }

    pub fn with_shards(process: ProcessId, shards: impl IntoIterator<Item = u32>) -> Self {
        let mut s = Self::new(process);
        for shard in shards {
            s.shards.insert(shard, ShardState::default());
        }
        s
    }

    pub fn process(&self) -> ProcessId {
        self.process
    }

    pub fn owns(&self, shard: u32) -> bool {
        self.shards.contains_key(&shard)
    }

    pub fn owned(&self) -> impl Iterator<Item = u32> + '_ {
        self.shards.keys().copied()
    }

    pub fn apply(&mut self, shard: u32, key: u64, update: StateUpdate) -> Result<KeyState, ExecutorError> {
        let state = self.shards.get_mut(&shard).ok_or(ExecutorError::NotOwner {
            shard,
            process: self.process,
        })?;
        let v = state.keys.entry(key).or_default();
        v.count += 1;
        if let StateUpdate::Observe { seq } = update {
            if v.last_seq.is_some_and(|last| seq < last) {
                self.order_violations += 1;
            }
            v.checksum = v.checksum.wrapping_mul(31).wrapping_add(seq);
            v.last_seq = Some(seq);
        }
        Ok(*v)
    }

    pub fn get(&self, shard: u32, key: u64) -> Option<&KeyState> {
        self.shards.get(&shard)?.keys.get(&key)
    }

    pub fn take(&mut self, shard: u32) -> Option<ShardState> {
        self.shards.remove(&shard)
    }

    pub fn insert(&mut self, shard: u32, state: ShardState) {
        let prev = self.shards.insert(shard, state);
        debug_assert!(prev.is_none(), "shard {shard} already owned by {:?}", self.process);
    }

    /// Tuples seen out of sequence order.
    pub fn order_violations(&self) -> u64 {
        self.order_violations
    }

    /// Sum of per-key counters.
    pub fn total_count(&self) -> u64 {
        self.shards.values().flat_map(|s| s.keys.values()).map(|k| k.count).sum()
    }

    pub fn key_states(&self) -> impl Iterator<Item = (u64, &KeyState)> {
        self.shards.values().flat_map(|s| s.keys.iter().map(|(k, v)| (*k, v)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counter_increments() {
        let mut store = StateStore::with_shards(ProcessId(0), [3]);
        for _ in 0..3 {
            store.apply(3, 42, StateUpdate::Increment).unwrap();
        }
        assert_eq!(store.get(3, 42).unwrap().count, 3);
    }

    #[test]
    fn foreign_shard_is_rejected() {
        let mut store = StateStore::with_shards(ProcessId(1), [0]);
        assert_eq!(
            store.apply(1, 7, StateUpdate::Increment),
            Err(ExecutorError::NotOwner {
                shard: 1,
                process: ProcessId(1)
            })
        );
    }

    #[test]
    fn moved_state_keeps_its_value() {
        let mut a = StateStore::with_shards(ProcessId(0), [5]);
        let mut b = StateStore::new(ProcessId(1));
        a.apply(5, 9, StateUpdate::Observe { seq: 1 }).unwrap();
        a.apply(5, 9, StateUpdate::Observe { seq: 2 }).unwrap();
        let before = *a.get(5, 9).unwrap();
        b.insert(5, a.take(5).unwrap());
        assert!(!a.owns(5));
        assert_eq!(*b.get(5, 9).unwrap(), before);
        let after = b.apply(5, 9, StateUpdate::Observe { seq: 3 }).unwrap();
        assert_eq!(after.count, 3);
    }

    #[test]
    fn out_of_order_is_counted() {
        let mut s = StateStore::with_shards(ProcessId(0), [0]);
        s.apply(0, 1, StateUpdate::Observe { seq: 5 }).unwrap();
        s.apply(0, 1, StateUpdate::Observe { seq: 4 }).unwrap();
        s.apply(0, 2, StateUpdate::Observe { seq: 1 }).unwrap();
        assert_eq!(s.order_violations(), 1);
    }
}
