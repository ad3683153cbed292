//! Deterministic event queue ordered by (time, insertion sequence).

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::model::{Mask, ParamVector};

/// Bytes accounted per payload beyond parameters and the mask bitmap:
/// sender id (4), sender update counter (8), loss (8), sample count (8),
/// pruning rate (8).
pub const PAYLOAD_METADATA_BYTES: u64 = 36;

/// A diffused model copy in flight.
#[derive(Debug, Clone)]
pub struct DiffusionPayload {
    pub sender: usize,
    /// Sender's local-update counter at send time.
    pub sender_update: u64,
    /// Working model: pruned positions hold zero.
    pub params: ParamVector,
    pub mask: Mask,
    pub sender_loss: f64,
    pub sender_samples: u64,
    pub sender_rate: f64,
}

impl DiffusionPayload {
    /// Serialized size: 4 bytes per unmasked parameter, the mask bitmap, and
    /// fixed metadata. Models are transferred losslessly in-process; the
    /// 4-byte figure only drives bandwidth accounting.
    pub fn byte_size(&self) -> u64 {
        4 * self.mask.kept_count() as u64 + self.mask.bitmap_bytes() + PAYLOAD_METADATA_BYTES
    }
}

#[derive(Debug, Clone)]
pub enum EventKind {
    LocalUpdateDone { device: usize },
    ModelArrival { to: usize, payload: DiffusionPayload },
    Heartbeat { device: usize },
    /// Synchronous-baseline round boundary.
    SyncBarrier,
}

#[derive(Debug)]
pub struct Event {
    pub time: f64,
    pub seq: u64,
    pub kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.seq == other.seq
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed: BinaryHeap is a max-heap, we want earliest first.
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Min-queue over (time, seq); seq is assigned at push, so ties process in
/// scheduling order and the loop is fully deterministic.
#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<Event>,
    next_seq: u64,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, time: f64, kind: EventKind) {
        debug_assert!(time.is_finite() && time >= 0.0);
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Event { time, seq, kind });
    }

    pub fn pop(&mut self) -> Option<Event> {
        self.heap.pop()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }
}
