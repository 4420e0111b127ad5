use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

/// Virtual seconds since the start of a run.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimTime(pub f64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0.0);

    pub fn secs(self) -> f64 {
        self.0
    }
}

impl Eq for SimTime {}

impl PartialOrd for SimTime {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for SimTime {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4}s", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    StepStart { step: u32 },
    DecodeTick { step: u32 },
    RequestComplete { step: u32, request: u32 },
    RewardDone { step: u32, task: u32 },
    MigrationDone { step: u32 },
    TrainChunkDone { step: u32, replica: u32 },
    StepBarrier { step: u32 },
    WeightSync { step: u32 },
}

impl EventKind {
    pub fn step(&self) -> u32 {
        match *self {
            EventKind::StepStart { step }
            | EventKind::DecodeTick { step }
            | EventKind::RequestComplete { step, .. }
            | EventKind::RewardDone { step, .. }
            | EventKind::MigrationDone { step }
            | EventKind::TrainChunkDone { step, .. }
            | EventKind::StepBarrier { step }
            | EventKind::WeightSync { step } => step,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimEvent {
    pub time: SimTime,
    pub seq: u64,
    pub kind: EventKind,
}

impl Ord for SimEvent {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed: BinaryHeap is a max-heap.
        other
            .time
            .cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for SimEvent {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Future-event set ordered by `(time, seq)`.
#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<SimEvent>,
    clock: SimTime,
    next_seq: u64,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clock(&self) -> SimTime {
        self.clock
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Enqueue `kind` at `time`. Events at equal times pop in insertion order.
    pub fn schedule(&mut self, time: SimTime, kind: EventKind) -> Result<u64> {
        if time < self.clock || !time.0.is_finite() {
            return Err(SimError::EventInPast {
                event: time,
                clock: self.clock,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(SimEvent { time, seq, kind });
        Ok(seq)
    }

    pub fn pop(&mut self) -> Option<SimEvent> {
        let ev = self.heap.pop()?;
        debug_assert!(ev.time >= self.clock);
        self.clock = ev.time;
        Some(ev)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tick(step: u32) -> EventKind {
        EventKind::DecodeTick { step }
    }

    #[test]
    fn future_event_is_queued() {
        let mut q = EventQueue::new();
        q.schedule(SimTime(3.0), tick(0)).unwrap();
        q.pop();
        assert_eq!(q.clock(), SimTime(3.0));
        q.schedule(SimTime(5.0), tick(1)).unwrap();
        assert_eq!(q.pop().unwrap().time, SimTime(5.0));
    }

    #[test]
    fn equal_time_pops_in_insertion_order() {
        let mut q = EventQueue::new();
        q.schedule(SimTime(3.0), tick(0)).unwrap();
        q.pop();
        q.schedule(SimTime(3.0), tick(1)).unwrap();
        q.schedule(SimTime(3.0), tick(2)).unwrap();
        q.schedule(SimTime(3.0), tick(3)).unwrap();
        let order: Vec<u32> = std::iter::from_fn(|| q.pop()).map(|e| e.kind.step()).collect();
        assert_eq!(order, vec![1, 2, 3]);
    }

    #[test]
    fn past_event_rejected() {
        let mut q = EventQueue::new();
        q.schedule(SimTime(3.0), tick(0)).unwrap();
        q.pop();
        assert!(matches!(
            q.schedule(SimTime(2.0), tick(1)),
            Err(SimError::EventInPast { .. })
        ));
    }

    #[test]
    fn pops_sorted_by_time_then_seq() {
        let mut q = EventQueue::new();
        for (i, t) in [5.0, 1.0, 3.0, 1.0, 2.0].iter().enumerate() {
            q.schedule(SimTime(*t), tick(i as u32)).unwrap();
        }
        let got: Vec<(f64, u32)> = std::iter::from_fn(|| q.pop())
            .map(|e| (e.time.0, e.kind.step()))
            .collect();
        assert_eq!(got, vec![(1.0, 1), (1.0, 3), (2.0, 4), (3.0, 2), (5.0, 0)]);
    }
}
