//! Deterministic discrete-event queue.
//!
//! Events dequeue in (timestamp, insertion sequence) order, a total
//! order, so runs with identical inputs process identical event
//! sequences regardless of how the queue happens to be drained.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

/// An event popped from the queue.
#[derive(Debug, Clone, PartialEq)]
pub struct Scheduled<E> {
    pub time: f64,
    pub seq: u64,
    pub event: E,
}

struct HeapEntry<E> {
    time: f64,
    seq: u64,
    event: E,
}

impl<E> PartialEq for HeapEntry<E> {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.seq == other.seq
    }
}

impl<E> Eq for HeapEntry<E> {}

impl<E> Ord for HeapEntry<E> {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed: BinaryHeap is a max-heap, we want the earliest
        // (time, seq) first.
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

impl<E> PartialOrd for HeapEntry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Event loop clock plus pending-event heap.
pub struct Engine<E> {
    now: f64,
    next_seq: u64,
    heap: BinaryHeap<HeapEntry<E>>,
}

impl<E> Default for Engine<E> {
    fn default() -> Self {
        Engine::new()
    }
}

impl<E> Engine<E> {
    pub fn new() -> Self {
        Engine {
            now: 0.0,
            next_seq: 0,
            heap: BinaryHeap::new(),
        }
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn peek_time(&self) -> Option<f64> {
        self.heap.peek().map(|e| e.time)
    }

    /// Schedules `event` at absolute `time`. Times in the past clamp to
    /// the current clock (scheduling backwards is a caller bug).
    pub fn schedule(&mut self, time: f64, event: E) {
        assert!(time.is_finite(), "event time must be finite");
        debug_assert!(
            time >= self.now - 1e-9,
            "scheduled event at {time} behind clock {}",
            self.now
        );
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(HeapEntry {
            time: time.max(self.now),
            seq,
            event,
        });
    }

    /// Pops the next event and advances the clock to it.
    pub fn step(&mut self) -> Option<Scheduled<E>> {
        let entry = self.heap.pop()?;
        self.now = entry.time;
        Some(Scheduled {
            time: entry.time,
            seq: entry.seq,
            event: entry.event,
        })
    }

    /// Pops every event with `time <= t_end` and leaves the clock at
    /// `t_end` (or later if it already was).
    pub fn run_until(&mut self, t_end: f64) -> Vec<Scheduled<E>> {
        let mut processed = Vec::new();
        while self.peek_time().is_some_and(|t| t <= t_end) {
            processed.push(self.step().expect("peeked entry exists"));
        }
        self.now = self.now.max(t_end);
        processed
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_queue_is_a_noop() {
        let mut engine: Engine<u32> = Engine::new();
        assert!(engine.step().is_none());
        assert!(engine.run_until(100.0).is_empty());
        assert_eq!(engine.now(), 100.0);
    }

    #[test]
    fn ties_dequeue_in_insertion_order() {
        let mut engine = Engine::new();
        engine.schedule(5.0, "b");
        engine.schedule(5.0, "c");
        engine.schedule(1.0, "a");
        let order: Vec<&str> = std::iter::from_fn(|| engine.step().map(|s| s.event)).collect();
        assert_eq!(order, vec!["a", "b", "c"]);
    }

    #[test]
    fn run_until_is_inclusive() {
        let mut engine = Engine::new();
        engine.schedule(1.0, 1);
        engine.schedule(2.0, 2);
        engine.schedule(3.0, 3);
        let processed = engine.run_until(2.0);
        assert_eq!(processed.len(), 2);
        assert_eq!(engine.now(), 2.0);
        assert_eq!(engine.len(), 1);
    }

    proptest! {
        /// Draining via arbitrary step()/run_until() interleavings yields
        /// the same event order as one run_until over everything.
        #[test]
        fn granularity_does_not_change_order(
            times in prop::collection::vec(0.0..1000.0f64, 1..64),
            cuts in prop::collection::vec(0.0..1000.0f64, 0..8),
        ) {
            let mut reference = Engine::new();
            let mut chunked = Engine::new();
            for (i, &t) in times.iter().enumerate() {
                reference.schedule(t, i);
                chunked.schedule(t, i);
            }
            let full: Vec<usize> = reference.run_until(1000.0).into_iter().map(|s| s.event).collect();

            let mut cuts = cuts;
            cuts.sort_by(f64::total_cmp);
            let mut pieces: Vec<usize> = Vec::new();
            for cut in cuts {
                // Alternate single steps and bulk drains.
                if pieces.len() % 2 == 0 {
                    if chunked.peek_time().is_some_and(|t| t <= cut) {
                        pieces.push(chunked.step().unwrap().event);
                    }
                }
                pieces.extend(chunked.run_until(cut).into_iter().map(|s| s.event));
            }
            pieces.extend(chunked.run_until(1000.0).into_iter().map(|s| s.event));
            prop_assert_eq!(full, pieces);
        }
    }
}
