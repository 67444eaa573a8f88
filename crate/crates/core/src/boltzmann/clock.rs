//! Event clock queue for the collision simulators.
//!
//! Each clock owner keeps an absolute ring time; the queue always pops the
//! earliest one. Owners are rescheduled only after they ring, so the queue
//! never holds stale entries and needs no lazy deletion.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

#[derive(Clone, Copy, Debug)]
struct Entry<O> {
    time: f64,
    owner: O,
}

impl<O: Ord> PartialEq for Entry<O> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<O: Ord> Eq for Entry<O> {}

impl<O: Ord> PartialOrd for Entry<O> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<O: Ord> Ord for Entry<O> {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed: BinaryHeap is a max-heap and we want the earliest time.
        // Ties break toward the smallest owner, deterministically.
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.owner.cmp(&self.owner))
    }
}

/// A min-queue of absolute ring times. Pop order is nondecreasing in time;
/// exact ties resolve to the smallest owner.
#[derive(Clone, Debug)]
pub struct ClockQueue<O> {
    heap: BinaryHeap<Entry<O>>,
}

impl<O: Ord + Copy> ClockQueue<O> {
    pub fn new() -> Self {
        Self { heap: BinaryHeap::new() }
    }

    pub fn with_capacity(n: usize) -> Self {
        Self { heap: BinaryHeap::with_capacity(n) }
    }

    /// Schedule `owner` to ring at absolute time `time`.
    ///
    /// # Panics
    /// If `time` is not finite.
    pub fn push(&mut self, time: f64, owner: O) {
        assert!(time.is_finite(), "clock ring time must be finite");
        self.heap.push(Entry { time, owner });
    }

    /// Earliest scheduled ring, if any.
    pub fn peek(&self) -> Option<(f64, O)> {
        self.heap.peek().map(|e| (e.time, e.owner))
    }

    /// Remove and return the earliest scheduled ring.
    pub fn pop(&mut self) -> Option<(f64, O)> {
        self.heap.pop().map(|e| (e.time, e.owner))
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

impl<O: Ord + Copy> Default for ClockQueue<O> {
    fn default() -> Self {
        Self::new()
    }
}
