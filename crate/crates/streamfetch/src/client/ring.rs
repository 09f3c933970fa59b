//! Bounded FIFO handoff between the redirector (producer) and one
//! networker worker (consumer). Single producer, single consumer per ring.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RingError {
    #[error("metadata ring full (capacity {0})")]
    Full(usize),
    #[error("metadata ring closed")]
    Closed,
}

/// What a full ring does to the producer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RingPolicy {
    /// Block until a slot frees up.
    Block,
    /// Fail the push immediately.
    Error,
}

struct RingState<T> {
    queue: VecDeque<T>,
    closed: bool,
}

pub struct MetadataRing<T> {
    state: Mutex<RingState<T>>,
    not_full: Condvar,
    not_empty: Condvar,
    capacity: usize,
    policy: RingPolicy,
    pushes: AtomicU64,
}

impl<T> MetadataRing<T> {
    pub fn new(capacity: usize, policy: RingPolicy) -> Self {
        assert!(capacity > 0, "ring capacity must be positive");
        MetadataRing {
            state: Mutex::new(RingState {
                queue: VecDeque::with_capacity(capacity),
                closed: false,
            }),
            not_full: Condvar::new(),
            not_empty: Condvar::new(),
            capacity,
            policy,
            pushes: AtomicU64::new(0),
        }
    }

    pub fn push(&self, item: T) -> Result<(), RingError> {
        let mut state = self.state.lock().unwrap();
        loop {
            if state.closed {
                return Err(RingError::Closed);
            }
            if state.queue.len() < self.capacity {
                state.queue.push_back(item);
                self.pushes.fetch_add(1, Ordering::Relaxed);
                self.not_empty.notify_one();
                return Ok(());
            }
            match self.policy {
                RingPolicy::Error => return Err(RingError::Full(self.capacity)),
                RingPolicy::Block => state = self.not_full.wait(state).unwrap(),
            }
        }
    }

    /// Blocks until an item arrives; `None` once closed and drained.
    pub fn pop(&self) -> Option<T> {
        let mut state = self.state.lock().unwrap();
        loop {
            if let Some(item) = state.queue.pop_front() {
                self.not_full.notify_one();
                return Some(item);
            }
            if state.closed {
                return None;
            }
            state = self.not_empty.wait(state).unwrap();
        }
    }

    pub fn close(&self) {
        self.state.lock().unwrap().closed = true;
        self.not_empty.notify_all();
        self.not_full.notify_all();
    }

    pub fn push_count(&self) -> u64 {
        self.pushes.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.state.lock().unwrap().queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[test]
    fn fifo_order_preserved() {
        let ring = MetadataRing::new(8, RingPolicy::Block);
        for i in 0..5 {
            ring.push(i).unwrap();
        }
        for i in 0..5 {
            assert_eq!(ring.pop(), Some(i));
        }
    }

    #[test]
    fn error_policy_rejects_when_full() {
        let ring = MetadataRing::new(2, RingPolicy::Error);
        ring.push(1).unwrap();
        ring.push(2).unwrap();
        assert_eq!(ring.push(3), Err(RingError::Full(2)));
    }

    #[test]
    fn closed_ring_rejects_push_and_drains_pop() {
        let ring = MetadataRing::new(2, RingPolicy::Block);
        ring.push(1).unwrap();
        ring.close();
        assert_eq!(ring.push(2), Err(RingError::Closed));
        assert_eq!(ring.pop(), Some(1));
        assert_eq!(ring.pop(), None);
    }

    #[test]
    fn block_policy_waits_for_consumer() {
        let ring = Arc::new(MetadataRing::new(1, RingPolicy::Block));
        ring.push(0u32).unwrap();
        let consumer = {
            let ring = Arc::clone(&ring);
            std::thread::spawn(move || {
                let mut seen = Vec::new();
                while let Some(v) = ring.pop() {
                    seen.push(v);
                }
                seen
            })
        };
        for i in 1..50u32 {
            ring.push(i).unwrap();
        }
        ring.close();
        let seen = consumer.join().unwrap();
        assert_eq!(seen, (0..50).collect::<Vec<_>>());
        assert_eq!(ring.push_count(), 50);
    }
}
