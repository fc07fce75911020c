//! Fixed-capacity transition store.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::rng::SimRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
}

/// Ring buffer; once full, each push evicts the oldest entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    items: Vec<T>,
    next: usize,
}

#[derive(Debug)]
pub struct Sample<'a, T> {
    pub items: Vec<&'a T>,
    /// The buffer held fewer entries than requested, so everything was returned.
    pub short: bool,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: Vec::with_capacity(capacity.min(4096)),
            next: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, item: T) {
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            self.items[self.next] = item;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    /// Entries from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &T> {
        let split = if self.items.len() < self.capacity {
            0
        } else {
            self.next
        };
        self.items[split..].iter().chain(&self.items[..split])
    }

    /// Uniform without replacement within the batch.
    pub fn sample(&self, batch: usize, rng: &mut SimRng) -> Sample<'_, T> {
        if self.items.len() <= batch {
            return Sample {
                items: self.items.iter().collect(),
                short: self.items.len() < batch,
            };
        }
        let items = index::sample(rng, self.items.len(), batch)
            .into_iter()
            .map(|i| &self.items[i])
            .collect();
        Sample {
            items,
            short: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn oldest_is_evicted() {
        let mut b = ReplayBuffer::new(3);
        for i in 0..4 {
            b.push(i);
        }
        assert_eq!(b.len(), 3);
        assert_eq!(b.iter().copied().collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn short_buffer_returns_everything() {
        let mut b = ReplayBuffer::new(10);
        b.push(1);
        b.push(2);
        let s = b.sample(5, &mut seeded(0));
        assert!(s.short);
        assert_eq!(s.items.len(), 2);
    }

    #[test]
    fn batch_has_no_repeats() {
        let mut b = ReplayBuffer::new(50);
        for i in 0..50 {
            b.push(i);
        }
        let mut rng = seeded(1);
        for _ in 0..100 {
            let mut s: Vec<i32> = b.sample(20, &mut rng).items.into_iter().copied().collect();
            s.sort_unstable();
            s.dedup();
            assert_eq!(s.len(), 20);
        }
    }
}
