//! Bounded FIFO replay memory with uniform without-replacement sampling.

use rand::Rng;

use crate::env::Transition;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    /// Write cursor once the buffer is full.
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("replay capacity must be positive"));
        }
        Ok(ReplayBuffer {
            capacity,
            items: Vec::with_capacity(capacity.min(4096)),
            next: 0,
        })
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

    /// Insert, evicting the oldest transition once full.
    pub fn push(&mut self, transition: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(transition);
        } else {
            self.items[self.next] = transition;
            self.next = (self.next + 1) % self.capacity;
        }
    }

    /// Uniform sample of `batch` distinct transitions (clones).
    pub fn sample<R: Rng>(&self, rng: &mut R, batch: usize) -> Result<Vec<Transition>> {
        if batch == 0 {
            return Err(Error::contract("batch size must be positive"));
        }
        if batch > self.items.len() {
            return Err(Error::contract(format!(
                "cannot sample {batch} transitions from a buffer of {}",
                self.items.len()
            )));
        }
        // Partial Fisher-Yates over an index deck: first `batch` slots end
        // up holding distinct uniform picks.
        let mut deck: Vec<usize> = (0..self.items.len()).collect();
        for i in 0..batch {
            let j = rng.random_range(i..deck.len());
            deck.swap(i, j);
        }
        Ok(deck[..batch].iter().map(|i| self.items[*i].clone()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn t(tag: f64) -> Transition {
        Transition {
            state: vec![tag],
            action: 0,
            reward: tag,
            next_state: vec![tag],
            done: false,
        }
    }

    #[test]
    fn fifo_eviction_keeps_the_newest() {
        let mut buf = ReplayBuffer::new(3).unwrap();
        for i in 0..5 {
            buf.push(t(i as f64));
        }
        assert_eq!(buf.len(), 3);
        let mut kept: Vec<f64> = buf.items.iter().map(|t| t.reward).collect();
        kept.sort_by(f64::total_cmp);
        assert_eq!(kept, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn sampling_is_without_replacement() {
        let mut buf = ReplayBuffer::new(100).unwrap();
        for i in 0..50 {
            buf.push(t(i as f64));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for _ in 0..20 {
            let batch = buf.sample(&mut rng, 32).unwrap();
            let mut tags: Vec<f64> = batch.iter().map(|t| t.reward).collect();
            tags.sort_by(f64::total_cmp);
            tags.dedup();
            assert_eq!(tags.len(), 32, "duplicate transition in batch");
        }
    }

    #[test]
    fn sampling_covers_the_whole_buffer() {
        let mut buf = ReplayBuffer::new(16).unwrap();
        for i in 0..16 {
            buf.push(t(i as f64));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let mut seen = [false; 16];
        for _ in 0..200 {
            for tr in buf.sample(&mut rng, 4).unwrap() {
                seen[tr.reward as usize] = true;
            }
        }
        assert!(seen.iter().all(|s| *s), "some transition never sampled");
    }

    #[test]
    fn undersized_buffers_refuse_to_sample() {
        let mut buf = ReplayBuffer::new(8).unwrap();
        buf.push(t(0.0));
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        assert!(buf.sample(&mut rng, 2).is_err());
        assert!(buf.sample(&mut rng, 0).is_err());
        assert!(ReplayBuffer::new(0).is_err());
    }
}
