//! Fixed-capacity replay buffer with uniform minibatch sampling.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BufferError {
    #[error("replay buffer capacity must be positive")]
    Capacity,
    #[error("{field} has length {got}, expected {expected}")]
    Dim { field: &'static str, expected: usize, got: usize },
    #[error("transition cost {0} is negative or not finite")]
    Cost(f64),
    #[error("not warmed up: {size} stored, batch of {batch} requested")]
    NotWarmedUp { size: usize, batch: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub control: Vec<f64>,
    pub reward: f64,
    pub cost: f64,
    pub next_state: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    state_dim: usize,
    control_dim: usize,
    items: Vec<Transition>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, state_dim: usize, control_dim: usize, seed: u64) -> Result<Self, BufferError> {
        if capacity == 0 {
            return Err(BufferError::Capacity);
        }
        Ok(Self {
            capacity,
            state_dim,
            control_dim,
            items: Vec::with_capacity(capacity.min(4096)),
            cursor: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
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

    pub fn push(&mut self, t: Transition) -> Result<(), BufferError> {
        let check = |field, expected, got| {
            if expected == got {
                Ok(())
            } else {
                Err(BufferError::Dim { field, expected, got })
            }
        };
        check("state", self.state_dim, t.state.len())?;
        check("next_state", self.state_dim, t.next_state.len())?;
        check("control", self.control_dim, t.control.len())?;
        if !(t.cost >= 0.0) || !t.cost.is_finite() {
            return Err(BufferError::Cost(t.cost));
        }
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        Ok(())
    }

    /// Uniform sample with replacement.
    pub fn sample(&mut self, batch: usize) -> Result<Vec<&Transition>, BufferError> {
        let idx = self.sample_indices(batch)?;
        Ok(idx.into_iter().map(|i| &self.items[i]).collect())
    }

    pub fn sample_indices(&mut self, batch: usize) -> Result<Vec<usize>, BufferError> {
        let size = self.items.len();
        if size < batch || size == 0 {
            return Err(BufferError::NotWarmedUp { size, batch });
        }
        Ok((0..batch).map(|_| self.rng.gen_range(0..size)).collect())
    }

    pub fn get(&self, index: usize) -> Option<&Transition> {
        self.items.get(index)
    }

    /// Stored transitions from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        let split = if self.items.len() < self.capacity { 0 } else { self.cursor };
        self.items[split..].iter().chain(self.items[..split].iter())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tr(v: f64) -> Transition {
        Transition { state: vec![v, -v], control: vec![v], reward: v, cost: v.abs(), next_state: vec![v + 1.0, 0.0] }
    }

    #[test]
    fn push_grows_then_overwrites_oldest() {
        let mut b = ReplayBuffer::new(3, 2, 1, 0).unwrap();
        b.push(tr(0.0)).unwrap();
        assert_eq!(b.len(), 1);
        for v in 1..4 {
            b.push(tr(v as f64)).unwrap();
        }
        assert_eq!(b.len(), 3);
        let order: Vec<f64> = b.iter().map(|t| t.reward).collect();
        assert_eq!(order, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn fields_round_trip_bit_exact() {
        let mut b = ReplayBuffer::new(2, 2, 1, 0).unwrap();
        let t = Transition {
            state: vec![0.1 + 0.2, f64::MIN_POSITIVE],
            control: vec![-1e-300],
            reward: std::f64::consts::PI,
            cost: 1e-17,
            next_state: vec![f64::MAX, -0.0],
        };
        b.push(t.clone()).unwrap();
        let got = b.get(0).unwrap();
        assert_eq!(got.state[0].to_bits(), t.state[0].to_bits());
        assert_eq!(got.next_state[1].to_bits(), (-0.0f64).to_bits());
        assert_eq!(got, &t);
    }

    #[test]
    fn rejects_bad_dimensions_and_costs() {
        let mut b = ReplayBuffer::new(2, 2, 1, 0).unwrap();
        let mut t = tr(1.0);
        t.control.push(0.0);
        assert!(matches!(b.push(t), Err(BufferError::Dim { field: "control", .. })));
        let mut t = tr(1.0);
        t.cost = -1.0;
        assert!(matches!(b.push(t), Err(BufferError::Cost(_))));
        assert!(ReplayBuffer::new(0, 1, 1, 0).is_err());
    }

    #[test]
    fn undersized_sample_errors() {
        let mut b = ReplayBuffer::new(5, 2, 1, 0).unwrap();
        b.push(tr(1.0)).unwrap();
        assert_eq!(b.sample(3).unwrap_err(), BufferError::NotWarmedUp { size: 1, batch: 3 });
    }

    #[test]
    fn same_seed_same_batches() {
        let mut a = ReplayBuffer::new(10, 2, 1, 42).unwrap();
        let mut b = ReplayBuffer::new(10, 2, 1, 42).unwrap();
        for v in 0..10 {
            a.push(tr(v as f64)).unwrap();
            b.push(tr(v as f64)).unwrap();
        }
        assert_eq!(a.sample_indices(8).unwrap(), b.sample_indices(8).unwrap());
    }

    #[test]
    fn sampling_is_uniform() {
        let mut b = ReplayBuffer::new(10, 2, 1, 7).unwrap();
        for v in 0..10 {
            b.push(tr(v as f64)).unwrap();
        }
        let n = 100_000;
        let mut counts = [0usize; 10];
        for _ in 0..n / 10 {
            for i in b.sample_indices(10).unwrap() {
                counts[i] += 1;
            }
        }
        let p = 0.1;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() < 5.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn never_samples_evicted_entries() {
        let mut b = ReplayBuffer::new(4, 2, 1, 3).unwrap();
        for v in 0..20 {
            b.push(tr(v as f64)).unwrap();
        }
        for _ in 0..100 {
            for t in b.sample(4).unwrap() {
                assert!(t.reward >= 16.0);
            }
        }
    }
}
