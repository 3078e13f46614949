//! Uniform experience replay with ring-buffer eviction.
//!
//! Each agent owns one buffer; in centralized mode the single controller's
//! buffer stores joint observations and actions. Transition shapes are
//! fixed per buffer at construction and validated on every push, so a mode
//! mismatch surfaces at the insertion site instead of deep inside an
//! update.

use rand::Rng;

use crate::scalar::Scalar;

/// One stored interaction.
///
/// `local_obs` is the acting network's proprioceptive slice (one arm in the
/// decentralized modes, all arms concatenated in centralized mode);
/// `object_obs` is the task-object state. `influence` is the collective
/// influence vector recorded at action time, present only when an influence
/// estimator is in play.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition<T> {
    pub local_obs: Vec<T>,
    pub object_obs: Vec<T>,
    pub action: Vec<T>,
    pub influence: Option<Vec<T>>,
    pub reward: T,
    pub next_local_obs: Vec<T>,
    pub next_object_obs: Vec<T>,
    /// True only for safety terminations: the step entered a failure state
    /// whose value must not be bootstrapped. Horizon truncation stores
    /// `false`.
    pub done: bool,
}

/// Expected widths for every transition a buffer accepts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransitionDims {
    pub local_obs: usize,
    pub object_obs: usize,
    pub action: usize,
    pub influence: Option<usize>,
}

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error("cannot sample {requested} transitions from a buffer holding {size}")]
    Underfilled { requested: usize, size: usize },
    #[error("transition shape mismatch: {detail}")]
    ShapeMismatch { detail: String },
}

/// Fixed-capacity uniform replay buffer.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<T> {
    entries: Vec<Transition<T>>,
    capacity: usize,
    write: usize,
    dims: TransitionDims,
}

impl<T: Scalar> ReplayBuffer<T> {
    /// Create an empty buffer. `capacity` must be at least 1.
    pub fn new(capacity: usize, dims: TransitionDims) -> Self {
        assert!(capacity >= 1, "replay capacity must be at least 1");
        Self {
            entries: Vec::new(),
            capacity,
            write: 0,
            dims,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dims(&self) -> TransitionDims {
        self.dims
    }

    fn check(&self, t: &Transition<T>) -> Result<(), ReplayError> {
        let mismatch = |what: &str, expected: usize, got: usize| ReplayError::ShapeMismatch {
            detail: format!("{what}: expected {expected}, got {got}"),
        };
        if t.local_obs.len() != self.dims.local_obs {
            return Err(mismatch("local_obs", self.dims.local_obs, t.local_obs.len()));
        }
        if t.next_local_obs.len() != self.dims.local_obs {
            return Err(mismatch("next_local_obs", self.dims.local_obs, t.next_local_obs.len()));
        }
        if t.object_obs.len() != self.dims.object_obs {
            return Err(mismatch("object_obs", self.dims.object_obs, t.object_obs.len()));
        }
        if t.next_object_obs.len() != self.dims.object_obs {
            return Err(mismatch(
                "next_object_obs",
                self.dims.object_obs,
                t.next_object_obs.len(),
            ));
        }
        if t.action.len() != self.dims.action {
            return Err(mismatch("action", self.dims.action, t.action.len()));
        }
        match (self.dims.influence, &t.influence) {
            (None, None) => {}
            (Some(expected), Some(c)) if c.len() == expected => {}
            (Some(expected), Some(c)) => return Err(mismatch("influence", expected, c.len())),
            (Some(expected), None) => {
                return Err(ReplayError::ShapeMismatch {
                    detail: format!("influence: expected width {expected}, got none"),
                })
            }
            (None, Some(c)) => {
                return Err(ReplayError::ShapeMismatch {
                    detail: format!("influence: expected none, got width {}", c.len()),
                })
            }
        }
        Ok(())
    }

    /// Insert a transition, overwriting the oldest entry once full.
    pub fn push(&mut self, t: Transition<T>) -> Result<(), ReplayError> {
        self.check(&t)?;
        if self.entries.len() < self.capacity {
            self.entries.push(t);
        } else {
            self.entries[self.write] = t;
            self.write = (self.write + 1) % self.capacity;
        }
        Ok(())
    }

    /// Draw `n` transitions uniformly with replacement.
    pub fn sample<'a>(
        &'a self,
        n: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<&'a Transition<T>>, ReplayError> {
        if n > self.entries.len() {
            return Err(ReplayError::Underfilled {
                requested: n,
                size: self.entries.len(),
            });
        }
        Ok((0..n)
            .map(|_| &self.entries[rng.gen_range(0..self.entries.len())])
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::seeded_stream;

    fn tiny_dims() -> TransitionDims {
        TransitionDims {
            local_obs: 1,
            object_obs: 1,
            action: 1,
            influence: None,
        }
    }

    fn tagged(tag: f64) -> Transition<f64> {
        Transition {
            local_obs: vec![tag],
            object_obs: vec![0.0],
            action: vec![0.0],
            influence: None,
            reward: tag,
            next_local_obs: vec![tag],
            next_object_obs: vec![0.0],
            done: false,
        }
    }

    #[test]
    fn push_grows_until_capacity_then_overwrites_fifo() {
        let mut buf = ReplayBuffer::new(2, tiny_dims());
        assert!(buf.is_empty());
        buf.push(tagged(1.0)).unwrap();
        assert_eq!(buf.len(), 1);
        buf.push(tagged(2.0)).unwrap();
        buf.push(tagged(3.0)).unwrap();
        assert_eq!(buf.len(), 2);
        let rewards: Vec<f64> = buf.entries.iter().map(|t| t.reward).collect();
        assert!(rewards.contains(&2.0) && rewards.contains(&3.0), "oldest entry evicted");
        assert!(!rewards.contains(&1.0));
    }

    #[test]
    fn saturation_pins_len_at_capacity() {
        let cap = 1_000_000;
        let mut buf = ReplayBuffer::new(cap, tiny_dims());
        for i in 0..cap {
            buf.push(tagged(i as f64)).unwrap();
        }
        assert_eq!(buf.len(), cap);
        buf.push(tagged(-1.0)).unwrap();
        assert_eq!(buf.len(), cap, "len never exceeds capacity");
    }

    #[test]
    fn push_rejects_mismatched_shapes() {
        let mut buf = ReplayBuffer::<f64>::new(
            4,
            TransitionDims {
                local_obs: 6,
                object_obs: 2,
                action: 3,
                influence: Some(2),
            },
        );
        let mut t = tagged(0.0);
        t.influence = Some(vec![0.0, 0.0]);
        match buf.push(t) {
            Err(ReplayError::ShapeMismatch { detail }) => {
                assert!(detail.contains("local_obs"), "got: {detail}");
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
        assert!(buf.is_empty(), "rejected transitions are not stored");
    }

    #[test]
    fn influence_presence_must_match_the_buffer_mode() {
        let mut buf = ReplayBuffer::<f64>::new(4, tiny_dims());
        let mut t = tagged(0.0);
        t.influence = Some(vec![0.1, 0.2]);
        assert!(matches!(buf.push(t), Err(ReplayError::ShapeMismatch { .. })));
    }

    #[test]
    #[should_panic(expected = "capacity")]
    fn zero_capacity_is_a_construction_bug() {
        let _ = ReplayBuffer::<f64>::new(0, tiny_dims());
    }

    #[test]
    fn sampling_one_from_a_singleton_returns_it() {
        let mut buf = ReplayBuffer::new(4, tiny_dims());
        buf.push(tagged(7.0)).unwrap();
        let mut rng = seeded_stream(0, 0);
        let got = buf.sample(1, &mut rng).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].reward, 7.0);
    }

    #[test]
    fn sampling_more_than_size_errors() {
        let mut buf = ReplayBuffer::new(4, tiny_dims());
        buf.push(tagged(1.0)).unwrap();
        assert!(matches!(
            buf.sample(2, &mut seeded_stream(0, 0)),
            Err(ReplayError::Underfilled { requested: 2, size: 1 })
        ));
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let mut buf = ReplayBuffer::new(64, tiny_dims());
        for i in 0..64 {
            buf.push(tagged(i as f64)).unwrap();
        }
        let draw = |seed| {
            let mut rng = seeded_stream(seed, 1);
            buf.sample(32, &mut rng)
                .unwrap()
                .iter()
                .map(|t| t.reward)
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
        assert_ne!(draw(5), draw(6), "different seeds give different draws");
    }

    #[test]
    fn sampling_is_uniform_over_the_buffer() {
        let mut buf = ReplayBuffer::new(100, tiny_dims());
        for i in 0..100 {
            buf.push(tagged(i as f64)).unwrap();
        }
        let mut rng = seeded_stream(12, 2);
        let draws = 100_000usize;
        let mut counts = [0u32; 100];
        for _ in 0..draws / 100 {
            for t in buf.sample(100, &mut rng).unwrap() {
                counts[t.reward as usize] += 1;
            }
        }
        // Binomial(100_000, 1/100): mean 1000, sigma ~= 31.5. Every index
        // must land within 3 sigma for this fixed seed.
        let sigma = (draws as f64 * 0.01 * 0.99).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            assert!(
                (c as f64 - 1000.0).abs() <= 3.0 * sigma,
                "index {i} drawn {c} times (expected 1000 +/- {:.0})",
                3.0 * sigma
            );
        }
    }
}
