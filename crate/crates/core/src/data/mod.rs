//! Per-client data shards whose visible training prefix grows over a run.

pub mod idx;
pub mod partition;
pub mod synth;

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Samples;

pub use idx::load_idx;
pub use partition::{partition_noniid, PartitionPlan};
pub use synth::{synth_classification, synth_quadratic, synth_regression, SynthFederation};

/// How a shard's visible portion starts and grows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamSettings {
    pub initial_fraction_min: f64,
    pub initial_fraction_max: f64,
    pub growth_min: f64,
    pub growth_max: f64,
    /// Fraction of the train split a client may ever see.
    pub train_fraction: f64,
}

impl Default for StreamSettings {
    fn default() -> Self {
        Self {
            initial_fraction_min: 0.1,
            initial_fraction_max: 0.5,
            growth_min: 0.0005,
            growth_max: 0.001,
            train_fraction: 1.0,
        }
    }
}

impl StreamSettings {
    /// Everything visible from the start, no growth.
    pub fn static_full() -> Self {
        Self {
            initial_fraction_min: 1.0,
            initial_fraction_max: 1.0,
            growth_min: 0.0,
            growth_max: 0.0,
            train_fraction: 1.0,
        }
    }
}

/// One client's data: a fixed permutation of its samples split 60/20/20 into
/// train, validation and test, plus the currently visible train prefix.
#[derive(Debug, Clone)]
pub struct ClientShard {
    data: Arc<Samples>,
    order: Vec<usize>,
    n_train: usize,
    n_val: usize,
    train_cap: usize,
    pub visible_count: usize,
    pub growth_rate: f64,
}

impl ClientShard {
    /// Shuffles `indices` (positions in `data`) and splits them. Initial
    /// visibility and growth rate are drawn from `settings`.
    pub fn new<R: Rng>(
        data: Arc<Samples>,
        mut indices: Vec<usize>,
        settings: &StreamSettings,
        rng: &mut R,
    ) -> Result<Self> {
        let n = indices.len();
        if n < 3 {
            return Err(Error::EmptyInput(format!("shard with {n} samples cannot be split 60/20/20")));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= data.len()) {
            return Err(Error::InvalidArgument(format!("index {bad} outside dataset of {}", data.len())));
        }
        indices.shuffle(rng);
        let n_train = (n * 6 / 10).max(1);
        let n_val = (n * 2 / 10).min(n - n_train - 1);
        let train_cap = ((settings.train_fraction * n_train as f64).ceil() as usize).clamp(1, n_train);
        let frac = if settings.initial_fraction_max > settings.initial_fraction_min {
            rng.gen_range(settings.initial_fraction_min..=settings.initial_fraction_max)
        } else {
            settings.initial_fraction_min
        };
        let visible_count = ((frac * n_train as f64).round() as usize).clamp(1, train_cap);
        let growth_rate = if settings.growth_max > settings.growth_min {
            rng.gen_range(settings.growth_min..=settings.growth_max)
        } else {
            settings.growth_min
        };
        Ok(Self { data, order: indices, n_train, n_val, train_cap, visible_count, growth_rate })
    }

    /// Convenience for data owned by a single client.
    pub fn from_samples<R: Rng>(data: Samples, settings: &StreamSettings, rng: &mut R) -> Result<Self> {
        let idx = (0..data.len()).collect();
        Self::new(Arc::new(data), idx, settings, rng)
    }

    pub fn total_count(&self) -> usize {
        self.order.len()
    }

    pub fn train_count(&self) -> usize {
        self.n_train
    }

    pub fn train_cap(&self) -> usize {
        self.train_cap
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.order[..self.n_train]
    }

    pub fn visible_indices(&self) -> &[usize] {
        &self.order[..self.visible_count]
    }

    pub fn validation_indices(&self) -> &[usize] {
        &self.order[self.n_train..self.n_train + self.n_val]
    }

    pub fn test_indices(&self) -> &[usize] {
        &self.order[self.n_train + self.n_val..]
    }

    pub fn data(&self) -> &Arc<Samples> {
        &self.data
    }

    /// Gathers the visible samples at the given prefix positions. Positions at
    /// or beyond `visible_count` would leak unseen or held-out data and panic.
    pub fn train_batch(&self, positions: &[usize]) -> Samples {
        let idx: Vec<usize> = positions
            .iter()
            .map(|&p| {
                assert!(p < self.visible_count, "batch position {p} outside visible prefix {}", self.visible_count);
                self.order[p]
            })
            .collect();
        self.data.gather(&idx)
    }

    pub fn visible_samples(&self) -> Samples {
        self.data.gather(self.visible_indices())
    }

    pub fn train_samples(&self) -> Samples {
        self.data.gather(self.train_indices())
    }

    pub fn test_samples(&self) -> Samples {
        self.data.gather(self.test_indices())
    }

    /// Number of samples one growth step adds.
    pub fn growth_step(&self) -> usize {
        let raw = self.growth_rate * self.n_train as f64;
        (raw - 1e-9).ceil().max(0.0) as usize
    }

    pub fn advance(&mut self) {
        self.visible_count = (self.visible_count + self.growth_step()).min(self.train_cap);
    }
}

/// Returns the shard after one growth step; the input is left untouched.
pub fn advance_stream(shard: &ClientShard) -> ClientShard {
    let mut next = shard.clone();
    next.advance();
    next
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Targets;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn samples(n: usize) -> Samples {
        Samples::new(Array2::from_shape_fn((n, 2), |(i, j)| (i * 2 + j) as f64), Targets::Class(vec![0; n])).unwrap()
    }

    fn shard(n: usize, rate: f64) -> ClientShard {
        let settings = StreamSettings { growth_min: rate, growth_max: rate, ..StreamSettings::default() };
        ClientShard::from_samples(samples(n), &settings, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn split_is_disjoint_and_exhaustive() {
        let s = shard(1001, 0.001);
        assert_eq!(s.train_count(), 600);
        let mut all = HashSet::new();
        for i in s.train_indices().iter().chain(s.validation_indices()).chain(s.test_indices()) {
            assert!(all.insert(*i));
        }
        assert_eq!(all.len(), 1001);
        assert_eq!(s.validation_indices().len(), 200);
    }

    #[test]
    fn initial_visible_within_range() {
        let s = shard(1000, 0.001);
        assert!(s.visible_count >= 60 && s.visible_count <= 300, "{}", s.visible_count);
    }

    #[test]
    fn growth_adds_ceil_of_rate_times_train_size() {
        let s = shard(1667, 0.001);
        assert_eq!(s.train_count(), 1000);
        let next = advance_stream(&s);
        assert_eq!(next.visible_count, s.visible_count + 1);
        assert_eq!(next.growth_rate, s.growth_rate);
        assert_eq!(next.total_count(), s.total_count());
    }

    #[test]
    fn advance_is_pure() {
        let s = shard(500, 0.01);
        assert_eq!(advance_stream(&s).visible_count, advance_stream(&s).visible_count);
    }

    #[test]
    fn saturates_at_train_size() {
        let mut s = shard(100, 0.5);
        for _ in 0..10 {
            s.advance();
        }
        assert_eq!(s.visible_count, s.train_count());
        assert_eq!(advance_stream(&s).visible_count, s.visible_count);
    }

    #[test]
    fn train_fraction_caps_visibility() {
        let settings =
            StreamSettings { growth_min: 0.5, growth_max: 0.5, train_fraction: 0.5, ..StreamSettings::default() };
        let mut s = ClientShard::from_samples(samples(100), &settings, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        for _ in 0..10 {
            s.advance();
        }
        assert_eq!(s.visible_count, 30);
    }

    #[test]
    #[should_panic(expected = "outside visible prefix")]
    fn batch_outside_visible_prefix_panics() {
        let s = shard(100, 0.0);
        s.train_batch(&[s.visible_count]);
    }
}
