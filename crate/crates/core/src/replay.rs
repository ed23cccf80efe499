//! Bounded FIFO replay buffer with uniform sampling and reuse accounting.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::io::Write;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    #[default]
    WithReplacement,
    WithoutReplacement,
}

/// Lifetime statistics of an evicted trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Retired {
    pub id: u64,
    pub times_sampled: u64,
    /// Index of the push that inserted it (0-based).
    pub pushed_at: u64,
    /// Index of the push that evicted it.
    pub evicted_at: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Staleness {
    pub mean_age: f64,
    pub max_age: u64,
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    mode: SamplingMode,
    store: VecDeque<(Trajectory, u64)>,
    ids: HashSet<u64>,
    push_count: u64,
    evict_count: u64,
    reuse: BTreeMap<u64, u64>,
    retired: Vec<Retired>,
    retired_uses: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, mode: SamplingMode) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("replay capacity must be at least 1"));
        }
        Ok(Self {
            capacity,
            mode,
            store: VecDeque::with_capacity(capacity),
            ids: HashSet::new(),
            push_count: 0,
            evict_count: 0,
            reuse: BTreeMap::new(),
            retired: Vec::new(),
            retired_uses: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.store.len()
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }

    pub fn push_count(&self) -> u64 {
        self.push_count
    }

    pub fn evict_count(&self) -> u64 {
        self.evict_count
    }

    /// Times each resident trajectory has been used in an update, keyed by id.
    pub fn reuse_histogram(&self) -> &BTreeMap<u64, u64> {
        &self.reuse
    }

    pub fn retired(&self) -> &[Retired] {
        &self.retired
    }

    /// Mean number of uses over evicted trajectories, once any exist.
    pub fn retired_mean_uses(&self) -> Option<f64> {
        (!self.retired.is_empty()).then(|| self.retired_uses as f64 / self.retired.len() as f64)
    }

    /// Counts one use of each resident trajectory in `ids` that was handed
    /// to an update without going through [`ReplayBuffer::sample_uniform`].
    pub fn record_use(&mut self, ids: impl IntoIterator<Item = u64>) {
        for id in ids {
            if let Some(n) = self.reuse.get_mut(&id) {
                *n += 1;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Trajectory> {
        self.store.iter().map(|(t, _)| t)
    }

    /// Appends a batch and evicts the oldest entries beyond capacity.
    /// Returns the number evicted.
    pub fn push_batch(&mut self, batch: Vec<Trajectory>) -> Result<usize> {
        if batch.is_empty() {
            return Ok(0);
        }
        let mut seen = HashSet::with_capacity(batch.len());
        for t in &batch {
            if self.ids.contains(&t.id) || !seen.insert(t.id) {
                return Err(Error::contract(format!("duplicate trajectory id {}", t.id)));
            }
        }
        let push = self.push_count;
        for t in batch {
            self.ids.insert(t.id);
            self.reuse.insert(t.id, 0);
            self.store.push_back((t, push));
        }
        let mut evicted = 0;
        while self.store.len() > self.capacity {
            let (old, pushed_at) = self.store.pop_front().expect("nonempty");
            self.ids.remove(&old.id);
            let times_sampled = self.reuse.remove(&old.id).unwrap_or(0);
            self.retired_uses += times_sampled;
            self.retired.push(Retired {
                id: old.id,
                times_sampled,
                pushed_at,
                evicted_at: push,
            });
            evicted += 1;
        }
        self.push_count += 1;
        self.evict_count += evicted as u64;
        Ok(evicted)
    }

    /// Draws `n` trajectories uniformly from the current contents.
    pub fn sample_uniform(&mut self, n: usize, seed: u64) -> Result<Vec<Trajectory>> {
        if self.store.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picks: Vec<usize> = match self.mode {
            SamplingMode::WithReplacement => (0..n).map(|_| rng.gen_range(0..self.store.len())).collect(),
            SamplingMode::WithoutReplacement => {
                if n > self.store.len() {
                    return Err(Error::contract(format!(
                        "cannot draw {n} distinct trajectories from {}",
                        self.store.len()
                    )));
                }
                index::sample(&mut rng, self.store.len(), n).into_vec()
            }
        };
        Ok(picks
            .into_iter()
            .map(|i| {
                let t = self.store[i].0.clone();
                *self.reuse.get_mut(&t.id).expect("resident ids are tracked") += 1;
                t
            })
            .collect())
    }

    /// Ages in iterations relative to `current_iter`.
    pub fn staleness_stats(&self, current_iter: u64) -> Result<Staleness> {
        if self.store.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        let ages: Vec<u64> = self
            .iter()
            .map(|t| current_iter.saturating_sub(t.collected_at_iter))
            .collect();
        Ok(Staleness {
            mean_age: ages.iter().sum::<u64>() as f64 / ages.len() as f64,
            max_age: *ages.iter().max().expect("nonempty"),
        })
    }

    /// Writes the resident trajectories as JSON lines, oldest first.
    pub fn dump_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for t in self.iter() {
            serde_json::to_writer(&mut out, t).map_err(|e| Error::Io(e.into()))?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// `⌊M/B⌋ · (B/M) · K`: expected number of updates a trajectory joins.
pub fn expected_reuse(capacity: usize, batch: usize, updates_per_iter: usize) -> Result<f64> {
    if batch == 0 || capacity < batch || updates_per_iter == 0 {
        return Err(Error::contract("expected_reuse needs M >= B >= 1 and K >= 1"));
    }
    let residence = (capacity / batch) as f64;
    Ok(residence * (batch as f64 / capacity as f64) * updates_per_iter as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::State;

    fn traj(id: u64, iter: u64) -> Trajectory {
        Trajectory {
            id,
            prompt: State::prompt(vec![0]),
            actions: vec![0],
            behavior_logprobs: vec![0.0],
            rule_reward: 0.0,
            reward: 0.0,
            collected_at_iter: iter,
        }
    }

    fn batch(start: u64, n: u64, iter: u64) -> Vec<Trajectory> {
        (start..start + n).map(|i| traj(i, iter)).collect()
    }

    #[test]
    fn full_sized_push() {
        let mut buf = ReplayBuffer::new(5120, SamplingMode::WithReplacement).unwrap();
        assert_eq!(buf.push_batch(batch(0, 1024, 0)).unwrap(), 0);
        assert_eq!(buf.len(), 1024);
    }

    #[test]
    fn evicts_oldest_first() {
        let mut buf = ReplayBuffer::new(4, SamplingMode::WithReplacement).unwrap();
        buf.push_batch(batch(0, 4, 0)).unwrap();
        assert_eq!(buf.push_batch(batch(4, 2, 1)).unwrap(), 2);
        let ids: Vec<u64> = buf.iter().map(|t| t.id).collect();
        assert_eq!(ids, vec![2, 3, 4, 5]);
        let gone: Vec<u64> = buf.retired().iter().map(|r| r.id).collect();
        assert_eq!(gone, vec![0, 1]);
        assert_eq!(buf.push_batch(Vec::new()).unwrap(), 0);
        assert_eq!(buf.push_count(), 2);
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let mut buf = ReplayBuffer::new(4, SamplingMode::WithReplacement).unwrap();
        buf.push_batch(batch(0, 2, 0)).unwrap();
        assert!(buf.push_batch(batch(1, 1, 1)).is_err());
    }

    #[test]
    fn single_item_is_drawn_repeatedly() {
        let mut buf = ReplayBuffer::new(4, SamplingMode::WithReplacement).unwrap();
        buf.push_batch(batch(9, 1, 0)).unwrap();
        let s = buf.sample_uniform(3, 1).unwrap();
        assert!(s.iter().all(|t| t.id == 9));
        assert_eq!(buf.reuse_histogram()[&9], 3);
    }

    #[test]
    fn empty_buffer_errors() {
        let mut buf = ReplayBuffer::new(4, SamplingMode::WithReplacement).unwrap();
        assert!(matches!(buf.sample_uniform(1, 0), Err(Error::EmptyBuffer)));
        assert!(matches!(buf.staleness_stats(0), Err(Error::EmptyBuffer)));
    }

    #[test]
    fn sampling_is_seeded() {
        let mut a = ReplayBuffer::new(10, SamplingMode::WithReplacement).unwrap();
        a.push_batch(batch(0, 10, 0)).unwrap();
        let mut b = a.clone();
        let ids = |v: Vec<Trajectory>| v.into_iter().map(|t| t.id).collect::<Vec<_>>();
        assert_eq!(
            ids(a.sample_uniform(20, 5).unwrap()),
            ids(b.sample_uniform(20, 5).unwrap())
        );
    }

    #[test]
    fn uniform_frequencies() {
        let mut buf = ReplayBuffer::new(5, SamplingMode::WithReplacement).unwrap();
        buf.push_batch(batch(0, 5, 0)).unwrap();
        let n = 100_000;
        buf.sample_uniform(n, 17).unwrap();
        let sigma = (0.2f64 * 0.8 / n as f64).sqrt();
        for (_, &count) in buf.reuse_histogram() {
            let freq = count as f64 / n as f64;
            assert!((freq - 0.2).abs() <= 3.0 * sigma, "frequency {freq}");
        }
    }

    #[test]
    fn without_replacement_draws_distinct() {
        let mut buf = ReplayBuffer::new(6, SamplingMode::WithoutReplacement).unwrap();
        buf.push_batch(batch(0, 6, 0)).unwrap();
        let mut ids: Vec<u64> = buf.sample_uniform(6, 3).unwrap().iter().map(|t| t.id).collect();
        ids.sort();
        assert_eq!(ids, (0..6).collect::<Vec<_>>());
        assert!(buf.sample_uniform(7, 3).is_err());
    }

    #[test]
    fn residence_and_empirical_reuse() {
        let (m, b, k) = (40usize, 8usize, 2usize);
        let mut buf = ReplayBuffer::new(m, SamplingMode::WithReplacement).unwrap();
        for it in 0..600u64 {
            buf.push_batch(batch(it * b as u64, b as u64, it)).unwrap();
            for u in 0..k as u64 {
                buf.sample_uniform(b, it * 10 + u).unwrap();
            }
        }
        assert!(buf
            .retired()
            .iter()
            .all(|r| r.evicted_at - r.pushed_at == (m / b) as u64));
        let mean = buf.retired_mean_uses().unwrap();
        let expected = expected_reuse(m, b, k).unwrap();
        assert!((mean - expected).abs() / expected <= 0.05, "mean reuse {mean}");
    }

    #[test]
    fn recorded_uses_count() {
        let mut buf = ReplayBuffer::new(4, SamplingMode::WithReplacement).unwrap();
        buf.push_batch(batch(0, 2, 0)).unwrap();
        buf.record_use([0, 1, 7]);
        assert_eq!(buf.reuse_histogram().values().sum::<u64>(), 2);
    }

    #[test]
    fn expected_reuse_values() {
        assert_eq!(expected_reuse(5120, 1024, 2).unwrap(), 2.0);
        assert_eq!(expected_reuse(8, 8, 5).unwrap(), 5.0);
        assert_eq!(expected_reuse(40, 8, 2).unwrap(), 2.0);
        assert!(expected_reuse(4, 8, 1).is_err());
    }

    #[test]
    fn staleness_is_bounded_by_residence() {
        let mut buf = ReplayBuffer::new(40, SamplingMode::WithReplacement).unwrap();
        buf.push_batch(batch(0, 8, 0)).unwrap();
        assert_eq!(buf.staleness_stats(0).unwrap().mean_age, 0.0);
        for it in 1..30u64 {
            buf.push_batch(batch(it * 8, 8, it)).unwrap();
            assert!(buf.staleness_stats(it).unwrap().max_age <= 5);
        }
    }
}
