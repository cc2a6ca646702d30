use std::collections::VecDeque;

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::seed::rng_for;

/// One cached sample of smashed data.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub client_id: usize,
    pub activations: Vec<f64>,
    pub label: usize,
}

/// FIFO pool of smashed samples kept by the cache-based server.
#[derive(Debug, Clone)]
pub struct CachePool {
    entries: VecDeque<CacheEntry>,
    capacity: usize,
    row_len: usize,
}

impl CachePool {
    /// `row_len` is the per-sample split-layer size.
    pub fn new(capacity: usize, row_len: usize) -> Self {
        CachePool {
            entries: VecDeque::new(),
            capacity,
            row_len,
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

    pub fn entries(&self) -> impl Iterator<Item = &CacheEntry> {
        self.entries.iter()
    }

    /// Appends an entry, evicting the oldest ones beyond capacity.
    pub fn insert(&mut self, entry: CacheEntry) -> Result<()> {
        if entry.activations.len() != self.row_len {
            return Err(Error::shape(format!(
                "cache entry has {} scalars, split layer has {}",
                entry.activations.len(),
                self.row_len
            )));
        }
        self.entries.push_back(entry);
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
        Ok(())
    }

    /// Caches every row of a smashed batch.
    pub fn insert_batch(
        &mut self,
        client_id: usize,
        activations: &Tensor,
        labels: &[usize],
    ) -> Result<()> {
        if activations.batch() != labels.len() {
            return Err(Error::protocol(format!(
                "{} activation rows but {} labels",
                activations.batch(),
                labels.len()
            )));
        }
        for (i, &label) in labels.iter().enumerate() {
            self.insert(CacheEntry {
                client_id,
                activations: activations.row(i).to_vec(),
                label,
            })?;
        }
        Ok(())
    }

    /// Draws `count` distinct entries uniformly; the whole pool if `count` exceeds it.
    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<&CacheEntry> {
        let amount = count.min(self.entries.len());
        if amount == 0 {
            return Vec::new();
        }
        index::sample(rng, self.entries.len(), amount)
            .into_iter()
            .map(|i| &self.entries[i])
            .collect()
    }

    pub fn sample_seeded(&self, count: usize, seed: u64) -> Vec<&CacheEntry> {
        self.sample(count, &mut rng_for(seed, &[]))
    }
}

/// Stacks sampled entries into a batch shaped `[n, sample_shape..]`.
pub fn stack_entries(
    entries: &[&CacheEntry],
    sample_shape: &[usize],
) -> Result<(Tensor, Vec<usize>)> {
    let mut shape = vec![entries.len()];
    shape.extend_from_slice(sample_shape);
    let data = entries
        .iter()
        .flat_map(|e| e.activations.iter().copied())
        .collect();
    Ok((
        Tensor::new(shape, data)?,
        entries.iter().map(|e| e.label).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(i: usize) -> CacheEntry {
        CacheEntry {
            client_id: i % 3,
            activations: vec![i as f64, 0.0],
            label: i % 2,
        }
    }

    #[test]
    fn fifo_eviction() {
        let mut pool = CachePool::new(10, 2);
        for i in 0..11 {
            pool.insert(entry(i)).unwrap();
        }
        assert_eq!(pool.len(), 10);
        assert!(pool.entries().all(|e| e.activations[0] != 0.0));
        assert!(pool
            .insert(CacheEntry {
                client_id: 0,
                activations: vec![1.0],
                label: 0
            })
            .is_err());
    }

    #[test]
    fn sampling_rules() {
        let mut pool = CachePool::new(50, 2);
        assert!(pool.sample_seeded(5, 1).is_empty());
        for i in 0..20 {
            pool.insert(entry(i)).unwrap();
        }
        let s = pool.sample_seeded(8, 3);
        assert_eq!(s.len(), 8);
        let mut ids: Vec<u64> = s.iter().map(|e| e.activations[0] as u64).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 8);
        assert_eq!(pool.sample_seeded(100, 3).len(), 20);
        assert_eq!(pool.sample_seeded(8, 3), s);
    }
}
