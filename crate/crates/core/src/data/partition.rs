//! Label-sorted, size-skewed non-IID partitioning.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

/// Relative shard sizes within each category.
pub const SHARD_RATIO: [usize; 4] = [2000, 2750, 3250, 4000];

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PartitionPlan {
    pub n_clients: usize,
    /// Samples per shard. Shard `s` covers `sorted[offsets[s]..offsets[s] + shard_sizes[s]]`.
    pub shard_sizes: Vec<usize>,
    pub shard_labels: Vec<usize>,
    /// Shards held by each client.
    pub label_assignment: Vec<Vec<usize>>,
    offsets: Vec<usize>,
    sorted: Vec<usize>,
}

impl PartitionPlan {
    /// Dataset indices owned by each client, shard by shard.
    pub fn client_indices(&self) -> Vec<Vec<usize>> {
        self.label_assignment
            .iter()
            .map(|shards| {
                shards
                    .iter()
                    .flat_map(|&s| self.sorted[self.offsets[s]..self.offsets[s] + self.shard_sizes[s]].iter().copied())
                    .collect()
            })
            .collect()
    }

    pub fn client_labels(&self, client: usize) -> Vec<usize> {
        let mut l: Vec<usize> = self.label_assignment[client].iter().map(|&s| self.shard_labels[s]).collect();
        l.sort_unstable();
        l.dedup();
        l
    }
}

/// Splits `count` into parts proportional to `ratio`, largest remainder first,
/// so the parts sum to exactly `count`.
pub fn proportional_sizes(count: usize, ratio: &[usize]) -> Vec<usize> {
    let total: usize = ratio.iter().sum();
    let mut sizes: Vec<usize> = ratio.iter().map(|&r| r * count / total).collect();
    let mut rem: Vec<(usize, usize)> = ratio.iter().enumerate().map(|(i, &r)| (r * count % total, i)).collect();
    rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let missing = count - sizes.iter().sum::<usize>();
    for &(_, i) in rem.iter().take(missing) {
        sizes[i] += 1;
    }
    sizes
}

/// Sorts samples by label, cuts every category into four contiguous shards
/// sized in the [`SHARD_RATIO`] proportions, and hands each client an equal
/// number of shards with pairwise different sizes (and different labels when
/// enough categories exist). A single client receives everything as one shard.
pub fn partition_noniid(labels: &[usize], n_clients: usize, seed: u64) -> Result<PartitionPlan> {
    if labels.is_empty() {
        return Err(Error::EmptyInput("no labels to partition".into()));
    }
    if n_clients == 0 {
        return Err(Error::Partition("need at least one client".into()));
    }
    let mut sorted: Vec<usize> = (0..labels.len()).collect();
    sorted.sort_by_key(|&i| labels[i]);
    let n_classes = labels.iter().copied().max().unwrap() + 1;

    if n_clients == 1 {
        return Ok(PartitionPlan {
            n_clients,
            shard_sizes: vec![labels.len()],
            shard_labels: vec![labels[sorted[0]]],
            label_assignment: vec![vec![0]],
            offsets: vec![0],
            sorted,
        });
    }

    let mut counts = vec![0usize; n_classes];
    for &l in labels {
        counts[l] += 1;
    }
    if let Some(c) = counts.iter().position(|&c| c < SHARD_RATIO.len()) {
        return Err(Error::Partition(format!("class {c} has only {} samples", counts[c])));
    }
    let n_shards = n_classes * SHARD_RATIO.len();
    if !n_shards.is_multiple_of(n_clients) {
        return Err(Error::Partition(format!(
            "{n_shards} shards ({n_classes} classes x {}) cannot be split evenly over {n_clients} clients",
            SHARD_RATIO.len()
        )));
    }
    let per_client = n_shards / n_clients;
    if per_client > SHARD_RATIO.len() {
        return Err(Error::Partition(format!("{per_client} shards per client cannot all have different sizes")));
    }

    let mut shard_sizes = Vec::with_capacity(n_shards);
    let mut shard_labels = Vec::with_capacity(n_shards);
    let mut shard_size_idx = Vec::with_capacity(n_shards);
    let mut offsets = Vec::with_capacity(n_shards);
    let mut offset = 0;
    for (class, &count) in counts.iter().enumerate() {
        for (j, size) in proportional_sizes(count, &SHARD_RATIO).into_iter().enumerate() {
            offsets.push(offset);
            offset += size;
            shard_sizes.push(size);
            shard_labels.push(class);
            shard_size_idx.push(j);
        }
    }

    let distinct_labels = n_classes >= per_client;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    const ATTEMPTS: usize = 10_000;
    for _ in 0..ATTEMPTS {
        let mut pool: Vec<usize> = (0..n_shards).collect();
        pool.shuffle(&mut rng);
        let mut assignment = Vec::with_capacity(n_clients);
        let mut ok = true;
        while !pool.is_empty() {
            let mut chosen = vec![pool.remove(0)];
            while chosen.len() < per_client {
                let pick = pool.iter().position(|&s| {
                    chosen.iter().all(|&c| {
                        shard_size_idx[c] != shard_size_idx[s]
                            && (!distinct_labels || shard_labels[c] != shard_labels[s])
                    })
                });
                match pick {
                    Some(p) => chosen.push(pool.remove(p)),
                    None => break,
                }
            }
            if chosen.len() < per_client {
                ok = false;
                break;
            }
            assignment.push(chosen);
        }
        if ok {
            return Ok(PartitionPlan {
                n_clients,
                shard_sizes,
                shard_labels,
                label_assignment: assignment,
                offsets,
                sorted,
            });
        }
    }
    Err(Error::Partition(format!("no valid shard assignment found in {ATTEMPTS} attempts")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn fmnist_like_labels(per_class: usize) -> Vec<usize> {
        (0..10 * per_class).map(|i| i % 10).collect()
    }

    #[test]
    fn rescales_ratio_to_category_count() {
        assert_eq!(proportional_sizes(6000, &SHARD_RATIO), vec![1000, 1375, 1625, 2000]);
        assert_eq!(proportional_sizes(12000, &SHARD_RATIO), vec![2000, 2750, 3250, 4000]);
        assert_eq!(proportional_sizes(7, &SHARD_RATIO).iter().sum::<usize>(), 7);
    }

    #[test]
    fn twenty_clients_ten_classes() {
        let labels = fmnist_like_labels(600);
        let plan = partition_noniid(&labels, 20, 3).unwrap();
        assert_eq!(plan.shard_sizes.len(), 40);
        assert_eq!(plan.label_assignment.len(), 20);
        let mut seen = HashSet::new();
        for (k, shards) in plan.label_assignment.iter().enumerate() {
            assert_eq!(shards.len(), 2);
            assert_ne!(plan.shard_sizes[shards[0]], plan.shard_sizes[shards[1]]);
            assert!(plan.client_labels(k).len() <= 2);
            for &s in shards {
                assert!(seen.insert(s));
            }
        }
        let idx = plan.client_indices();
        let all: HashSet<usize> = idx.iter().flatten().copied().collect();
        assert_eq!(all.len(), labels.len());
        for (k, ids) in idx.iter().enumerate() {
            let ls: HashSet<usize> = ids.iter().map(|&i| labels[i]).collect();
            assert_eq!(ls.len(), plan.client_labels(k).len());
        }
    }

    #[test]
    fn same_seed_same_plan() {
        let labels = fmnist_like_labels(100);
        assert_eq!(partition_noniid(&labels, 20, 9).unwrap(), partition_noniid(&labels, 20, 9).unwrap());
        assert_ne!(
            partition_noniid(&labels, 20, 9).unwrap().label_assignment,
            partition_noniid(&labels, 20, 10).unwrap().label_assignment
        );
    }

    #[test]
    fn single_client_single_class_gets_everything() {
        let labels = vec![0; 17];
        let plan = partition_noniid(&labels, 1, 0).unwrap();
        assert_eq!(plan.shard_sizes, vec![17]);
        assert_eq!(plan.client_indices(), vec![(0..17).collect::<Vec<_>>()]);
    }

    #[test]
    fn incompatible_counts_are_rejected() {
        let labels = fmnist_like_labels(100);
        assert!(matches!(partition_noniid(&labels, 7, 0), Err(Error::Partition(_))));
        assert!(matches!(partition_noniid(&labels, 4, 0), Err(Error::Partition(_))));
    }
}
