use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::LabeledDataset;
use crate::error::{Error, Result};
use crate::files::hex;
use crate::rng;

/// Class-balanced batches, each presented `repeats` consecutive times
/// before the next one.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSchedule {
    pub batches: Vec<Vec<usize>>,
    pub repeats: usize,
}

impl BatchSchedule {
    pub fn batch_size(&self) -> usize {
        self.batches.first().map_or(0, Vec::len)
    }

    /// Every presentation in order: `(batch_index, indices)`, each batch
    /// yielded `repeats` times in a row.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &[usize])> + '_ {
        self.batches
            .iter()
            .enumerate()
            .flat_map(move |(i, b)| std::iter::repeat_n((i, &b[..]), self.repeats))
    }

    pub fn presentations(&self) -> usize {
        self.batches.len() * self.repeats
    }

    /// SHA-256 over the full presented index stream.
    pub fn stream_hash(&self) -> String {
        let mut h = Sha256::new();
        for (i, batch) in self.iter() {
            h.update((i as u64).to_le_bytes());
            for &idx in batch {
                h.update((idx as u64).to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

/// Splits a class-balanced dataset into batches holding exactly `per_class`
/// examples of every class. Class members are shuffled by `seed` first.
pub fn small_data_schedule(
    ds: &LabeledDataset,
    per_class: usize,
    repeats: usize,
    seed: u64,
) -> Result<BatchSchedule> {
    if per_class == 0 || repeats == 0 {
        return Err(Error::Contract("per_class and repeats must be at least 1".into()));
    }
    let mut by_class = ds.indices_by_class();
    let count = by_class.first().map_or(0, Vec::len);
    if let Some((c, idx)) = by_class.iter().enumerate().find(|(_, v)| v.len() != count) {
        return Err(Error::Imbalance(format!(
            "class {c} has {} examples, class 0 has {count}",
            idx.len()
        )));
    }
    if count % per_class != 0 {
        return Err(Error::Imbalance(format!(
            "{count} examples per class do not split into batches of {per_class} per class"
        )));
    }
    for (c, idx) in by_class.iter_mut().enumerate() {
        idx.shuffle(&mut rng::stream(seed, "schedule", c as u64));
    }
    let batches = (0..count / per_class)
        .map(|b| {
            by_class
                .iter()
                .flat_map(|idx| idx[b * per_class..(b + 1) * per_class].iter().copied())
                .collect()
        })
        .collect();
    Ok(BatchSchedule { batches, repeats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn balanced(k: usize, n: usize) -> LabeledDataset {
        let labels: Vec<usize> = (0..k * n).map(|i| i % k).collect();
        let images = labels.iter().map(|_| Tensor::zeros(&[1, 1, 1])).collect();
        LabeledDataset::new(images, labels, k).unwrap()
    }

    #[test]
    fn hundred_class_batch_size() {
        let s = small_data_schedule(&balanced(100, 4), 2, 5, 0).unwrap();
        assert_eq!(s.batch_size(), 200);
        assert_eq!(s.batches.len(), 2);
    }

    #[test]
    fn repeats_are_consecutive_and_each_example_once_per_pass() {
        let ds = balanced(10, 6);
        let s = small_data_schedule(&ds, 2, 5, 1).unwrap();
        assert_eq!(s.batch_size(), 20);
        let seq: Vec<usize> = s.iter().map(|(i, _)| i).collect();
        assert_eq!(seq, [0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 2, 2, 2, 2, 2]);
        let mut all: Vec<usize> = s.batches.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..60).collect::<Vec<_>>());
        for b in &s.batches {
            let mut counts = vec![0; 10];
            b.iter().for_each(|&i| counts[ds.labels[i]] += 1);
            assert!(counts.iter().all(|&c| c == 2));
        }
    }

    #[test]
    fn single_repeat_is_plain_minibatching() {
        let s = small_data_schedule(&balanced(3, 4), 2, 1, 0).unwrap();
        assert_eq!(s.presentations(), 2);
    }

    #[test]
    fn imbalance_is_rejected() {
        assert!(matches!(
            small_data_schedule(&balanced(4, 5), 2, 1, 0),
            Err(Error::Imbalance(_))
        ));
        let mut ds = balanced(3, 4);
        ds.labels[0] = 1;
        assert!(matches!(small_data_schedule(&ds, 2, 1, 0), Err(Error::Imbalance(_))));
    }

    #[test]
    fn seeded_and_hashable() {
        let ds = balanced(5, 8);
        let a = small_data_schedule(&ds, 2, 3, 9).unwrap();
        assert_eq!(a, small_data_schedule(&ds, 2, 3, 9).unwrap());
        assert_ne!(a.stream_hash(), small_data_schedule(&ds, 2, 3, 10).unwrap().stream_hash());
    }
}
