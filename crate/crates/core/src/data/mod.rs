//! Datasets, IDX ingestion, augmentation, batch schedules and the seeded
//! synthetic transfer task.

mod augment;
mod idx;
mod schedule;
mod synthetic;

pub use augment::{augment_seeded, augment_shift_zoom, resample_affine};
pub use idx::{load_idx, load_idx_with_classes, read_idx_images, read_idx_labels, write_idx};
pub use schedule::{small_data_schedule, BatchSchedule};
pub use synthetic::{gen_synthetic_transfer, nearest_prototype_accuracy, SyntheticConfig, SyntheticTask};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Images in `(C,H,W)` layout with values in `[0,1]`, and their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn new(images: Vec<Tensor>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::CountMismatch {
                images: images.len(),
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Contract(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if let Some(first) = images.first() {
            if images.iter().any(|i| i.shape() != first.shape()) {
                return Err(Error::Shape("dataset images differ in shape".into()));
            }
        }
        Ok(LabeledDataset {
            images,
            labels,
            num_classes,
        })
    }

    pub fn empty(num_classes: usize) -> Self {
        LabeledDataset {
            images: vec![],
            labels: vec![],
            num_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> Option<&[usize]> {
        self.images.first().map(|i| i.shape())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Example indices grouped by class, in dataset order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// First `n` examples and the rest.
    pub fn split_at(&self, n: usize) -> (LabeledDataset, LabeledDataset) {
        let n = n.min(self.len());
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        (self.subset(&head), self.subset(&tail))
    }
}

/// Exactly `n` examples of every class, drawn without replacement from a
/// stream seeded by `seed`. Selected examples keep their dataset order.
pub fn subsample_per_class(ds: &LabeledDataset, n: usize, seed: u64) -> Result<LabeledDataset> {
    let by_class = ds.indices_by_class();
    for (class, idx) in by_class.iter().enumerate() {
        if idx.len() < n {
            return Err(Error::InsufficientClass {
                class,
                available: idx.len(),
                requested: n,
            });
        }
    }
    let mut chosen = Vec::with_capacity(n * ds.num_classes);
    for (class, mut idx) in by_class.into_iter().enumerate() {
        let mut r = rng::stream(seed, "subsample", class as u64);
        let (picked, _) = idx.partial_shuffle(&mut r, n);
        chosen.extend_from_slice(picked);
    }
    chosen.sort_unstable();
    Ok(ds.subset(&chosen))
}
