//! Minibatch training of a composite network.
//!
//! Everything a step depends on (parameters, optimizer moments, the
//! augmentation stream position and the step counter) lives in the trainer
//! and round-trips through a [`Checkpoint`], so a resumed run continues
//! bit for bit.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::composite::{CompositeNet, NetGraph};
use crate::data::{augment_shift_zoom, LabeledDataset};
use crate::error::{Error, Result};
use crate::optim::{Hyper, OptimizerKind, OptimizerState};
use crate::rng::{self, RngState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Maximum shift/zoom fraction; 0 disables augmentation.
    pub augment: f64,
    pub activity_l2: Option<f64>,
    pub optimizer: OptimizerKind,
    pub hyper: Hyper,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            augment: 0.0,
            activity_l2: None,
            optimizer: OptimizerKind::Adam,
            hyper: Hyper::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.augment) {
            return Err(Error::Config(format!("augment {} outside [0, 1)", self.augment)));
        }
        if let Some(l) = self.activity_l2 {
            if !(l >= 0.0) || !l.is_finite() {
                return Err(Error::Config(format!("activity_l2 {l} must be finite and >= 0")));
            }
        }
        self.hyper.validate()
    }
}

pub struct Trainer {
    pub net: NetGraph,
    pub optimizer: OptimizerState,
    pub config: TrainConfig,
    rng: ChaCha8Rng,
    pub step: u64,
}

impl Trainer {
    pub fn new(net: &CompositeNet, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            net: net.build_graph(config.activity_l2)?,
            optimizer: OptimizerState::new(config.optimizer, config.hyper),
            rng: rng::stream(config.seed, "train/augment", 0),
            config,
            step: 0,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if ck.optimizer.kind != config.optimizer || ck.optimizer.hyper != config.hyper {
            return Err(Error::Config(
                "checkpoint optimizer settings differ from the configuration".into(),
            ));
        }
        Ok(Trainer {
            net: ck.net.build_graph(config.activity_l2)?,
            optimizer: ck.optimizer.clone(),
            rng: ck.rng.restore(),
            config,
            step: ck.step,
        })
    }

    pub fn checkpoint(&self, meta: BTreeMap<String, String>) -> Checkpoint {
        Checkpoint {
            net: self.net.to_composite(),
            optimizer: self.optimizer.clone(),
            rng: RngState::capture(&self.rng),
            step: self.step,
            meta,
        }
    }

    /// One optimizer update on the given examples; returns the mean loss.
    /// Gradients are averaged over the batch.
    pub fn train_batch(&mut self, ds: &LabeledDataset, indices: &[usize]) -> Result<f64> {
        if indices.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        self.net.graph.zero_grad();
        let mut total = 0.0;
        for &i in indices {
            let loss = if self.config.augment > 0.0 {
                let img = augment_shift_zoom(&ds.images[i], self.config.augment, &mut self.rng);
                self.net.accumulate(&img, ds.labels[i])?
            } else {
                self.net.accumulate(&ds.images[i], ds.labels[i])?
            };
            total += loss;
        }
        let scale = 1.0 / indices.len() as f64;
        self.optimizer.step_graph(&mut self.net.graph, scale)?;
        self.step += 1;
        let mean = total * scale;
        if !mean.is_finite() {
            return Err(Error::NonFinite(format!("mean loss at step {}", self.step)));
        }
        Ok(mean)
    }

    /// Indices of the batch for global step `step`: epochs are seeded
    /// permutations of the dataset cut into consecutive batches; a short
    /// tail batch is dropped.
    pub fn batch_indices(&self, n: usize, step: u64) -> Vec<usize> {
        let bs = self.config.batch_size.min(n);
        let per_epoch = (n / bs) as u64;
        let (epoch, k) = (step / per_epoch, (step % per_epoch) as usize);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng::stream(self.config.seed, "train/epoch", epoch));
        perm[k * bs..(k + 1) * bs].to_vec()
    }

    /// Runs `steps` minibatch updates over `ds`, continuing from the
    /// current step counter. Returns the mean loss of each step.
    pub fn train_steps(&mut self, ds: &LabeledDataset, steps: u64) -> Result<Vec<f64>> {
        if ds.is_empty() {
            return Err(Error::Contract("cannot train on an empty dataset".into()));
        }
        let mut losses = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let idx = self.batch_indices(ds.len(), self.step);
            losses.push(self.train_batch(ds, &idx)?);
        }
        Ok(losses)
    }

    pub fn steps_per_epoch(&self, n: usize) -> u64 {
        (n / self.config.batch_size.min(n).max(1)) as u64
    }

    pub fn accuracy(&mut self, ds: &LabeledDataset) -> Result<f64> {
        self.net.accuracy(ds)
    }
}
