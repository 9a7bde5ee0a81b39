//! Declarative experiment description, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::composite::Topology;
use crate::data::SyntheticConfig;
use crate::error::{Error, Result};
use crate::module::ModuleSpec;
use crate::optim::{Hyper, OptimizerKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    pub data: DataConfig,
    pub base: BaseConfig,
    #[serde(default)]
    pub module: ModuleConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub transfer: TransferSection,
    #[serde(default)]
    pub viz: VizSection,
}

fn default_name() -> String {
    "experiment".into()
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_out() -> PathBuf {
    "runs".into()
}

/// Where source and target data come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Synthetic {
        #[serde(default = "default_synthetic_seed")]
        seed: u64,
        k_src: usize,
        k_tgt: usize,
        shift: f64,
        source_train_per_class: usize,
        source_test_per_class: usize,
        /// Pool the per-class target subsets are drawn from.
        target_train_per_class: usize,
        target_test_per_class: usize,
        #[serde(default)]
        generator: SyntheticConfig,
    },
    Idx {
        source: IdxSplit,
        /// Defaults to the source data.
        target: Option<IdxSplit>,
    },
}

fn default_synthetic_seed() -> u64 {
    1
}

/// An IDX image/label pair. The first `train` examples train, the rest test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSplit {
    pub images: PathBuf,
    pub labels: PathBuf,
    pub num_classes: Option<usize>,
    pub train: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseConfig {
    pub arch: String,
    /// Pre-trained base to reuse instead of training one per seed.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleInit {
    /// Start from the pre-trained base weights.
    Copy,
    /// Fresh draw from the run seed.
    Fresh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModuleConfig {
    /// Two-towers module architecture; defaults to the base architecture.
    pub arch: Option<String>,
    pub init: ModuleInit,
    /// Stitch module; defaults to the base scaled to a quarter of its width.
    pub stitch_arch: Option<String>,
    pub stitch_pairs: Option<Vec<(usize, usize)>>,
    /// Source-task steps for training the module beside the frozen base;
    /// defaults to `train.steps`.
    pub steps: Option<u64>,
}

impl Default for ModuleConfig {
    fn default() -> Self {
        ModuleConfig {
            arch: None,
            init: ModuleInit::Copy,
            stitch_arch: None,
            stitch_pairs: None,
            steps: None,
        }
    }
}

/// Pre-training of the base on the source task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: u64,
    pub batch_size: usize,
    pub augment: f64,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    /// Checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            steps: 1000,
            batch_size: 32,
            augment: 0.1,
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferSection {
    pub topologies: Vec<Topology>,
    pub per_class: Vec<usize>,
    pub repeats: usize,
    /// Examples per class in each batch; lowered to the largest divisor of
    /// the per-class size when it does not divide it.
    pub batch_per_class: usize,
    /// Full passes over the per-class subset.
    pub passes: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub activity_l2: Option<f64>,
    pub save_checkpoints: bool,
}

impl Default for TransferSection {
    fn default() -> Self {
        TransferSection {
            topologies: Topology::ALL.to_vec(),
            per_class: vec![1, 2, 5, 10, 25, 50],
            repeats: 5,
            batch_per_class: 2,
            passes: 1,
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            activity_l2: None,
            save_checkpoints: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VizLayer {
    pub module: String,
    pub layer: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VizSection {
    pub step_size: f64,
    pub iterations: usize,
    pub smoothing_radius: f64,
    pub layers: Vec<VizLayer>,
}

impl Default for VizSection {
    fn default() -> Self {
        VizSection {
            step_size: 0.01,
            iterations: 500,
            smoothing_radius: 1.0,
            layers: vec![VizLayer {
                module: "base".into(),
                layer: 0,
            }],
        }
    }
}

fn positive(what: &str, v: usize) -> Result<()> {
    if v == 0 {
        Err(Error::Config(format!("{what} must be at least 1")))
    } else {
        Ok(())
    }
}

fn lr_ok(what: &str, lr: f64) -> Result<()> {
    if lr > 0.0 && lr.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} learning rate {lr} must be positive")))
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative data paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        if let DataConfig::Idx { source, target } = &mut self.data {
            fix(&mut source.images);
            fix(&mut source.labels);
            if let Some(t) = target {
                fix(&mut t.images);
                fix(&mut t.labels);
            }
        }
        if let Some(c) = &mut self.base.checkpoint {
            fix(c);
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn base_spec(&self) -> Result<ModuleSpec> {
        ModuleSpec::parse("base", &self.base.arch)
    }

    pub fn module_spec(&self) -> Result<ModuleSpec> {
        match &self.module.arch {
            Some(a) => ModuleSpec::parse("module", a),
            None => Ok(ModuleSpec::new("module", self.base_spec()?.layers)),
        }
    }

    pub fn stitch_spec(&self) -> Result<ModuleSpec> {
        match &self.module.stitch_arch {
            Some(a) => ModuleSpec::parse("stitch", a),
            None => Ok(self.base_spec()?.scaled("stitch", 1, 4)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        self.base_spec().map_err(|e| Error::Config(format!("base: {e}")))?;
        self.module_spec().map_err(|e| Error::Config(format!("module: {e}")))?;
        self.stitch_spec().map_err(|e| Error::Config(format!("stitch: {e}")))?;
        match &self.data {
            DataConfig::Synthetic {
                k_src,
                k_tgt,
                shift,
                source_train_per_class,
                target_train_per_class,
                target_test_per_class,
                ..
            } => {
                if *k_src < 2 || *k_tgt < 2 {
                    return Err(Error::Config("synthetic tasks need at least two classes".into()));
                }
                if !(0.0..=1.0).contains(shift) {
                    return Err(Error::Config(format!("shift {shift} outside [0, 1]")));
                }
                positive("source_train_per_class", *source_train_per_class)?;
                positive("target_test_per_class", *target_test_per_class)?;
                if let Some(&p) = self.transfer.per_class.iter().find(|&&p| p > *target_train_per_class) {
                    return Err(Error::Config(format!(
                        "per_class {p} exceeds the target pool of {target_train_per_class} per class"
                    )));
                }
            }
            DataConfig::Idx { source, target } => {
                positive("source train size", source.train)?;
                if let Some(t) = target {
                    positive("target train size", t.train)?;
                }
            }
        }
        let t = &self.train;
        positive("train.batch_size", t.batch_size)?;
        lr_ok("train", t.lr)?;
        if !(0.0..1.0).contains(&t.augment) {
            return Err(Error::Config(format!("train.augment {} outside [0, 1)", t.augment)));
        }
        let x = &self.transfer;
        if x.topologies.is_empty() {
            return Err(Error::Config("transfer.topologies must not be empty".into()));
        }
        if x.per_class.is_empty() || x.per_class.contains(&0) {
            return Err(Error::Config("transfer.per_class values must be positive".into()));
        }
        positive("transfer.repeats", x.repeats)?;
        positive("transfer.batch_per_class", x.batch_per_class)?;
        positive("transfer.passes", x.passes)?;
        lr_ok("transfer", x.lr)?;
        if let Some(l) = x.activity_l2 {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::Config(format!("activity_l2 {l} must be finite and >= 0")));
            }
        }
        let v = &self.viz;
        positive("viz.iterations", v.iterations)?;
        if !(v.step_size > 0.0) {
            return Err(Error::Config("viz.step_size must be positive".into()));
        }
        Ok(())
    }

    pub fn train_hyper(&self) -> Hyper {
        Hyper::with_lr(self.train.lr)
    }

    pub fn transfer_hyper(&self) -> Hyper {
        Hyper::with_lr(self.transfer.lr)
    }
}

/// Largest divisor of `per_class` not above `cap`.
pub fn batch_per_class(per_class: usize, cap: usize) -> usize {
    (1..=cap.min(per_class)).rev().find(|d| per_class % d == 0).unwrap_or(1)
}
