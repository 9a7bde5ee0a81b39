//! Experiment drivers: pre-train a base, run matched transfer comparisons
//! over per-class data sizes, visualize filters, resume training.

mod config;
mod curve;
mod plot;

pub use config::{
    batch_per_class, BaseConfig, DataConfig, ExperimentConfig, IdxSplit, ModuleConfig, ModuleInit,
    TrainSection, TransferSection, VizLayer, VizSection,
};
pub use curve::{CurveRow, LearningCurve, CSV_HEADER};
pub use plot::plot_svg;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{frozen_hash, Checkpoint};
use crate::composite::{
    compose_finetune, compose_scratch, compose_stitch, compose_two_towers, default_stitch_pairs,
    CompositeNet, Topology,
};
use crate::data::{load_idx_with_classes, small_data_schedule, subsample_per_class, LabeledDataset, SyntheticTask};
use crate::error::{Error, Result};
use crate::files::{hex, write_atomic};
use crate::module::{build_module, set_frozen, Module};
use crate::rng::derive_seed;
use crate::train::{TrainConfig, Trainer};
use crate::viz::{render_gallery, GalleryEntry, VizConfig};

/// Train/test splits of the source and target tasks.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub source_train: LabeledDataset,
    pub source_test: LabeledDataset,
    pub target_train: LabeledDataset,
    pub target_test: LabeledDataset,
}

impl Datasets {
    pub fn input_shape(&self) -> Result<Vec<usize>> {
        self.source_train
            .image_shape()
            .map(<[usize]>::to_vec)
            .ok_or_else(|| Error::Contract("source training set is empty".into()))
    }
}

fn load_split(split: &IdxSplit) -> Result<(LabeledDataset, LabeledDataset)> {
    let ds = load_idx_with_classes(&split.images, &split.labels, split.num_classes)?;
    if split.train >= ds.len() {
        return Err(Error::Config(format!(
            "train size {} leaves no test examples out of {}",
            split.train,
            ds.len()
        )));
    }
    Ok(ds.split_at(split.train))
}

pub fn load_datasets(cfg: &ExperimentConfig) -> Result<Datasets> {
    match &cfg.data {
        DataConfig::Synthetic {
            seed,
            k_src,
            k_tgt,
            shift,
            source_train_per_class,
            source_test_per_class,
            target_train_per_class,
            target_test_per_class,
            generator,
        } => {
            let task = SyntheticTask::new(generator.clone(), *seed, *k_src, *k_tgt, *shift);
            Ok(Datasets {
                source_train: task.sample_source(*source_train_per_class, 0),
                source_test: task.sample_source(*source_test_per_class, 1),
                target_train: task.sample_target(*target_train_per_class, 0),
                target_test: task.sample_target(*target_test_per_class, 1),
            })
        }
        DataConfig::Idx { source, target } => {
            let (source_train, source_test) = load_split(source)?;
            let (target_train, target_test) = match target {
                Some(t) => load_split(t)?,
                None => (source_train.clone(), source_test.clone()),
            };
            Ok(Datasets {
                source_train,
                source_test,
                target_train,
                target_test,
            })
        }
    }
}

fn digest(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    hex(&h.finalize())[..16].to_string()
}

/// Identifies what a pre-trained base depends on, apart from its step
/// budget and checkpoint cadence.
pub fn base_fingerprint(cfg: &ExperimentConfig, seed: u64) -> String {
    let data = toml::to_string(&cfg.data).expect("serializable");
    let train = toml::to_string(&TrainSection {
        steps: 0,
        checkpoint_every: 0,
        ..cfg.train.clone()
    })
    .expect("serializable");
    digest(&[&data, &cfg.base.arch, &train, &seed.to_string()])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub seed: u64,
    pub checkpoint: PathBuf,
    pub step: u64,
    pub test_accuracy: f64,
}

pub fn base_checkpoint_path(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("base_seed{seed}.ckpt"))
}

fn base_train_config(cfg: &ExperimentConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: cfg.train.batch_size,
        augment: cfg.train.augment,
        activity_l2: None,
        optimizer: cfg.train.optimizer,
        hyper: cfg.train_hyper(),
        seed,
    }
}

fn base_meta(cfg: &ExperimentConfig, seed: u64) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("kind".to_string(), "base".to_string()),
        ("seed".to_string(), seed.to_string()),
        ("fingerprint".to_string(), base_fingerprint(cfg, seed)),
    ])
}

/// Continues `trainer` to `cfg.train.steps`, checkpointing along the way,
/// and reports held-out accuracy.
fn run_base_training(
    cfg: &ExperimentConfig,
    data: &Datasets,
    mut trainer: Trainer,
    seed: u64,
    out: &Path,
) -> Result<TrainOutcome> {
    let path = base_checkpoint_path(out, seed);
    let every = cfg.train.checkpoint_every;
    while trainer.step < cfg.train.steps {
        let chunk = match every {
            0 => cfg.train.steps - trainer.step,
            n => n.min(cfg.train.steps - trainer.step),
        };
        trainer.train_steps(&data.source_train, chunk)?;
        if every > 0 && trainer.step < cfg.train.steps {
            trainer.checkpoint(base_meta(cfg, seed)).save(&path)?;
        }
    }
    let test_accuracy = trainer.accuracy(&data.source_test)?;
    let mut meta = base_meta(cfg, seed);
    meta.insert("test_accuracy".into(), format!("{test_accuracy}"));
    trainer.checkpoint(meta).save(&path)?;
    let outcome = TrainOutcome {
        seed,
        checkpoint: path,
        step: trainer.step,
        test_accuracy,
    };
    let summary = serde_json::to_vec_pretty(&outcome).expect("serializable");
    write_atomic(out.join(format!("train_seed{seed}.json")), &summary)?;
    Ok(outcome)
}

/// Trains the base network (with its own source-task head) from scratch.
pub fn cmd_train(cfg: &ExperimentConfig, data: &Datasets, seed: u64, out: &Path) -> Result<TrainOutcome> {
    let spec = cfg.base_spec()?;
    let shape = data.input_shape()?;
    let module = build_module(&spec, &shape, derive_seed(seed, "base", 0))?;
    let net = compose_finetune(module, data.source_train.num_classes, seed)?;
    let trainer = Trainer::new(&net, base_train_config(cfg, seed))?;
    run_base_training(cfg, data, trainer, seed, out)
}

/// Picks up base training from a checkpoint written by [`cmd_train`].
pub fn cmd_resume(cfg: &ExperimentConfig, data: &Datasets, checkpoint: &Path, out: &Path) -> Result<TrainOutcome> {
    let ck = Checkpoint::load(checkpoint)?;
    let seed: u64 = ck
        .meta
        .get("seed")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Corrupt("checkpoint does not record its seed".into()))?;
    if ck.meta.get("fingerprint") != Some(&base_fingerprint(cfg, seed)) {
        return Err(Error::Config(
            "checkpoint was written under a different data/base/train configuration".into(),
        ));
    }
    let trainer = Trainer::from_checkpoint(&ck, base_train_config(cfg, seed))?;
    run_base_training(cfg, data, trainer, seed, out)
}

/// Trains a two-towers module (and head) beside the frozen pre-trained base
/// on the source task itself. Writes `module_seed{seed}.ckpt`.
pub fn cmd_train_module(cfg: &ExperimentConfig, data: &Datasets, seed: u64, out: &Path) -> Result<TrainOutcome> {
    let base = pretrained_base(cfg, data, seed, out)?;
    let net = build_topology(cfg, Topology::TwoTowers, &base, data.source_train.num_classes, seed)?;
    let expected = frozen_hash(&net);
    let mut trainer = Trainer::new(&net, base_train_config(cfg, seed))?;
    trainer.train_steps(&data.source_train, cfg.module.steps.unwrap_or(cfg.train.steps))?;
    let test_accuracy = trainer.accuracy(&data.source_test)?;
    let ck = trainer.checkpoint(BTreeMap::from([
        ("kind".to_string(), "module".to_string()),
        ("seed".to_string(), seed.to_string()),
        ("test_accuracy".to_string(), format!("{test_accuracy}")),
    ]));
    if ck.frozen_hash() != expected {
        return Err(Error::Contract("frozen base changed during module training".into()));
    }
    let path = out.join(format!("module_seed{seed}.ckpt"));
    ck.save(&path)?;
    Ok(TrainOutcome {
        seed,
        checkpoint: path,
        step: trainer.step,
        test_accuracy,
    })
}

/// The pre-trained base for `seed`: the configured checkpoint, a matching
/// one already in `out`, or a freshly trained one.
pub fn pretrained_base(cfg: &ExperimentConfig, data: &Datasets, seed: u64, out: &Path) -> Result<Module> {
    let ck = if let Some(p) = &cfg.base.checkpoint {
        Checkpoint::load(p)?
    } else {
        let path = base_checkpoint_path(out, seed);
        let cached = Checkpoint::load(&path).ok().filter(|ck| {
            ck.step == cfg.train.steps && ck.meta.get("fingerprint") == Some(&base_fingerprint(cfg, seed))
        });
        match cached {
            Some(ck) => ck,
            None => Checkpoint::load(cmd_train(cfg, data, seed, out)?.checkpoint)?,
        }
    };
    let base = ck.net.base;
    let spec = cfg.base_spec()?;
    if base.spec.layers != spec.layers || base.input_shape != data.input_shape()? {
        return Err(Error::Config(format!(
            "checkpoint base {} on {:?} does not match configured {} on {:?}",
            base.spec.arch(),
            base.input_shape,
            spec.arch(),
            data.input_shape()?
        )));
    }
    Ok(base)
}

/// Builds one transfer topology around a pre-trained base. Every
/// topology uses `seed` for its head, so the fine-tune head and the
/// trainable block of the two-towers head start equal.
pub fn build_topology(
    cfg: &ExperimentConfig,
    topology: Topology,
    base: &Module,
    num_classes: usize,
    seed: u64,
) -> Result<CompositeNet> {
    match topology {
        Topology::Finetune => compose_finetune(set_frozen(base.clone(), false), num_classes, seed),
        Topology::TwoTowers => {
            let spec = cfg.module_spec()?;
            let module = match cfg.module.init {
                ModuleInit::Copy => {
                    if spec.layers != base.spec.layers {
                        return Err(Error::Config(
                            "module.init = \"copy\" needs the module architecture to equal the base".into(),
                        ));
                    }
                    let mut m = base.clone();
                    m.spec.name = spec.name.clone();
                    m.spec.frozen = false;
                    m
                }
                ModuleInit::Fresh => build_module(&spec, &base.input_shape, derive_seed(seed, "module", 0))?,
            };
            compose_two_towers(set_frozen(base.clone(), true), module, num_classes, seed)
        }
        Topology::Stitch => {
            let spec = cfg.stitch_spec()?;
            let pairs = match &cfg.module.stitch_pairs {
                Some(p) => p.clone(),
                None => default_stitch_pairs(&base.spec, &spec),
            };
            compose_stitch(set_frozen(base.clone(), true), &spec, &pairs, num_classes, seed)
        }
        Topology::Scratch => compose_scratch(&base.spec, &base.input_shape, num_classes, seed),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TransferSummary {
    /// `"topology/per_class"` -> mean final accuracy over seeds.
    pub mean_final: BTreeMap<String, f64>,
    /// `"seed/per_class"` -> stream hash shared by every topology.
    pub stream_hashes: BTreeMap<String, String>,
    /// `"seed"` -> frozen-parameter hash of the base, identical before and
    /// after training for every topology that freezes it.
    pub frozen_hashes: BTreeMap<String, String>,
    /// `"seed/topology"` -> trainable parameter count.
    pub trainable: BTreeMap<String, usize>,
}

#[derive(Clone, Debug)]
pub struct TransferOutcome {
    pub curve: LearningCurve,
    pub summary: TransferSummary,
}

/// One `(seed, per_class)` cell: every topology trained on the identical
/// presentation stream, evaluated after each batch.
fn transfer_cell(
    cfg: &ExperimentConfig,
    data: &Datasets,
    base: &Module,
    seed: u64,
    per_class: usize,
    out: &Path,
    summary: &mut TransferSummary,
) -> Result<Vec<CurveRow>> {
    let x = &cfg.transfer;
    let subset = subsample_per_class(&data.target_train, per_class, derive_seed(seed, "subset", per_class as u64))?;
    let bpc = batch_per_class(per_class, x.batch_per_class);
    let schedules = (0..x.passes)
        .map(|p| {
            small_data_schedule(
                &subset,
                bpc,
                x.repeats,
                derive_seed(seed, &format!("schedule/{per_class}"), p as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let k = data.target_train.num_classes;
    let base_hash = frozen_hash(&compose_two_towers(
        set_frozen(base.clone(), true),
        set_frozen(base.clone(), false),
        k,
        seed,
    )?);
    let mut rows = Vec::new();
    let mut stream_hash = None;
    for &topology in &x.topologies {
        let net = build_topology(cfg, topology, base, k, seed)?;
        summary
            .trainable
            .insert(format!("{seed}/{topology}"), net.trainable_count());
        let frozen_before = frozen_hash(&net);
        let mut trainer = Trainer::new(
            &net,
            TrainConfig {
                batch_size: bpc * k,
                augment: 0.0,
                activity_l2: x.activity_l2,
                optimizer: x.optimizer,
                hyper: cfg.transfer_hyper(),
                seed,
            },
        )?;
        let mut hasher = Sha256::new();
        let mut seen = 0u64;
        let mut batch_index = 0usize;
        for schedule in &schedules {
            for batch in &schedule.batches {
                for _ in 0..schedule.repeats {
                    for &i in batch {
                        hasher.update((i as u64).to_le_bytes());
                    }
                    trainer.train_batch(&subset, batch)?;
                    seen += batch.len() as u64;
                }
                rows.push(CurveRow {
                    seed,
                    topology,
                    per_class,
                    examples_seen: seen,
                    batch_index,
                    test_accuracy: trainer.accuracy(&data.target_test)?,
                });
                batch_index += 1;
            }
        }
        let h = hex(&hasher.finalize());
        match &stream_hash {
            None => stream_hash = Some(h),
            Some(prev) if *prev != h => {
                return Err(Error::Contract(format!(
                    "{topology} consumed a different example stream"
                )))
            }
            Some(_) => {}
        }
        let trained = trainer.net.to_composite();
        let frozen_after = frozen_hash(&trained);
        if frozen_after != frozen_before {
            return Err(Error::Contract(format!("{topology}: frozen parameters changed")));
        }
        if matches!(topology, Topology::TwoTowers | Topology::Stitch) && frozen_after != base_hash {
            return Err(Error::Contract(format!("{topology}: frozen base differs from pre-trained")));
        }
        if x.save_checkpoints {
            let meta = BTreeMap::from([
                ("kind".to_string(), "transfer".to_string()),
                ("seed".to_string(), seed.to_string()),
                ("topology".to_string(), topology.to_string()),
                ("per_class".to_string(), per_class.to_string()),
                ("frozen_hash".to_string(), frozen_after),
            ]);
            trainer
                .checkpoint(meta)
                .save(out.join("checkpoints").join(format!("seed{seed}_{topology}_pc{per_class}.ckpt")))?;
        }
    }
    summary.frozen_hashes.insert(seed.to_string(), base_hash);
    if let Some(h) = stream_hash {
        summary.stream_hashes.insert(format!("{seed}/{per_class}"), h);
    }
    Ok(rows)
}

/// Runs every seed x per_class x topology cell and writes `curves.csv`,
/// `curves.svg` and `summary.json` under `out`.
pub fn cmd_transfer_compare(cfg: &ExperimentConfig, data: &Datasets, out: &Path) -> Result<TransferOutcome> {
    let mut curve = LearningCurve::default();
    let mut summary = TransferSummary::default();
    for &seed in &cfg.seeds {
        let base = pretrained_base(cfg, data, seed, out)?;
        for &pc in &cfg.transfer.per_class {
            curve.rows.extend(transfer_cell(cfg, data, &base, seed, pc, out, &mut summary)?);
        }
    }
    curve.sort();
    curve.validate()?;
    summary.mean_final = curve
        .mean_finals()
        .into_iter()
        .map(|((t, pc), a)| (format!("{t}/{pc}"), a))
        .collect();
    curve.save(out.join("curves.csv"))?;
    write_atomic(out.join("curves.svg"), plot_svg(&curve).as_bytes())?;
    write_atomic(
        out.join("summary.json"),
        &serde_json::to_vec_pretty(&summary).expect("serializable"),
    )?;
    Ok(TransferOutcome { curve, summary })
}

/// Renders a gallery for every configured layer of the network stored in
/// `checkpoint`.
pub fn cmd_viz(cfg: &ExperimentConfig, checkpoint: &Path, seed: u64, out: &Path) -> Result<Vec<GalleryEntry>> {
    let ck = Checkpoint::load(checkpoint)?;
    let mut all = Vec::new();
    for l in &cfg.viz.layers {
        let base_cfg = VizConfig {
            step_size: cfg.viz.step_size,
            iterations: cfg.viz.iterations,
            smoothing_radius: cfg.viz.smoothing_radius,
            ..VizConfig::new(l.module.clone(), l.layer, 0, seed)
        };
        let (entries, _) = render_gallery(&ck.net, &l.module, l.layer, &base_cfg, out)?;
        all.extend(entries);
    }
    write_atomic(
        out.join("manifest.json"),
        &serde_json::to_vec_pretty(&all).expect("serializable"),
    )?;
    Ok(all)
}
