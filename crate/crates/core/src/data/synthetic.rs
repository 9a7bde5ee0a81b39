//! Seeded stand-in for a source/target transfer pair. Each class is a
//! prototype made of a few soft strokes; examples are jittered, noisy
//! copies of their class prototype. Target prototypes move away from the
//! source ones as `shift` grows: they blend toward held-out stroke
//! patterns, rotate and dim.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::augment::{resample_affine, warp};
use super::LabeledDataset;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub size: usize,
    pub strokes: usize,
    /// Gaussian stroke profile width in pixels.
    pub stroke_width: f64,
    /// Per-pixel Gaussian noise standard deviation.
    pub noise: f64,
    /// Maximum random translation per example, in pixels.
    pub jitter: f64,
    /// Rotation of target prototypes at `shift = 1`, in degrees.
    pub max_rotation: f64,
    /// Intensity loss of target prototypes at `shift = 1`.
    pub max_dimming: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            size: 16,
            strokes: 3,
            stroke_width: 1.0,
            noise: 0.15,
            jitter: 1.0,
            max_rotation: 30.0,
            max_dimming: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub config: SyntheticConfig,
    pub seed: u64,
    pub shift: f64,
    pub source_prototypes: Vec<Tensor>,
    pub target_prototypes: Vec<Tensor>,
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

fn prototype(cfg: &SyntheticConfig, seed: u64, index: u64) -> Tensor {
    let mut r = rng::stream(seed, "synthetic/prototype", index);
    let s = cfg.size;
    let lo = 2.0f64.min(s as f64 / 4.0);
    let hi = s as f64 - 1.0 - lo;
    let segs: Vec<_> = (0..cfg.strokes)
        .map(|_| {
            let mut pt = || (r.gen_range(lo..=hi), r.gen_range(lo..=hi));
            (pt(), pt())
        })
        .collect();
    let two_var = 2.0 * cfg.stroke_width * cfg.stroke_width;
    let mut data = vec![0.0; s * s];
    for y in 0..s {
        for x in 0..s {
            let p = (y as f64, x as f64);
            data[y * s + x] = segs
                .iter()
                .map(|&(a, b)| (-segment_distance(p, a, b).powi(2) / two_var).exp())
                .fold(0.0, f64::max);
        }
    }
    Tensor::new(vec![1, s, s], data).expect("square image")
}

fn rotate(img: &Tensor, degrees: f64) -> Tensor {
    if degrees == 0.0 {
        return img.clone();
    }
    let c = (img.shape()[1] as f64 - 1.0) / 2.0;
    let (sin, cos) = degrees.to_radians().sin_cos();
    warp(img, |y, x| {
        let (dy, dx) = (y - c, x - c);
        (cos * dy - sin * dx + c, sin * dy + cos * dx + c)
    })
}

impl SyntheticTask {
    /// `k_src` source classes and `k_tgt` target classes. Target class `j`
    /// starts from source prototype `j mod k_src` and moves toward its own
    /// held-out prototype as `shift` goes from 0 to 1.
    pub fn new(cfg: SyntheticConfig, seed: u64, k_src: usize, k_tgt: usize, shift: f64) -> Self {
        assert!(k_src >= 2 && k_tgt >= 2, "both tasks need at least two classes");
        assert!((0.0..=1.0).contains(&shift), "shift must lie in [0, 1]");
        let source_prototypes: Vec<Tensor> =
            (0..k_src).map(|i| prototype(&cfg, seed, i as u64)).collect();
        let target_prototypes = (0..k_tgt)
            .map(|j| {
                let base = &source_prototypes[j % k_src];
                if shift == 0.0 {
                    return base.clone();
                }
                let held = prototype(&cfg, seed, (k_src + j) as u64);
                let gain = 1.0 - cfg.max_dimming * shift;
                let data = base
                    .data()
                    .iter()
                    .zip(held.data())
                    .map(|(&a, &b)| gain * ((1.0 - shift) * a + shift * b))
                    .collect();
                let mixed = Tensor::new(base.shape().to_vec(), data).expect("same shape");
                rotate(&mixed, cfg.max_rotation * shift)
            })
            .collect();
        SyntheticTask {
            config: cfg,
            seed,
            shift,
            source_prototypes,
            target_prototypes,
        }
    }

    fn sample(&self, protos: &[Tensor], n_per_class: usize, tag: &str, sample_seed: u64) -> LabeledDataset {
        let cfg = &self.config;
        let mut r = rng::stream(self.seed, tag, sample_seed);
        let normal = Normal::new(0.0, cfg.noise.max(0.0)).expect("finite noise");
        let mut order: Vec<usize> = (0..protos.len() * n_per_class).map(|i| i % protos.len()).collect();
        order.shuffle(&mut r);
        let images = order
            .iter()
            .map(|&c| {
                let (dy, dx) = if cfg.jitter > 0.0 {
                    (r.gen_range(-cfg.jitter..=cfg.jitter), r.gen_range(-cfg.jitter..=cfg.jitter))
                } else {
                    (0.0, 0.0)
                };
                let mut img = resample_affine(&protos[c], dy, dx, 1.0);
                if cfg.noise > 0.0 {
                    for v in img.data_mut() {
                        *v = (*v + normal.sample(&mut r)).clamp(0.0, 1.0);
                    }
                }
                img
            })
            .collect();
        LabeledDataset::new(images, order, protos.len()).expect("generated labels in range")
    }

    pub fn sample_source(&self, n_per_class: usize, sample_seed: u64) -> LabeledDataset {
        self.sample(&self.source_prototypes, n_per_class, "synthetic/source", sample_seed)
    }

    pub fn sample_target(&self, n_per_class: usize, sample_seed: u64) -> LabeledDataset {
        self.sample(&self.target_prototypes, n_per_class, "synthetic/target", sample_seed)
    }
}

/// Source and target datasets with `n_per_class` examples per class.
pub fn gen_synthetic_transfer(
    seed: u64,
    k_src: usize,
    k_tgt: usize,
    n_per_class: usize,
    shift: f64,
) -> (LabeledDataset, LabeledDataset) {
    let task = SyntheticTask::new(SyntheticConfig::default(), seed, k_src, k_tgt, shift);
    (task.sample_source(n_per_class, 0), task.sample_target(n_per_class, 0))
}

/// Accuracy of assigning each example to its nearest prototype.
pub fn nearest_prototype_accuracy(ds: &LabeledDataset, prototypes: &[Tensor]) -> f64 {
    if ds.is_empty() {
        return 0.0;
    }
    let dist = |a: &Tensor, b: &Tensor| -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum()
    };
    let hits = ds
        .images
        .iter()
        .zip(&ds.labels)
        .filter(|(img, &l)| {
            let best = (0..prototypes.len())
                .min_by(|&i, &j| dist(img, &prototypes[i]).total_cmp(&dist(img, &prototypes[j])))
                .unwrap();
            best == l
        })
        .count();
    hits as f64 / ds.len() as f64
}
