//! Composition of modules into the transfer topologies.
//!
//! * fine-tune: `softmax(NN(x; w0))` with every base weight trainable;
//! * two-towers: `softmax([NN(x; w*), M(x; w0)])` with the base locked;
//! * stitch: the trainable module's layer `i+1` reads the channel-wise
//!   concatenation of base layer `i` and module layer `i`, and both towers
//!   feed the head;
//! * scratch: the base architecture from a fresh initialization.
//!
//! The head is always a single dense softmax layer with bias.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::module::{build_module, build_with_layer_inputs, AttachedModule, LayerSpec, Module, ModuleSpec};
use crate::rng;
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    Finetune,
    TwoTowers,
    Stitch,
    Scratch,
}

impl Topology {
    pub const ALL: [Topology; 4] = [
        Topology::Finetune,
        Topology::TwoTowers,
        Topology::Stitch,
        Topology::Scratch,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Topology::Finetune => "finetune",
            Topology::TwoTowers => "two_towers",
            Topology::Stitch => "stitch",
            Topology::Scratch => "scratch",
        }
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Topology {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "finetune" | "fine_tune" => Ok(Topology::Finetune),
            "two_towers" | "twotowers" => Ok(Topology::TwoTowers),
            "stitch" => Ok(Topology::Stitch),
            "scratch" => Ok(Topology::Scratch),
            other => Err(Error::Config(format!("unknown topology {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositeNet {
    pub topology: Topology,
    pub num_classes: usize,
    pub base: Module,
    pub module: Option<Module>,
    /// `[weights (K x features), bias (K)]`
    pub head: Vec<Tensor>,
    /// Stitch only: `(base_layer, module_layer)` index pairs.
    pub layer_pairs: Vec<(usize, usize)>,
}

/// Head weights are drawn block by block, one block per feature source,
/// each from its own stream. The trainable tower's block therefore gets the
/// same initial values whether or not a frozen tower sits beside it. The
/// block reading frozen features starts at zero, so a two-towers net whose
/// module copies the base computes the fine-tuned net's logits at step 0.
fn init_head(blocks: &[(usize, &str)], num_classes: usize, seed: u64) -> Vec<Tensor> {
    let total: usize = blocks.iter().map(|b| b.0).sum();
    let mut w = vec![0.0; num_classes * total];
    let mut offset = 0;
    for &(width, tag) in blocks {
        if tag == "frozen" {
            offset += width;
            continue;
        }
        let limit = (6.0 / (width + num_classes) as f64).sqrt();
        let mut r = rng::stream(seed, &format!("head/{tag}"), 0);
        for k in 0..num_classes {
            for c in 0..width {
                w[k * total + offset + c] = r.gen_range(-limit..limit);
            }
        }
        offset += width;
    }
    vec![
        Tensor::new(vec![num_classes, total], w).expect("head shape"),
        Tensor::zeros(&[num_classes]),
    ]
}

fn check_classes(num_classes: usize) -> Result<()> {
    if num_classes == 0 {
        return Err(Error::Contract("a head needs at least one class".into()));
    }
    Ok(())
}

/// Fine-tuning: every base weight stays trainable and a fresh
/// `K`-way head replaces the original softmax.
pub fn compose_finetune(base: Module, num_classes: usize, seed: u64) -> Result<CompositeNet> {
    check_classes(num_classes)?;
    if base.frozen() {
        return Err(Error::Contract("fine-tuning needs an unfrozen base".into()));
    }
    let head = init_head(&[(base.feature_width(), "trainable")], num_classes, seed);
    Ok(CompositeNet {
        topology: Topology::Finetune,
        num_classes,
        base,
        module: None,
        head,
        layer_pairs: vec![],
    })
}

/// The base architecture trained from a fresh initialization drawn from `seed`.
pub fn compose_scratch(
    spec: &ModuleSpec,
    input_shape: &[usize],
    num_classes: usize,
    seed: u64,
) -> Result<CompositeNet> {
    let mut spec = spec.clone();
    spec.frozen = false;
    let fresh = build_module(&spec, input_shape, rng::derive_seed(seed, "scratch", 0))?;
    let mut net = compose_finetune(fresh, num_classes, seed)?;
    net.topology = Topology::Scratch;
    Ok(net)
}

/// Frozen base and trainable module read the same input; the head sees
/// `concat(base_features, module_features)`.
pub fn compose_two_towers(
    base: Module,
    module: Module,
    num_classes: usize,
    seed: u64,
) -> Result<CompositeNet> {
    check_classes(num_classes)?;
    if !base.frozen() {
        return Err(Error::Contract("two-towers needs a frozen base".into()));
    }
    if module.frozen() {
        return Err(Error::Contract("two-towers needs a trainable module".into()));
    }
    if base.input_shape != module.input_shape {
        return Err(Error::Shape(format!(
            "base reads {:?} but module reads {:?}",
            base.input_shape, module.input_shape
        )));
    }
    let head = init_head(
        &[(base.feature_width(), "frozen"), (module.feature_width(), "trainable")],
        num_classes,
        seed,
    );
    Ok(CompositeNet {
        topology: Topology::TwoTowers,
        num_classes,
        base,
        module: Some(module),
        head,
        layer_pairs: vec![],
    })
}

/// Pairs every module layer with the base layer at the same position,
/// skipping flatten layers and layers whose output is about to be pooled
/// (the pooled output is paired instead).
pub fn default_stitch_pairs(base: &ModuleSpec, module: &ModuleSpec) -> Vec<(usize, usize)> {
    let n = base.layers.len().min(module.layers.len());
    (0..n)
        .filter(|&i| {
            let (b, m) = (base.layers[i], module.layers[i]);
            std::mem::discriminant(&b) == std::mem::discriminant(&m)
                && b != LayerSpec::Flatten
                && module.layers.get(i + 1) != Some(&LayerSpec::MaxPool2)
        })
        .map(|i| (i, i))
        .collect()
}

/// Interleaves a fresh module (initialized from `seed`) with a frozen base.
pub fn compose_stitch(
    base: Module,
    module_spec: &ModuleSpec,
    layer_pairs: &[(usize, usize)],
    num_classes: usize,
    seed: u64,
) -> Result<CompositeNet> {
    check_classes(num_classes)?;
    if !base.frozen() {
        return Err(Error::Contract("stitch needs a frozen base".into()));
    }
    for w in layer_pairs.windows(2) {
        if w[1].0 <= w[0].0 || w[1].1 <= w[0].1 {
            return Err(Error::Spec("stitch layer pairs must be strictly increasing".into()));
        }
    }
    let mut spec = module_spec.clone();
    spec.frozen = false;
    let base_shapes = base.spec.layer_shapes(&base.input_shape)?;
    let n = spec.layers.len();
    let mut layer_inputs = Vec::with_capacity(n);
    let mut cur = base.input_shape.clone();
    for i in 0..n {
        layer_inputs.push(cur.clone());
        let out = spec.layers[i]
            .output_shape(&cur)
            .map_err(|e| Error::Spec(format!("stitch module layer {i}: {e}")))?;
        cur = out.clone();
        if let Some(&(bi, _)) = layer_pairs.iter().find(|p| p.1 == i) {
            let b = base_shapes.get(bi).ok_or_else(|| {
                Error::Spec(format!("stitch pair refers to missing base layer {bi}"))
            })?;
            if b.len() != out.len() || b[1..] != out[1..] {
                return Err(Error::Shape(format!(
                    "stitch pair ({bi}, {i}) misaligned: base {b:?} vs module {out:?}"
                )));
            }
            if i + 1 < n {
                cur[0] = b[0] + out[0];
            }
        }
    }
    if let Some(&(_, mi)) = layer_pairs.iter().find(|p| p.1 >= n) {
        return Err(Error::Spec(format!("stitch pair refers to missing module layer {mi}")));
    }
    let module = build_with_layer_inputs(&spec, &base.input_shape, layer_inputs, seed)?;
    let head = init_head(
        &[(base.feature_width(), "frozen"), (module.feature_width(), "trainable")],
        num_classes,
        seed,
    );
    Ok(CompositeNet {
        topology: Topology::Stitch,
        num_classes,
        base,
        module: Some(module),
        head,
        layer_pairs: layer_pairs.to_vec(),
    })
}

impl CompositeNet {
    pub fn input_shape(&self) -> &[usize] {
        &self.base.input_shape
    }

    pub fn head_width(&self) -> usize {
        self.head[0].shape()[1]
    }

    pub fn modules(&self) -> impl Iterator<Item = &Module> {
        std::iter::once(&self.base).chain(self.module.as_ref())
    }

    pub fn module_named(&self, name: &str) -> Option<&Module> {
        self.modules().find(|m| m.name() == name)
    }

    /// Trainable parameters in the stable order used everywhere else: base
    /// (when trainable), module, head.
    pub fn collect_trainable(&self) -> Vec<(String, &Tensor)> {
        self.named_params()
            .into_iter()
            .filter(|(_, _, frozen)| !frozen)
            .map(|(n, t, _)| (n, t))
            .collect()
    }

    pub fn collect_frozen(&self) -> Vec<(String, &Tensor)> {
        self.named_params()
            .into_iter()
            .filter(|(_, _, frozen)| *frozen)
            .map(|(n, t, _)| (n, t))
            .collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.collect_trainable().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn frozen_count(&self) -> usize {
        self.collect_frozen().iter().map(|(_, t)| t.numel()).sum()
    }

    pub(crate) fn named_params(&self) -> Vec<(String, &Tensor, bool)> {
        let mut out = Vec::new();
        for m in self.modules() {
            for (i, layer) in m.params.iter().enumerate() {
                for (t, suffix) in layer.iter().zip(["w", "b"]) {
                    out.push((format!("{}/{i}.{suffix}", m.name()), t, m.frozen()));
                }
            }
        }
        out.push(("head.w".into(), &self.head[0], false));
        out.push(("head.b".into(), &self.head[1], false));
        out
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        out.extend(self.base.params.iter_mut().flatten());
        if let Some(m) = self.module.as_mut() {
            out.extend(m.params.iter_mut().flatten());
        }
        out.extend(self.head.iter_mut());
        out
    }

    /// Instantiates the network as a graph. With `activity_l2 = Some(lambda)`
    /// and a trainable module present, the loss includes
    /// `lambda * sum(module_features^2)`.
    pub fn build_graph(&self, activity_l2: Option<f64>) -> Result<NetGraph> {
        let mut g = Graph::new();
        let x = g.input(self.input_shape(), false);
        let base = self.base.attach(&mut g, x)?;
        let base_features = base.features.expect("attached");
        let module = match &self.module {
            None => None,
            Some(m) if self.topology == Topology::Stitch => {
                let mut att = AttachedModule::default();
                let mut cur = x;
                let n = m.spec.layers.len();
                for i in 0..n {
                    let out = m.attach_layer(&mut g, i, cur, &mut att)?;
                    cur = match self.layer_pairs.iter().find(|p| p.1 == i) {
                        Some(&(bi, _)) if i + 1 < n => g.concat(base.outputs[bi], out, 0)?,
                        _ => out,
                    };
                }
                let top = if n == 0 { x } else { *att.outputs.last().unwrap() };
                att.features = Some(if g.value(top).shape().len() == 1 {
                    top
                } else {
                    g.flatten(top)?
                });
                Some(att)
            }
            Some(m) => Some(m.attach(&mut g, x)?),
        };
        let features = match &module {
            Some(att) => g.concat(base_features, att.features.unwrap(), 0)?,
            None => base_features,
        };
        let hw = g.param("head.w", self.head[0].clone(), false);
        let hb = g.param("head.b", self.head[1].clone(), false);
        let logits = g.dense(features, hw, hb)?;
        let xent = g.softmax_xent(logits, 0)?;
        let loss = match (activity_l2, &module) {
            (Some(lambda), Some(att)) => {
                let reg = g.activity_l2(&[att.features.unwrap()], lambda)?;
                g.add(xent, reg)?
            }
            _ => xent,
        };
        Ok(NetGraph {
            net: self.clone(),
            graph: g,
            input: x,
            logits,
            xent,
            loss,
            base,
            module,
            head: [hw, hb],
        })
    }
}

/// A composite instantiated as a trainable graph.
#[derive(Clone, Debug)]
pub struct NetGraph {
    net: CompositeNet,
    pub graph: Graph,
    pub input: NodeId,
    pub logits: NodeId,
    pub xent: NodeId,
    pub loss: NodeId,
    pub base: AttachedModule,
    pub module: Option<AttachedModule>,
    pub head: [NodeId; 2],
}

impl NetGraph {
    pub fn topology(&self) -> Topology {
        self.net.topology
    }

    pub fn num_classes(&self) -> usize {
        self.net.num_classes
    }

    /// Snapshot of the current parameter values as a composite description.
    pub fn to_composite(&self) -> CompositeNet {
        let mut net = self.net.clone();
        let ids = self.graph.params().to_vec();
        for (dst, id) in net.params_mut().into_iter().zip(ids) {
            *dst = self.graph.value(id).clone();
        }
        net
    }

    pub fn base_features(&self) -> NodeId {
        self.base.features.expect("attached")
    }

    pub fn attached(&self, module_name: &str) -> Option<&AttachedModule> {
        if self.net.base.name() == module_name {
            Some(&self.base)
        } else if self.net.module.as_ref().is_some_and(|m| m.name() == module_name) {
            self.module.as_ref()
        } else {
            None
        }
    }

    pub fn forward(&mut self, image: &Tensor, label: usize) -> Result<f64> {
        self.graph.set_input(self.input, image.clone())?;
        self.graph.set_label(self.xent, label)?;
        self.graph.forward()?;
        Ok(self.graph.value(self.loss).data()[0])
    }

    /// Forward and backward for one example; gradients accumulate.
    pub fn accumulate(&mut self, image: &Tensor, label: usize) -> Result<f64> {
        let loss = self.forward(image, label)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss {loss}")));
        }
        self.graph.backward(self.loss)?;
        Ok(loss)
    }

    pub fn logits(&mut self, image: &Tensor) -> Result<&Tensor> {
        self.forward(image, 0)?;
        Ok(self.graph.value(self.logits))
    }

    pub fn predict(&mut self, image: &Tensor) -> Result<usize> {
        Ok(tensor::argmax(self.logits(image)?.data()))
    }

    pub fn accuracy(&mut self, ds: &LabeledDataset) -> Result<f64> {
        if ds.is_empty() {
            return Ok(0.0);
        }
        let mut correct = 0usize;
        for (img, &label) in ds.images.iter().zip(&ds.labels) {
            if self.predict(img)? == label {
                correct += 1;
            }
        }
        Ok(correct as f64 / ds.len() as f64)
    }

    /// Flat values of every frozen parameter, in graph order.
    pub fn frozen_payload(&self) -> Vec<f64> {
        self.graph
            .frozen_params()
            .into_iter()
            .flat_map(|p| self.graph.value(p).data().to_vec())
            .collect()
    }
}
