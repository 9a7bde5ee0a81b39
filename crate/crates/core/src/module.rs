//! Layer stacks treated as units ("modules") with an all-or-nothing frozen
//! flag.
//!
//! Architectures use a compact notation: `(FxHxW)` is a same-padded
//! convolution with `F` filters of size `HxW`, `maxpool2` a 2x2 pooling,
//! `flatten` a reshape to a vector and `denseN` a fully connected layer
//! with `N` units, all joined by `-`. A `flatten` is inserted automatically
//! when a dense layer follows a spatial one. Every conv and dense layer is
//! followed by a ReLU.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv { filters: usize, kh: usize, kw: usize },
    MaxPool2,
    Flatten,
    Dense { units: usize },
}

impl LayerSpec {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::Dense { .. })
    }

    /// Output shape for a given input shape, or a description of why the
    /// layer cannot accept it.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match (*self, input) {
            (LayerSpec::Conv { filters, kh, kw }, [_, h, w]) => {
                if filters == 0 || kh == 0 || kw == 0 {
                    return Err(Error::Spec(format!("degenerate convolution {self}")));
                }
                Ok(vec![filters, *h, *w])
            }
            (LayerSpec::MaxPool2, [c, h, w]) => Ok(vec![*c, h.div_ceil(2), w.div_ceil(2)]),
            (LayerSpec::Flatten, s) => Ok(vec![s.iter().product()]),
            (LayerSpec::Dense { units }, [_]) => {
                if units == 0 {
                    return Err(Error::Spec("dense layer with zero units".into()));
                }
                Ok(vec![units])
            }
            (LayerSpec::Dense { .. }, s) => Err(Error::Spec(format!(
                "dense layer needs a flattened input, got {s:?} (insert flatten)"
            ))),
            (l, s) => Err(Error::Spec(format!("{l} cannot take input of shape {s:?}"))),
        }
    }

    /// Parameter shapes `(weights, bias)` for the given input shape.
    pub fn param_shapes(&self, input: &[usize]) -> Option<(Vec<usize>, Vec<usize>)> {
        match (*self, input) {
            (LayerSpec::Conv { filters, kh, kw }, [c, _, _]) => {
                Some((vec![filters, *c, kh, kw], vec![filters]))
            }
            (LayerSpec::Dense { units }, [n]) => Some((vec![units, *n], vec![units])),
            _ => None,
        }
    }

    fn scaled(&self, num: usize, den: usize) -> LayerSpec {
        let s = |w: usize| (w * num).div_ceil(den).max(1);
        match *self {
            LayerSpec::Conv { filters, kh, kw } => LayerSpec::Conv {
                filters: s(filters),
                kh,
                kw,
            },
            LayerSpec::Dense { units } => LayerSpec::Dense { units: s(units) },
            other => other,
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv { filters, kh, kw } => write!(f, "({filters}x{kh}x{kw})"),
            LayerSpec::MaxPool2 => write!(f, "maxpool2"),
            LayerSpec::Flatten => write!(f, "flatten"),
            LayerSpec::Dense { units } => write!(f, "dense{units}"),
        }
    }
}

/// Parses the compact architecture notation into a layer list.
pub fn parse_layers(arch: &str) -> Result<Vec<LayerSpec>> {
    let arch = arch.trim();
    if arch.is_empty() {
        return Ok(vec![]);
    }
    let mut layers = Vec::new();
    let mut spatial = true;
    for raw in arch.split('-') {
        let tok = raw.trim().to_ascii_lowercase().replace('×', "x");
        let layer = if let Some(inner) = tok.strip_prefix('(').and_then(|t| t.strip_suffix(')')) {
            let dims: Vec<usize> = inner
                .split('x')
                .map(|d| d.trim().parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(|_| Error::Spec(format!("bad convolution token {raw:?}")))?;
            let [filters, kh, kw] = dims[..] else {
                return Err(Error::Spec(format!("convolution token {raw:?} needs FxHxW")));
            };
            LayerSpec::Conv { filters, kh, kw }
        } else if tok == "maxpool2" {
            LayerSpec::MaxPool2
        } else if tok == "flatten" {
            LayerSpec::Flatten
        } else if let Some(n) = tok.strip_prefix("dense") {
            let units = n
                .trim()
                .parse()
                .map_err(|_| Error::Spec(format!("bad dense token {raw:?}")))?;
            LayerSpec::Dense { units }
        } else {
            return Err(Error::Spec(format!("unknown layer token {raw:?}")));
        };
        match layer {
            LayerSpec::Dense { .. } if spatial => {
                layers.push(LayerSpec::Flatten);
                spatial = false;
            }
            LayerSpec::Flatten => spatial = false,
            _ => {}
        }
        layers.push(layer);
    }
    Ok(layers)
}

pub fn format_layers(layers: &[LayerSpec]) -> String {
    layers
        .iter()
        .map(|l| l.to_string())
        .collect::<Vec<_>>()
        .join("-")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ModuleSpecRepr", into = "ModuleSpecRepr")]
pub struct ModuleSpec {
    pub name: String,
    pub layers: Vec<LayerSpec>,
    pub frozen: bool,
}

#[derive(Serialize, Deserialize)]
struct ModuleSpecRepr {
    name: String,
    arch: String,
    #[serde(default)]
    frozen: bool,
}

impl TryFrom<ModuleSpecRepr> for ModuleSpec {
    type Error = Error;
    fn try_from(r: ModuleSpecRepr) -> Result<Self> {
        Ok(ModuleSpec {
            name: r.name,
            layers: parse_layers(&r.arch)?,
            frozen: r.frozen,
        })
    }
}

impl From<ModuleSpec> for ModuleSpecRepr {
    fn from(s: ModuleSpec) -> Self {
        ModuleSpecRepr {
            arch: format_layers(&s.layers),
            name: s.name,
            frozen: s.frozen,
        }
    }
}

impl ModuleSpec {
    pub fn new(name: impl Into<String>, layers: Vec<LayerSpec>) -> Self {
        ModuleSpec {
            name: name.into(),
            layers,
            frozen: false,
        }
    }

    pub fn parse(name: impl Into<String>, arch: &str) -> Result<Self> {
        Ok(Self::new(name, parse_layers(arch)?))
    }

    /// The MNIST base network: `(8x8x8)-maxpool2-(8x4x4)-(8x3x3)-Dense128`.
    pub fn mnist_base() -> Self {
        Self::parse("base", "(8x8x8)-maxpool2-(8x4x4)-(8x3x3)-dense128").expect("valid arch")
    }

    /// The smaller MNIST add-on module: `(4x8x8)-maxpool2-(4x4x4)-(4x3x3)-Dense32`.
    pub fn mnist_module() -> Self {
        Self::parse("module", "(4x8x8)-maxpool2-(4x4x4)-(4x3x3)-dense32").expect("valid arch")
    }

    pub fn arch(&self) -> String {
        format_layers(&self.layers)
    }

    /// Shape of every layer's output, in order; fails on the first layer
    /// that cannot take its input.
    pub fn layer_shapes(&self, input: &[usize]) -> Result<Vec<Vec<usize>>> {
        let mut cur = input.to_vec();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            cur = l
                .output_shape(&cur)
                .map_err(|e| Error::Spec(format!("module {:?} layer {i}: {e}", self.name)))?;
            out.push(cur.clone());
        }
        Ok(out)
    }

    pub fn feature_width(&self, input: &[usize]) -> Result<usize> {
        Ok(self
            .layer_shapes(input)?
            .last()
            .map_or_else(|| input.iter().product(), |s| s.iter().product()))
    }

    /// Closed-form parameter count for a standalone module on `input`.
    pub fn param_count(&self, input: &[usize]) -> Result<usize> {
        let mut cur = input.to_vec();
        let mut total = 0;
        for l in &self.layers {
            if let Some((w, b)) = l.param_shapes(&cur) {
                total += w.iter().product::<usize>() + b.iter().product::<usize>();
            }
            cur = l.output_shape(&cur)?;
        }
        Ok(total)
    }

    /// Same layout with every conv/dense width multiplied by `num/den`
    /// (rounded up), as used for stitch modules.
    pub fn scaled(&self, name: impl Into<String>, num: usize, den: usize) -> Self {
        ModuleSpec {
            name: name.into(),
            layers: self.layers.iter().map(|l| l.scaled(num, den)).collect(),
            frozen: false,
        }
    }

    /// Indices of layers that carry convolution filters.
    pub fn conv_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::Conv { .. }))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Initial weights for one layer: He-uniform for convolutions, Glorot-uniform
/// for dense layers, zero biases.
pub fn init_layer_params(layer: &LayerSpec, input: &[usize], seed: u64, index: usize) -> Vec<Tensor> {
    let Some((wshape, bshape)) = layer.param_shapes(input) else {
        return vec![];
    };
    let limit = match *layer {
        LayerSpec::Conv { kh, kw, .. } => (6.0 / (wshape[1] * kh * kw) as f64).sqrt(),
        LayerSpec::Dense { units } => (6.0 / (wshape[1] + units) as f64).sqrt(),
        _ => unreachable!(),
    };
    let mut r = rng::stream(seed, "layer", index as u64);
    let n: usize = wshape.iter().product();
    let w = (0..n).map(|_| r.gen_range(-limit..limit)).collect();
    vec![
        Tensor::new(wshape, w).expect("shape matches"),
        Tensor::zeros(&bshape),
    ]
}

/// An instantiated module: spec, the input shape each layer sees, and the
/// per-layer parameter tensors (`[weights, bias]` or empty).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Module {
    pub spec: ModuleSpec,
    pub input_shape: Vec<usize>,
    pub layer_inputs: Vec<Vec<usize>>,
    pub params: Vec<Vec<Tensor>>,
}

impl Module {
    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn frozen(&self) -> bool {
        self.spec.frozen
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().flatten().map(Tensor::numel).sum()
    }

    pub fn trainable_count(&self) -> usize {
        if self.frozen() {
            0
        } else {
            self.param_count()
        }
    }

    pub fn output_shape(&self) -> Vec<usize> {
        match (self.spec.layers.last(), self.layer_inputs.last()) {
            (Some(l), Some(i)) => l.output_shape(i).expect("type-checked at build"),
            _ => self.input_shape.clone(),
        }
    }

    pub fn feature_width(&self) -> usize {
        self.output_shape().iter().product()
    }

    /// Flat copy of every parameter scalar in layer order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params.iter().flatten().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Adds this module's layers to `graph`, reading `input`. Returns the
    /// node ids of each layer's parameters and outputs.
    pub fn attach(&self, graph: &mut Graph, input: NodeId) -> Result<AttachedModule> {
        let mut layer_inputs = Vec::with_capacity(self.spec.layers.len());
        let mut cur = input;
        let mut attached = AttachedModule::default();
        for i in 0..self.spec.layers.len() {
            layer_inputs.push(cur);
            cur = self.attach_layer(graph, i, cur, &mut attached)?;
        }
        attached.features = Some(if graph.value(cur).shape().len() == 1 {
            cur
        } else {
            graph.flatten(cur)?
        });
        Ok(attached)
    }

    /// Adds layer `i` reading `input`; records its nodes in `attached`.
    pub(crate) fn attach_layer(
        &self,
        graph: &mut Graph,
        i: usize,
        input: NodeId,
        attached: &mut AttachedModule,
    ) -> Result<NodeId> {
        let layer = self.spec.layers[i];
        let prefix = format!("{}/{i}", self.spec.name);
        let out = match layer {
            LayerSpec::Conv { .. } | LayerSpec::Dense { .. } => {
                let [w, b] = &self.params[i][..] else {
                    return Err(Error::Spec(format!("{prefix}: missing parameters")));
                };
                let wn = graph.param(format!("{prefix}.w"), w.clone(), self.frozen());
                let bn = graph.param(format!("{prefix}.b"), b.clone(), self.frozen());
                attached.params.extend([wn, bn]);
                let pre = if matches!(layer, LayerSpec::Conv { .. }) {
                    let c = graph.conv2d(input, wn, bn)?;
                    attached.conv_pre.push(c);
                    c
                } else {
                    graph.dense(input, wn, bn)?
                };
                graph.relu(pre)?
            }
            LayerSpec::MaxPool2 => graph.maxpool2(input)?,
            LayerSpec::Flatten => graph.flatten(input)?,
        };
        attached.outputs.push(out);
        Ok(out)
    }
}

#[derive(Clone, Debug, Default)]
pub struct AttachedModule {
    pub params: Vec<NodeId>,
    /// Post-activation output of each layer.
    pub outputs: Vec<NodeId>,
    /// Pre-activation output of each convolution, in layer order.
    pub conv_pre: Vec<NodeId>,
    /// Flattened top features.
    pub features: Option<NodeId>,
}

/// Instantiates `spec` on `input_shape` with parameters drawn from `seed`.
pub fn build_module(spec: &ModuleSpec, input_shape: &[usize], seed: u64) -> Result<Module> {
    let shapes = spec.layer_shapes(input_shape)?;
    let layer_inputs: Vec<Vec<usize>> = std::iter::once(input_shape.to_vec())
        .chain(shapes.iter().cloned())
        .take(spec.layers.len())
        .collect();
    build_with_layer_inputs(spec, input_shape, layer_inputs, seed)
}

/// Instantiates `spec` where each layer's input shape is given explicitly
/// (stitch modules see concatenated inputs).
pub(crate) fn build_with_layer_inputs(
    spec: &ModuleSpec,
    input_shape: &[usize],
    layer_inputs: Vec<Vec<usize>>,
    seed: u64,
) -> Result<Module> {
    let params = spec
        .layers
        .iter()
        .zip(&layer_inputs)
        .enumerate()
        .map(|(i, (l, inp))| {
            l.output_shape(inp)?;
            Ok(init_layer_params(l, inp, seed, i))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Module {
        spec: spec.clone(),
        input_shape: input_shape.to_vec(),
        layer_inputs,
        params,
    })
}

pub fn set_frozen(mut module: Module, frozen: bool) -> Module {
    module.spec.frozen = frozen;
    module
}
