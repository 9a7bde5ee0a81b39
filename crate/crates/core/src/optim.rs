//! ADAM and RMSPROP update rules over the trainable parameters of a graph,
//! and the activity L2 penalty.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Rmsprop,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(OptimizerKind::Adam),
            "rmsprop" => Ok(OptimizerKind::Rmsprop),
            other => Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub rho: f64,
    pub epsilon: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            rho: 0.9,
            epsilon: 1e-8,
        }
    }
}

impl Hyper {
    pub fn with_lr(lr: f64) -> Self {
        Hyper {
            lr,
            ..Hyper::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.epsilon > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && (0.0..1.0).contains(&self.rho);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer hyperparameters {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step_count: u64,
    /// First moments, one per parameter (ADAM only).
    pub m: Vec<Tensor>,
    /// Second moments (ADAM) or running squared-gradient averages (RMSPROP).
    pub v: Vec<Tensor>,
    pub hyper: Hyper,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, hyper: Hyper) -> Self {
        OptimizerState {
            kind,
            step_count: 0,
            m: vec![],
            v: vec![],
            hyper,
        }
    }

    pub fn adam(hyper: Hyper) -> Self {
        Self::new(OptimizerKind::Adam, hyper)
    }

    pub fn rmsprop(hyper: Hyper) -> Self {
        Self::new(OptimizerKind::Rmsprop, hyper)
    }

    fn ensure_moments(&mut self, shapes: &[&[usize]]) -> Result<()> {
        if self.v.is_empty() {
            self.v = shapes.iter().map(|s| Tensor::zeros(s)).collect();
            if self.kind == OptimizerKind::Adam {
                self.m = self.v.clone();
            }
            return Ok(());
        }
        if self.v.len() != shapes.len() || self.v.iter().zip(shapes).any(|(v, s)| v.shape() != *s) {
            return Err(Error::Shape(format!(
                "optimizer state tracks {} tensors that do not match the {} parameters given",
                self.v.len(),
                shapes.len()
            )));
        }
        Ok(())
    }

    /// One update of `params` from `grads` (same order and shapes).
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient {:?} does not match parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        let shapes: Vec<&[usize]> = params.iter().map(|p| p.shape()).collect();
        self.ensure_moments(&shapes)?;
        self.step_count += 1;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            self.update(i, p.data_mut(), g.data(), 1.0);
        }
        Ok(())
    }

    /// Updates every trainable parameter of `graph` from its accumulated
    /// gradient multiplied by `grad_scale`; a missing gradient counts as zero.
    /// Frozen parameters are never visited.
    pub fn step_graph(&mut self, graph: &mut Graph, grad_scale: f64) -> Result<()> {
        let ids = graph.trainable_params();
        let shapes: Vec<Vec<usize>> = ids.iter().map(|&p| graph.value(p).shape().to_vec()).collect();
        let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| &s[..]).collect();
        self.ensure_moments(&shape_refs)?;
        self.step_count += 1;
        for (i, &p) in ids.iter().enumerate() {
            let (value, grad) = graph.param_and_grad_mut(p);
            match grad {
                Some(g) => {
                    let g = g.data().to_vec();
                    self.update(i, value.data_mut(), &g, grad_scale);
                }
                None => {
                    let zeros = vec![0.0; value.numel()];
                    self.update(i, value.data_mut(), &zeros, grad_scale);
                }
            }
        }
        Ok(())
    }

    fn update(&mut self, i: usize, w: &mut [f64], g: &[f64], scale: f64) {
        let h = self.hyper;
        match self.kind {
            OptimizerKind::Adam => {
                let t = self.step_count as i32;
                let bc1 = 1.0 - h.beta1.powi(t);
                let bc2 = 1.0 - h.beta2.powi(t);
                let m = self.m[i].data_mut();
                let v = self.v[i].data_mut();
                for j in 0..w.len() {
                    let gj = g[j] * scale;
                    m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * gj;
                    v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * gj * gj;
                    let m_hat = m[j] / bc1;
                    let v_hat = v[j] / bc2;
                    w[j] -= h.lr * m_hat / (v_hat.sqrt() + h.epsilon);
                }
            }
            OptimizerKind::Rmsprop => {
                let v = self.v[i].data_mut();
                for j in 0..w.len() {
                    let gj = g[j] * scale;
                    v[j] = h.rho * v[j] + (1.0 - h.rho) * gj * gj;
                    w[j] -= h.lr * gj / (v[j].sqrt() + h.epsilon);
                }
            }
        }
    }
}

/// Penalty on a module's activations (not its weights).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularizerSpec {
    pub lambda: f64,
    pub target: String,
}

/// `lambda * sum(a^2)` over every entry of every listed activation.
///
/// Evaluated as `sum / (1 / lambda)`: penalties are usually powers of ten,
/// whose reciprocals are exact, so e.g. `lambda = 1e-6` gives the correctly
/// rounded decimal result. `lambda = 0` gives exactly zero.
pub fn activity_l2(activations: &[Tensor], lambda: f64) -> f64 {
    let sq: f64 = activations
        .iter()
        .map(|t| t.data().iter().map(|a| a * a).sum::<f64>())
        .sum();
    sq / lambda.recip()
}
