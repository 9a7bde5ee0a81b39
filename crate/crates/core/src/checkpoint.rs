//! Versioned binary checkpoints.
//!
//! Layout: `MODNETCK`, format version (`u32` LE), header length (`u64` LE),
//! JSON header, `f64` LE payload, SHA-256 of everything before it. The
//! payload holds every parameter (trainable first, then frozen, each group
//! in network order) followed by the optimizer moments.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::composite::CompositeNet;
use crate::error::{Error, Result};
use crate::files::{hex, write_atomic};
use crate::optim::{Hyper, OptimizerKind, OptimizerState};
use crate::rng::RngState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MODNETCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: CompositeNet,
    pub optimizer: OptimizerState,
    pub rng: RngState,
    pub step: u64,
    /// Free-form provenance (config hash, dataset name, ...).
    pub meta: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    /// Network with every parameter tensor emptied.
    skeleton: CompositeNet,
    /// `(name, shape)` of each payload tensor, in payload order.
    params: Vec<(String, Vec<usize>)>,
    optimizer_kind: OptimizerKind,
    hyper: Hyper,
    optimizer_steps: u64,
    m: Vec<Vec<usize>>,
    v: Vec<Vec<usize>>,
    rng: RngState,
    step: u64,
    meta: BTreeMap<String, String>,
}

fn payload_order(net: &CompositeNet) -> Vec<(String, &Tensor)> {
    let mut out = net.collect_trainable();
    out.extend(net.collect_frozen());
    out
}

/// SHA-256 over the frozen parameters as `f64` LE bytes, hex encoded.
pub fn frozen_hash(net: &CompositeNet) -> String {
    let mut h = Sha256::new();
    for (_, t) in net.collect_frozen() {
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

fn push_f64s(out: &mut Vec<u8>, t: &Tensor) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut skeleton = self.net.clone();
        for t in skeleton.params_mut() {
            *t = Tensor::zeros(&[0]);
        }
        let order = payload_order(&self.net);
        let header = Header {
            skeleton,
            params: order.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect(),
            optimizer_kind: self.optimizer.kind,
            hyper: self.optimizer.hyper,
            optimizer_steps: self.optimizer.step_count,
            m: self.optimizer.m.iter().map(|t| t.shape().to_vec()).collect(),
            v: self.optimizer.v.iter().map(|t| t.shape().to_vec()).collect(),
            rng: self.rng.clone(),
            step: self.step,
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &order {
            push_f64s(&mut out, t);
        }
        for t in self.optimizer.m.iter().chain(&self.optimizer.v) {
            push_f64s(&mut out, t);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 + 4 + 8 + 32 {
            return Err(Error::Corrupt(format!("truncated: only {} bytes", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Corrupt("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                expected: FORMAT_VERSION,
                found: version,
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body)[..] != digest[..] {
            return Err(Error::Checksum);
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
        let json = body
            .get(20..20usize.saturating_add(hlen))
            .ok_or_else(|| Error::Corrupt("header runs past end of file".into()))?;
        let header: Header =
            serde_json::from_slice(json).map_err(|e| Error::Corrupt(format!("header: {e}")))?;
        let mut floats = body[20 + hlen..]
            .chunks(8)
            .map(|c| c.try_into().map(f64::from_le_bytes));
        let mut take = |shape: &[usize]| -> Result<Tensor> {
            let n = shape.iter().product();
            let data = (0..n)
                .map(|_| match floats.next() {
                    Some(Ok(v)) => Ok(v),
                    _ => Err(Error::Corrupt("payload shorter than header declares".into())),
                })
                .collect::<Result<Vec<_>>>()?;
            Tensor::new(shape.to_vec(), data)
        };

        let mut net = header.skeleton;
        let mut by_name = BTreeMap::new();
        for (name, shape) in &header.params {
            by_name.insert(name.clone(), take(shape)?);
        }
        let names: Vec<String> = net.named_params().into_iter().map(|(n, _, _)| n).collect();
        if names.len() != by_name.len() {
            return Err(Error::Corrupt(format!(
                "network has {} parameter tensors, payload {}",
                names.len(),
                by_name.len()
            )));
        }
        for (name, slot) in names.iter().zip(net.params_mut()) {
            *slot = by_name
                .remove(name)
                .ok_or_else(|| Error::Corrupt(format!("payload lacks {name}")))?;
        }
        let m = header.m.iter().map(|s| take(s)).collect::<Result<Vec<_>>>()?;
        let v = header.v.iter().map(|s| take(s)).collect::<Result<Vec<_>>>()?;
        if floats.next().is_some() {
            return Err(Error::Corrupt("payload longer than header declares".into()));
        }
        Ok(Checkpoint {
            net,
            optimizer: OptimizerState {
                kind: header.optimizer_kind,
                step_count: header.optimizer_steps,
                m,
                v,
                hyper: header.hyper,
            },
            rng: header.rng,
            step: header.step,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn frozen_hash(&self) -> String {
        frozen_hash(&self.net)
    }
}
