//! Binary checkpoint format.
//!
//! ```text
//! "PLNET1"            6 bytes
//! version             u32 LE
//! header length       u64 LE
//! header              UTF-8 JSON: config, bn_scope, phase, meta,
//!                     optimizer_step, manifest
//! payload             little-endian f32 values, manifest order
//! ```
//!
//! Manifest entries are `{name, dims, dtype, offset, len}` with byte offsets
//! into the payload. Weights are stored under their graph paths, batch-norm
//! statistics under `<slot>/running_mean` and `/running_var` (see
//! [`Model::running`]), optimizer moments under `opt/m/<path>` and
//! `opt/v/<path>`.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::{ComputeGraph, NetworkConfig};
use crate::error::{Error, Result};
use crate::model::{BnScope, Model};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};
use crate::train::{OptimizerState, Phase};

pub const MAGIC: &[u8; 6] = b"PLNET1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub dims: [usize; 4],
    pub dtype: String,
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: NetworkConfig,
    bn_scope: BnScope,
    phase: Option<Phase>,
    meta: BTreeMap<String, String>,
    optimizer_step: Option<u64>,
    manifest: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub bn_scope: BnScope,
    pub phase: Option<Phase>,
    pub meta: BTreeMap<String, String>,
    pub optimizer_step: Option<u64>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

const RUNNING_MEAN: &str = "running_mean";
const RUNNING_VAR: &str = "running_var";

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(
        model: &Model<T>,
        optimizer: Option<&OptimizerState<T>>,
        phase: Option<Phase>,
    ) -> Self {
        let mut tensors: Vec<(String, Tensor<f32>)> =
            model.params().iter().map(|(n, t)| (n.to_string(), t.cast())).collect();
        for (slot, r) in model.running() {
            let c = r.channels();
            let vec = |v: &[T]| {
                Tensor::from_vec(Shape::vector(c), v.iter().map(|x| x.to_f64_lossy() as f32).collect())
                    .expect("channel-sized statistics")
            };
            tensors.push((format!("{slot}/{RUNNING_MEAN}"), vec(&r.mean)));
            tensors.push((format!("{slot}/{RUNNING_VAR}"), vec(&r.var)));
        }
        if let Some(opt) = optimizer {
            for (kind, moments) in [("m", &opt.m), ("v", &opt.v)] {
                for (i, t) in moments.iter().enumerate() {
                    tensors.push((format!("opt/{kind}/{}", model.params().name(i)), t.cast()));
                }
            }
        }
        Self {
            config: model.config().clone(),
            bn_scope: model.bn_scope(),
            phase,
            meta: BTreeMap::new(),
            optimizer_step: optimizer.map(|o| o.step),
            tensors,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let len = (t.len() * 4) as u64;
            manifest.push(ManifestEntry {
                name: name.clone(),
                dims: t.shape().dims(),
                dtype: "f32".into(),
                offset,
                len,
            });
            offset += len;
        }
        let header = Header {
            config: self.config.clone(),
            bn_scope: self.bn_scope,
            phase: self.phase,
            meta: self.meta.clone(),
            optimizer_step: self.optimizer_step,
            manifest,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(18 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 18 || &bytes[..6] != MAGIC {
            return Err(bad("not a PLNET1 checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[10..18].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(18..)
            .filter(|b| b.len() >= hlen)
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| bad(format!("header: {e}")))?;
        let payload = &body[hlen..];

        let mut expected = 0u64;
        let mut names = HashSet::new();
        let mut tensors = Vec::with_capacity(header.manifest.len());
        for e in &header.manifest {
            if e.dtype != "f32" {
                return Err(bad(format!("{}: unsupported dtype {}", e.name, e.dtype)));
            }
            if !names.insert(e.name.as_str()) {
                return Err(bad(format!("duplicate entry {}", e.name)));
            }
            if e.offset != expected {
                return Err(bad(format!("{}: offset {} overlaps or leaves a gap", e.name, e.offset)));
            }
            let shape = Shape::from_dims(e.dims);
            if e.len != (shape.numel() * 4) as u64 {
                return Err(bad(format!(
                    "{}: length {} does not match dims {:?}",
                    e.name, e.len, e.dims
                )));
            }
            let raw = payload
                .get(e.offset as usize..(e.offset + e.len) as usize)
                .ok_or_else(|| bad(format!("{}: payload truncated", e.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((
                e.name.clone(),
                Tensor::from_vec(shape, data).map_err(|e| bad(e.to_string()))?,
            ));
            expected += e.len;
        }
        if payload.len() as u64 != expected {
            return Err(bad(format!(
                "payload has {} bytes, manifest covers {expected}",
                payload.len()
            )));
        }
        Ok(Self {
            config: header.config,
            bn_scope: header.bn_scope,
            phase: header.phase,
            meta: header.meta,
            optimizer_step: header.optimizer_step,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Rebuilds the model: graph from the stored config, weights and
    /// statistics by path.
    pub fn model<T: Scalar>(&self) -> Result<Model<T>> {
        let graph = ComputeGraph::build(&self.config)?;
        let mut params = ParamStore::new();
        for (name, _) in graph.tensor_specs() {
            let t = self.get(&name).ok_or_else(|| bad(format!("missing tensor {name}")))?;
            params.insert(name, t.cast())?;
        }
        let mut model = Model::from_parts(graph, params)?;
        model.set_bn_scope(self.bn_scope);
        let slots: Vec<String> = model.running().map(|(n, _)| n.to_string()).collect();
        for path in slots {
            let get = |k: &str| {
                self.get(&format!("{path}/{k}"))
                    .ok_or_else(|| bad(format!("missing {path}/{k}")))
            };
            let (mean, var) = (get(RUNNING_MEAN)?, get(RUNNING_VAR)?);
            let r = model.running_mut(&path).expect("slot listed by the model");
            if mean.len() != r.channels() || var.len() != r.channels() {
                return Err(bad(format!("{path}: statistics have the wrong channel count")));
            }
            r.mean = mean.data().iter().map(|&v| T::from_f64_lossy(v as f64)).collect();
            r.var = var.data().iter().map(|&v| T::from_f64_lossy(v as f64)).collect();
        }
        Ok(model)
    }

    /// Optimizer state matching `model`, if one was stored.
    pub fn optimizer<T: Scalar>(&self, model: &Model<T>) -> Result<Option<OptimizerState<T>>> {
        let Some(step) = self.optimizer_step else {
            return Ok(None);
        };
        let mut state = OptimizerState::new(model.params());
        for i in 0..model.params().len() {
            let name = model.params().name(i);
            for (kind, dst) in [("m", &mut state.m[i]), ("v", &mut state.v[i])] {
                let t = self
                    .get(&format!("opt/{kind}/{name}"))
                    .ok_or_else(|| bad(format!("missing opt/{kind}/{name}")))?;
                if t.shape() != dst.shape() {
                    return Err(bad(format!("opt/{kind}/{name}: wrong shape")));
                }
                *dst = t.cast();
            }
        }
        state.step = step;
        Ok(Some(state))
    }
}
