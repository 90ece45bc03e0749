//! Named parameter tensors, initialization and the JSON checkpoint format.
//!
//! A checkpoint is `{"version":1,"params":{name:{"shape":[..],"data_b64":..}}}`
//! where `data_b64` holds the little-endian `f64` values, base64 encoded.

use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::graph::{ModelGraph, ParamKind};
use crate::tensor::{Shape, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ParamError {
    #[error("missing parameter `{0}`")]
    Missing(String),
    #[error("parameter `{name}` has shape {actual}, expected {expected}")]
    Shape {
        name: String,
        expected: Shape,
        actual: Shape,
    },
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint entry `{0}`")]
    Corrupt(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Parameters keyed by `node/kind`, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// He-normal kernels (`std = sqrt(2 / fan_in)`), zero biases and shifts,
    /// unit scales, and identity moving statistics.
    pub fn init(graph: &ModelGraph, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for spec in graph.param_specs() {
            let t = match spec.kind {
                ParamKind::Kernel => {
                    let dims = spec.shape.dims();
                    let fan_in: usize = dims[..dims.len() - 1].iter().product();
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                    let data = (0..spec.shape.numel()).map(|_| normal.sample(&mut rng)).collect();
                    Tensor::from_vec(spec.shape.clone(), data).expect("sized from shape")
                }
                ParamKind::Gamma | ParamKind::MovingVariance => Tensor::full(spec.shape.clone(), 1.0),
                ParamKind::Bias | ParamKind::Beta | ParamKind::MovingMean => Tensor::zeros(spec.shape.clone()),
            };
            tensors.insert(spec.name, t);
        }
        ParamStore { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor, ParamError> {
        self.tensors
            .get(name)
            .ok_or_else(|| ParamError::Missing(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Checks that every parameter the graph declares is present with the
    /// declared shape.
    pub fn check_against(&self, graph: &ModelGraph) -> Result<(), ParamError> {
        for spec in graph.param_specs() {
            let t = self.require(&spec.name)?;
            if t.shape() != &spec.shape {
                return Err(ParamError::Shape {
                    name: spec.name,
                    expected: spec.shape,
                    actual: t.shape().clone(),
                });
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let params = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let mut bytes = Vec::with_capacity(t.len() * 8);
                for v in t.data() {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
                (
                    name.clone(),
                    CheckpointEntry {
                        shape: t.dims().to_vec(),
                        data_b64: B64.encode(bytes),
                    },
                )
            })
            .collect();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            params,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<ParamStore, ParamError> {
        if ck.version != CHECKPOINT_VERSION {
            return Err(ParamError::Version(ck.version));
        }
        let mut tensors = BTreeMap::new();
        for (name, entry) in &ck.params {
            let corrupt = || ParamError::Corrupt(name.clone());
            let bytes = B64.decode(&entry.data_b64).map_err(|_| corrupt())?;
            if bytes.len() % 8 != 0 {
                return Err(corrupt());
            }
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            let shape = Shape::new(entry.shape.clone()).map_err(|_| corrupt())?;
            tensors.insert(name.clone(), Tensor::from_vec(shape, data).map_err(|_| corrupt())?);
        }
        Ok(ParamStore { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), ParamError> {
        let json = serde_json::to_string(&self.to_checkpoint())?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ParamStore, ParamError> {
        let ck: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::from_checkpoint(&ck)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub shape: Vec<usize>,
    pub data_b64: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub params: BTreeMap<String, CheckpointEntry>,
}
