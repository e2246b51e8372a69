//! Named parameter storage, SGD with momentum and the checkpoint container.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which sub-network a parameter belongs to. Optimizer steps are issued per group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    Rpn,
    Rpc,
    Discriminator,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, tensor: Tensor) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            group,
            tensor,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn group_of(&self, id: ParamId) -> ParamGroup {
        self.entries[id.0].group
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    /// Total scalar parameter count, optionally restricted to one group.
    pub fn count(&self, group: Option<ParamGroup>) -> usize {
        self.entries
            .iter()
            .filter(|e| group.is_none_or(|g| e.group == g))
            .map(|e| e.tensor.len())
            .sum()
    }

    /// Flat copy of every value, in registration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.entries
            .iter()
            .flat_map(|e| e.tensor.data.iter().copied())
            .collect()
    }
}

/// SGD with classical momentum (`v = m·v + g; p -= lr·v`), one velocity
/// buffer per parameter.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    /// Global-norm clip applied per step; `None` disables clipping.
    pub clip_norm: Option<f64>,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(store: &ParamStore, lr: f64, momentum: f64, clip_norm: Option<f64>) -> Self {
        Sgd {
            lr,
            momentum,
            clip_norm,
            velocity: store
                .entries
                .iter()
                .map(|e| vec![0.0; e.tensor.len()])
                .collect(),
        }
    }

    /// Updates every parameter in `groups` that has a gradient. Returns the
    /// pre-clip global gradient norm over the updated parameters.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<Vec<f64>>],
        groups: &[ParamGroup],
    ) -> f64 {
        let selected: Vec<usize> = (0..store.len())
            .filter(|&i| groups.contains(&store.entries[i].group) && grads[i].is_some())
            .collect();
        let norm = selected
            .iter()
            .flat_map(|&i| grads[i].as_ref().unwrap().iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        let scale = match self.clip_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        for i in selected {
            let g = grads[i].as_ref().unwrap();
            let v = &mut self.velocity[i];
            let p = &mut store.entries[i].tensor.data;
            for ((pv, vv), gv) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *vv = self.momentum * *vv + scale * gv;
                *pv -= self.lr * *vv;
            }
        }
        norm
    }
}

const MAGIC: &[u8; 8] = b"CTCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
struct CheckpointHeader {
    version: u32,
    fingerprint: String,
    iteration: usize,
    stage: String,
    params: Vec<HeaderEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
struct HeaderEntry {
    name: String,
    group: ParamGroup,
    shape: Vec<usize>,
}

/// Serialized model state: every parameter, the configuration fingerprint
/// and the global iteration counter.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: String,
    pub iteration: usize,
    pub stage: String,
    pub params: ParamStore,
}

impl Checkpoint {
    /// Layout: 8-byte magic, u32 LE header length, JSON header, then every
    /// parameter value as f64 LE in header order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            fingerprint: self.fingerprint.clone(),
            iteration: self.iteration,
            stage: self.stage.clone(),
            params: self
                .params
                .entries
                .iter()
                .map(|e| HeaderEntry {
                    name: e.name.clone(),
                    group: e.group,
                    shape: e.tensor.shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + json.len() + 8 * self.params.count(None));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for e in &self.params.entries {
            for v in &e.tensor.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |d: &str| Error::format(origin, d);
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = bytes
            .get(12..12 + hlen)
            .ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(body).map_err(|e| Error::format(origin, e))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {}", header.version)));
        }
        let mut cursor = 12 + hlen;
        let mut params = ParamStore::default();
        for e in header.params {
            let n: usize = e.shape.iter().product();
            let raw = bytes
                .get(cursor..cursor + 8 * n)
                .ok_or_else(|| bad("truncated parameter data"))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            cursor += 8 * n;
            params.add(e.name, e.group, Tensor::new(e.shape, data));
        }
        if cursor != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Checkpoint {
            fingerprint: header.fingerprint,
            iteration: header.iteration,
            stage: header.stage,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint and verifies it was produced under `expected_fingerprint`.
    pub fn load(path: &Path, expected_fingerprint: Option<&str>) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let ckpt = Checkpoint::from_bytes(&bytes, path)?;
        if let Some(expected) = expected_fingerprint {
            if ckpt.fingerprint != expected {
                return Err(Error::Fingerprint {
                    expected: expected.to_string(),
                    found: ckpt.fingerprint,
                });
            }
        }
        Ok(ckpt)
    }
}
