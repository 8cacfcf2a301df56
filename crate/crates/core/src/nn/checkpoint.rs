//! Binary checkpoint container.
//!
//! Layout (little endian):
//!
//! ```text
//! b"PASSCKPT" | u32 version | u32 header_len | header JSON
//! u32 tensor_count | per tensor: u32 name_len, name, u32 rank, u64 dims.., f64 values..
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so a round trip is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::{ModelConfig, SegModel};
use super::param::Module;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per tracked norm layer: `(name, running mean, running var)`.
pub type SourceStats = Vec<(String, Vec<f64>, Vec<f64>)>;

const MAGIC: &[u8; 8] = b"PASSCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// Mean foreground ratio per class over the source labels.
    pub class_priors: Vec<f64>,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor>,
}

fn running_key(layer: &str, which: &str) -> String {
    format!("{layer}.running_{which}")
}

impl Checkpoint {
    pub fn from_model(model: &SegModel, class_priors: Vec<f64>) -> Self {
        let mut tensors = BTreeMap::new();
        for p in model.params() {
            let mut t = p.value.clone();
            t.grad = None;
            t.requires_grad = false;
            tensors.insert(p.name.clone(), t);
        }
        for (layer, mean, var) in model.running_stats() {
            tensors.insert(running_key(&layer, "mean"), Tensor::from_vec(mean));
            tensors.insert(running_key(&layer, "var"), Tensor::from_vec(var));
        }
        Self {
            meta: CheckpointMeta {
                model: model.config.clone(),
                class_priors,
                extra: BTreeMap::new(),
            },
            tensors,
        }
    }

    pub fn to_model(&self) -> Result<SegModel> {
        let mut model = SegModel::new(self.meta.model.clone(), 0)?;
        let mut err = None;
        model.visit_params_mut(&mut |p| match self.tensors.get(&p.name) {
            Some(t) if t.shape() == p.value.shape() => {
                p.value.data_mut().copy_from_slice(t.data());
            }
            _ if err.is_some() => {}
            Some(t) => err = Some(Error::shape("checkpoint param", p.value.shape(), t.shape())),
            None => err = Some(Error::StructureMismatch(format!("missing parameter {}", p.name))),
        });
        if let Some(e) = err {
            return Err(e);
        }
        for layer in model.norms_mut().filter(|n| n.tracks_running_stats()) {
            let mean = self.tensors.get(&running_key(&layer.name, "mean"));
            let var = self.tensors.get(&running_key(&layer.name, "var"));
            match (mean, var) {
                (Some(m), Some(v)) if m.numel() == layer.num_features && v.numel() == layer.num_features => {
                    layer.running_mean = m.data().to_vec();
                    layer.running_var = v.data().to_vec();
                }
                _ => return Err(Error::MissingStats),
            }
        }
        Ok(model)
    }

    /// Source normalization statistics `(layer, mean, var)` stored alongside the weights.
    pub fn source_stats(&self) -> Result<SourceStats> {
        let model = SegModel::new(self.meta.model.clone(), 0)?;
        let mut out = Vec::new();
        for layer in model.norms().filter(|n| n.tracks_running_stats()) {
            let m = self.tensors.get(&running_key(&layer.name, "mean"));
            let v = self.tensors.get(&running_key(&layer.name, "var"));
            match (m, v) {
                (Some(m), Some(v)) => out.push((layer.name.clone(), m.data().to_vec(), v.data().to_vec())),
                _ => return Err(Error::MissingStats),
            }
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let mut r = Reader {
            buf: bytes,
            pos: 0,
            origin,
        };
        if r.take(8)? != MAGIC {
            return Err(r.fail("bad magic"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(r.fail(&format!("unsupported version {version}")));
        }
        let hlen = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(hlen)?)?;
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| r.fail("tensor name is not utf-8"))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f64::from_bits(r.u64()?));
            }
            tensors.insert(name, Tensor::new(&shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(r.fail("trailing bytes"));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    /// SHA-256 of the serialized checkpoint, hex encoded.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Reader<'a> {
    fn fail(&self, reason: &str) -> Error {
        Error::Format {
            path: self.origin.to_string(),
            reason: format!("{reason} at byte {}", self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.fail("truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
