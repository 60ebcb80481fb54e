//! Single-file checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 0   8 bytes   magic "DSEGCKPT"
//! 8   u32       format version (currently 1)
//! 12  u64       header length N in bytes
//! 20  N bytes   UTF-8 JSON header
//! ..  payload   f32 values, row-major, concatenated in header order
//! ```
//!
//! The header holds the network configuration, iteration counter, the
//! serialized training RNG, free-form metadata and a tensor index of
//! `{group, name, shape, offset}` entries where `offset` counts f32 elements
//! from the start of the payload. Groups are `param`, `adam_m`, `adam_v`
//! and `ema`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use super::DenoiserConfig;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DSEGCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorData {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let shape = t.size().iter().map(|&d| d as usize).collect();
        let data = Vec::<f32>::try_from(t.to_kind(Kind::Float).contiguous().flatten(0, -1))?;
        Ok(TensorData { shape, data })
    }

    pub fn to_tensor(&self) -> Tensor {
        let shape: Vec<i64> = self.shape.iter().map(|&d| d as i64).collect();
        Tensor::from_slice(&self.data).view(shape.as_slice())
    }
}

pub type TensorMap = BTreeMap<String, TensorData>;

pub fn tensor_map(tensors: &BTreeMap<String, Tensor>) -> Result<TensorMap> {
    tensors
        .iter()
        .map(|(k, t)| Ok((k.clone(), TensorData::from_tensor(t)?)))
        .collect()
}

pub fn to_tensors(map: &TensorMap) -> BTreeMap<String, Tensor> {
    map.iter().map(|(k, v)| (k.clone(), v.to_tensor())).collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first_moment: TensorMap,
    pub second_moment: TensorMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: DenoiserConfig,
    pub iteration: u64,
    pub params: TensorMap,
    pub optimizer: OptimizerState,
    pub ema: Option<TensorMap>,
    pub rng: serde_json::Value,
    pub metadata: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: DenoiserConfig,
    iteration: u64,
    optimizer_step: u64,
    rng: serde_json::Value,
    metadata: serde_json::Value,
    tensors: Vec<IndexEntry>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut groups: Vec<(&str, &TensorMap)> = vec![
            ("param", &self.params),
            ("adam_m", &self.optimizer.first_moment),
            ("adam_v", &self.optimizer.second_moment),
        ];
        if let Some(ema) = &self.ema {
            groups.push(("ema", ema));
        }
        let mut index = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        let mut offset = 0usize;
        for (group, map) in groups {
            for (name, t) in map {
                let expected: usize = t.shape.iter().product();
                if expected != t.data.len() {
                    return Err(Error::Checkpoint(format!("{group}/{name}: shape and data disagree")));
                }
                index.push(IndexEntry {
                    group: group.to_string(),
                    name: name.clone(),
                    shape: t.shape.clone(),
                    offset,
                });
                offset += t.data.len();
                for v in &t.data {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let header = Header {
            config: self.config.clone(),
            iteration: self.iteration,
            optimizer_step: self.optimizer.step,
            rng: self.rng.clone(),
            metadata: self.metadata.clone(),
            tensors: index,
        };
        let header = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(fail("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header_end = 20usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| fail("truncated header"))?;
        let header: Header =
            serde_json::from_slice(&bytes[20..header_end]).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let payload = &bytes[header_end..];

        let mut groups: BTreeMap<String, TensorMap> = BTreeMap::new();
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let start = entry.offset * 4;
            let end = start + n * 4;
            if end > payload.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} runs past the payload",
                    entry.name
                )));
            }
            let data = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            groups.entry(entry.group).or_default().insert(
                entry.name,
                TensorData {
                    shape: entry.shape,
                    data,
                },
            );
        }
        Ok(Checkpoint {
            config: header.config,
            iteration: header.iteration,
            params: groups.remove("param").unwrap_or_default(),
            optimizer: OptimizerState {
                step: header.optimizer_step,
                first_moment: groups.remove("adam_m").unwrap_or_default(),
                second_moment: groups.remove("adam_v").unwrap_or_default(),
            },
            ema: groups.remove("ema"),
            rng: header.rng,
            metadata: header.metadata,
        })
    }

    /// Write to `path` via a sibling temp file and rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn ensure_config(&self, expected: &DenoiserConfig) -> Result<()> {
        if &self.config != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint config {:?} does not match requested {:?}",
                self.config, expected
            )));
        }
        Ok(())
    }

    /// Parameters used for sampling: EMA weights when present.
    pub fn sampling_params(&self) -> &TensorMap {
        self.ema.as_ref().unwrap_or(&self.params)
    }

    /// Rebuild a network from the stored configuration and weights.
    pub fn denoiser(&self) -> Result<super::Denoiser> {
        let mut model = super::Denoiser::new(self.config.clone(), 0)?;
        model.load_parameters(&to_tensors(self.sampling_params()))?;
        Ok(model)
    }
}
