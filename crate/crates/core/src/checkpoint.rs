//! Self-describing checkpoint files.
//!
//! Layout: the magic `PSCKPT1\n`, a little-endian `u64` header length, a JSON
//! header, then every tensor as little-endian `f32` in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use autograd::{ParamSet, Tensor};
use serde::{Deserialize, Serialize};

use crate::conditioning::ConditioningMode;
use crate::config::ModelKind;
use crate::error::{Error, Result};
use crate::networks::{DiscriminatorSpec, GeneratorSpec};
use crate::volume::NormalizationStats;

const MAGIC: &[u8; 8] = b"PSCKPT1\n";

/// Parameters of one network, by tensor name.
pub type NamedTensors = Vec<(String, Tensor<f32>)>;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelKind,
    pub conditioning: ConditioningMode,
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
    pub stats: NormalizationStats,
    pub config_hash: String,
    /// Number of completed epochs.
    pub epoch: usize,
    pub val_ssim: Option<f64>,
    /// Network name to parameters, in insertion order.
    pub networks: Vec<(String, NamedTensors)>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct NetworkEntry {
    name: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelKind,
    conditioning: ConditioningMode,
    generator: GeneratorSpec,
    discriminator: DiscriminatorSpec,
    stats: NormalizationStats,
    config_hash: String,
    epoch: usize,
    val_ssim: Option<f64>,
    networks: Vec<NetworkEntry>,
}

pub fn named_tensors(set: &ParamSet<f32>) -> NamedTensors {
    set.iter().map(|(_, name, t)| (name.to_owned(), t.clone())).collect()
}

/// Overwrites every tensor of `set` with the stored one of the same name.
pub fn load_into(set: &mut ParamSet<f32>, stored: &NamedTensors, network: &str) -> Result<()> {
    if stored.len() != set.len() {
        return Err(Error::Data(format!(
            "checkpoint network {network} has {} tensors, architecture expects {}",
            stored.len(),
            set.len()
        )));
    }
    for (_, name, t) in set.iter_mut() {
        let (_, src) = stored
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::Data(format!("checkpoint network {network} lacks tensor {name}")))?;
        if src.shape() != t.shape() {
            return Err(Error::Shape(format!(
                "{network}.{name}: stored {:?}, expected {:?}",
                src.shape(),
                t.shape()
            )));
        }
        t.data_mut().copy_from_slice(src.data());
    }
    Ok(())
}

impl Checkpoint {
    pub fn network(&self, name: &str) -> Option<&NamedTensors> {
        self.networks.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            model: self.model,
            conditioning: self.conditioning,
            generator: self.generator.clone(),
            discriminator: self.discriminator.clone(),
            stats: self.stats,
            config_hash: self.config_hash.clone(),
            epoch: self.epoch,
            val_ssim: self.val_ssim,
            networks: self
                .networks
                .iter()
                .map(|(name, ts)| NetworkEntry {
                    name: name.clone(),
                    tensors: ts.iter().map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape().to_vec() }).collect(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, ts) in &self.networks {
            for (_, t) in ts {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |r: String| Error::format(path, r);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..).unwrap_or_default();
        if hlen > body.len() {
            return Err(bad("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| bad(format!("bad header: {e}")))?;
        header.stats.validate()?;
        let mut data = &body[hlen..];
        let mut networks = Vec::with_capacity(header.networks.len());
        for net in header.networks {
            let mut tensors = Vec::with_capacity(net.tensors.len());
            for te in net.tensors {
                let n: usize = te.shape.iter().product();
                if data.len() < 4 * n {
                    return Err(bad(format!("truncated tensor {}.{}", net.name, te.name)));
                }
                let (chunk, rest) = data.split_at(4 * n);
                data = rest;
                let values = chunk.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
                tensors.push((te.name, Tensor::new(&te.shape, values)));
            }
            networks.push((net.name, tensors));
        }
        if !data.is_empty() {
            return Err(bad(format!("{} trailing bytes", data.len())));
        }
        Ok(Self {
            model: header.model,
            conditioning: header.conditioning,
            generator: header.generator,
            discriminator: header.discriminator,
            stats: header.stats,
            config_hash: header.config_hash,
            epoch: header.epoch,
            val_ssim: header.val_ssim,
            networks,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingCheckpoint(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
