//! Checkpoint files: a binary tensor blob plus a JSON sidecar at
//! `<blob>.json`.
//!
//! Blob layout (little endian): magic `PLLFERCK`, `u32` version, `u32`
//! tensor count, then per tensor a `u32` name length, the UTF-8 name,
//! `u64` rows, `u64` cols and `rows * cols` `f64` values in row-major order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hog::HogParams;
use crate::model::params::{named, named_mut, Parameters, Tensor};
use crate::model::{EncoderConfig, ModelConfig};
use crate::optim::AdamW;

const MAGIC: &[u8; 8] = b"PLLFERCK";
const VERSION: u32 = 1;
const OPT_M: &str = "optim.m";
const OPT_V: &str = "optim.v";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: Stage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hog: Option<HogParams>,
    /// Hash of the encoder configuration the weights were trained with.
    pub config_hash: String,
    pub encoder: EncoderConfig,
    #[serde(rename = "K", default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    /// Parameter prefixes that later stages drop (the pre-training head).
    #[serde(default)]
    pub discardable: Vec<String>,
    pub seed: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub optimizer_step: u64,
    /// Mean training loss of each completed epoch.
    #[serde(default)]
    pub epoch_losses: Vec<f64>,
    #[serde(default)]
    pub blob_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn sidecar_path(blob: &Path) -> PathBuf {
    let mut s = blob.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn encode_blob(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.nrows() as u64).to_le_bytes());
        out.extend_from_slice(&(t.ncols() as u64).to_le_bytes());
        for v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(e) => {
                let s = &self.bytes[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(format!("truncated at byte {}", self.pos)),
        }
    }
    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_blob(bytes: &[u8]) -> std::result::Result<Vec<(String, Tensor)>, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err("bad magic".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| format!("tensor name: {e}"))?
            .to_string();
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let n = rows.checked_mul(cols).ok_or("tensor size overflow")?;
        let raw = r.take(n.checked_mul(8).ok_or("tensor size overflow")?)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::from_shape_vec((rows, cols), data).unwrap()));
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(out)
}

impl Checkpoint {
    /// Collects the parameters of `model` under their visit names.
    pub fn from_params<P: Parameters + ?Sized>(meta: CheckpointMeta, model: &P) -> Self {
        Self {
            meta,
            tensors: named(model).into_iter().map(|(n, t)| (n, t.clone())).collect(),
        }
    }

    pub fn with_optimizer<P: Parameters + ?Sized>(mut self, model: &P, opt: &AdamW) -> Self {
        for (((name, _), m), v) in named(model).into_iter().zip(&opt.m).zip(&opt.v) {
            self.tensors.push((format!("{OPT_M}.{name}"), m.clone()));
            self.tensors.push((format!("{OPT_V}.{name}"), v.clone()));
        }
        self.meta.optimizer_step = opt.step;
        self
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Fails unless the stored encoder matches `config` exactly.
    pub fn require_encoder(&self, config: &EncoderConfig) -> Result<()> {
        let want = config.config_hash();
        if self.meta.config_hash != want {
            return Err(Error::Incompatible(format!(
                "checkpoint encoder {:?} (hash {}) does not match requested {:?} (hash {want})",
                self.meta.encoder,
                &self.meta.config_hash[..12.min(self.meta.config_hash.len())],
                config,
            )));
        }
        Ok(())
    }

    /// Copies stored tensors into every parameter of `target` whose name
    /// starts with `prefix`. Missing tensors or shape changes are errors.
    pub fn load_into<P: Parameters + ?Sized>(&self, prefix: &str, target: &mut P) -> Result<()> {
        for (name, t) in named_mut(target) {
            if !name.starts_with(prefix) {
                continue;
            }
            let src = self
                .tensor(&name)
                .ok_or_else(|| Error::Incompatible(format!("checkpoint has no tensor {name}")))?;
            if src.dim() != t.dim() {
                return Err(Error::Incompatible(format!(
                    "tensor {name} has shape {:?} in the checkpoint, {:?} in the model",
                    src.dim(),
                    t.dim()
                )));
            }
            t.assign(src);
        }
        Ok(())
    }

    /// Restores optimizer moments saved by [`Checkpoint::with_optimizer`].
    pub fn load_optimizer<P: Parameters + ?Sized>(&self, model: &P, opt: &mut AdamW) -> Result<()> {
        let names: Vec<String> = named(model).into_iter().map(|(n, _)| n).collect();
        if names.len() != opt.m.len() {
            return Err(Error::Incompatible("optimizer does not match the model".into()));
        }
        for (i, name) in names.iter().enumerate() {
            for (key, slot) in [(OPT_M, &mut opt.m[i]), (OPT_V, &mut opt.v[i])] {
                let full = format!("{key}.{name}");
                let src = self
                    .tensor(&full)
                    .ok_or_else(|| Error::Incompatible(format!("checkpoint has no optimizer state {full}")))?;
                if src.dim() != slot.dim() {
                    return Err(Error::Incompatible(format!("optimizer state {full} has the wrong shape")));
                }
                slot.assign(src);
            }
        }
        opt.step = self.meta.optimizer_step;
        Ok(())
    }
}

/// Writes the blob and its sidecar. Returns the metadata as written, with
/// the blob checksum filled in.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<CheckpointMeta> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let blob = encode_blob(&ckpt.tensors);
    let mut meta = ckpt.meta.clone();
    meta.blob_sha256 = hex::encode(Sha256::digest(&blob));
    fs::write(path, &blob).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&meta).expect("metadata serializes");
    fs::write(&side, json + "\n").map_err(|e| Error::io(&side, e))?;
    Ok(meta)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: side.clone(),
        msg: e.to_string(),
    })?;
    let blob = fs::read(path).map_err(|e| Error::io(path, e))?;
    let digest = hex::encode(Sha256::digest(&blob));
    if digest != meta.blob_sha256 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            msg: format!("checksum mismatch (sidecar {}, blob {digest})", meta.blob_sha256),
        });
    }
    let tensors = decode_blob(&blob).map_err(|msg| Error::Parse {
        path: path.to_path_buf(),
        msg,
    })?;
    if meta.config_hash != meta.encoder.config_hash() {
        return Err(Error::Parse {
            path: side,
            msg: "config_hash does not match the recorded encoder configuration".into(),
        });
    }
    Ok(Checkpoint { meta, tensors })
}
