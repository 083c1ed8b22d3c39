//! Binary weight files with a JSON metadata sidecar.
//!
//! Layout: magic `TCPL`, `u32` version, `u32` tensor count, then per tensor
//! a `u16` name length, the UTF-8 name, a `u8` rank, `u32` dims and the
//! `f32` row-major payload, all little-endian. The sidecar at
//! `<path>.json` holds the model config, input calibration, base hash and
//! the SHA-256 of the binary file. The sidecar carries its own digest and
//! must be byte-identical to its canonical rendering, so no edit to either
//! file goes unnoticed.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{base_hash, Calibration, ModelConfig, TcpLlm};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TCPL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub model: ModelConfig,
    pub calibration: Option<Calibration>,
    pub base_hash: String,
    pub payload_sha256: String,
    pub tensor_count: usize,
    pub train: Option<TrainConfig>,
    /// SHA-256 of the canonical sidecar rendered with this field empty.
    pub meta_sha256: String,
}

impl CheckpointMeta {
    fn render(&self) -> String {
        serde_json::to_string_pretty(self).expect("metadata serializes") + "\n"
    }

    fn digest(&self) -> String {
        let blank = CheckpointMeta { meta_sha256: String::new(), ..self.clone() };
        hex::encode(Sha256::digest(blank.render().as_bytes()))
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Serialized weight file for every tensor in the store.
pub fn encode_weights(model: &TcpLlm) -> Result<Vec<u8>> {
    if let Some(t) = model.backbone().merged_targets().next() {
        return Err(Error::contract(format!("cannot save a model with merged adapter `{t}`")));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for (_, name, t) in model.store.iter() {
        let name_len = u16::try_from(name.len()).map_err(|_| Error::contract(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parsed `(name, tensor)` records of a weight file.
pub fn decode_weights(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Integrity("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Version { found: version, expected: FORMAT_VERSION });
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let n = u16::from_le_bytes(r.take(2)?.try_into().expect("two bytes")) as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::Integrity("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = r.take(1)?[0] as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let raw = r.take(len.checked_mul(4).ok_or_else(|| Error::Integrity("tensor size overflows".into()))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("four bytes"))).collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Integrity(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Integrity("weight file truncated".into()));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }
}

pub fn save_checkpoint(model: &TcpLlm, train: Option<&TrainConfig>, path: &Path) -> Result<CheckpointMeta> {
    let bytes = encode_weights(model)?;
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        model: model.config.clone(),
        calibration: model.calibration,
        base_hash: model.current_base_hash(),
        payload_sha256: hex::encode(Sha256::digest(&bytes)),
        tensor_count: model.store.len(),
        train: train.cloned(),
        meta_sha256: String::new(),
    };
    let meta = CheckpointMeta { meta_sha256: meta.digest(), ..meta };
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    fs::write(&side, meta.render()).map_err(|e| Error::io(&side, e))?;
    Ok(meta)
}

/// Parses and verifies the sidecar. A foreign format version is reported
/// before any integrity check.
pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    let side = sidecar_path(path);
    let bytes = fs::read(&side).map_err(|e| Error::io(&side, e))?;
    let meta: CheckpointMeta =
        serde_json::from_slice(&bytes).map_err(|e| Error::Integrity(format!("{}: {e}", side.display())))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Version { found: meta.format_version, expected: FORMAT_VERSION });
    }
    if meta.render().as_bytes() != bytes.as_slice() {
        return Err(Error::Integrity(format!("{} is not in canonical form", side.display())));
    }
    let digest = meta.digest();
    if digest != meta.meta_sha256 {
        return Err(Error::Integrity(format!("{}: digest {digest} does not match recorded {}", side.display(), meta.meta_sha256)));
    }
    Ok(meta)
}

/// Loads weights and metadata into a model rebuilt from the stored config.
pub fn load_checkpoint(path: &Path) -> Result<(TcpLlm, CheckpointMeta)> {
    let meta = read_meta(path)?;
    load_with_config(path, meta.model.clone())
}

/// Loads into a model built from `config`; every stored tensor must exist
/// there with the same shape.
pub fn load_with_config(path: &Path, config: ModelConfig) -> Result<(TcpLlm, CheckpointMeta)> {
    let meta = read_meta(path)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let digest = hex::encode(Sha256::digest(&bytes));
    if digest != meta.payload_sha256 {
        return Err(Error::Integrity(format!("payload hash {digest} does not match recorded {}", meta.payload_sha256)));
    }
    let tensors = decode_weights(&bytes)?;
    let mut model = TcpLlm::new(config)?;
    if tensors.len() != model.store.len() {
        return Err(Error::Shape(format!(
            "checkpoint holds {} tensors, model expects {}",
            tensors.len(),
            model.store.len()
        )));
    }
    for (name, t) in tensors {
        let id = model.store.id(&name)?;
        let slot = model.store.get_mut(id);
        if slot.shape() != t.shape() {
            return Err(Error::Shape(format!(
                "tensor `{name}` has shape {:?} in the checkpoint but {:?} in the model",
                t.shape(),
                slot.shape()
            )));
        }
        slot.data_mut().copy_from_slice(t.data());
    }
    let h = model.rehash_base();
    if h != meta.base_hash || h != base_hash(&model.store) {
        return Err(Error::Integrity(format!("base hash {h} does not match recorded {}", meta.base_hash)));
    }
    model.calibration = meta.calibration;
    Ok((model, meta))
}
