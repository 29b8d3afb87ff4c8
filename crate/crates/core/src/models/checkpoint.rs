//! Binary checkpoint format.
//!
//! Layout: the 8-byte magic `HSVSEGCK`, a little-endian `u64` header length,
//! a JSON header, then every tensor as little-endian `f32` in header order.
//! The header carries a SHA-256 of the tensor bytes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, Network, PromptableConfig, PromptableNet, Segmenter, UNet, UnetConfig};
use crate::error::{Error, Result};
use crate::nn::ParamStore;

const MAGIC: &[u8; 8] = b"HSVSEGCK";
const FORMAT_VERSION: u32 = 1;

/// Environment variable naming the directory that holds registry checkpoints.
pub const MODEL_DIR_ENV: &str = "HSVSEG_MODEL_DIR";

/// Registry identifier loaded when the foundation backend gets no reference.
pub const DEFAULT_FOUNDATION_REF: &str = "facebook/sam-vit-base";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Architecture {
    Unet(UnetConfig),
    Foundation(PromptableConfig),
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
    frozen: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    backend: Backend,
    patch_resolution: usize,
    architecture: Architecture,
    tensors: Vec<TensorMeta>,
    digest: String,
}

fn load_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Load {
        what: format!("checkpoint {}", path.display()),
        detail: detail.into(),
    }
}

/// File name a registry identifier maps to inside the model directory.
pub fn registry_file_name(id: &str) -> String {
    format!("{}.ckpt", id.replace('/', "__"))
}

/// Turns a checkpoint reference into a file path: existing paths are used
/// as-is, anything else is looked up in the model directory.
pub fn resolve_reference(reference: &str) -> Result<PathBuf> {
    let direct = PathBuf::from(reference);
    if direct.is_file() {
        return Ok(direct);
    }
    if let Some(dir) = std::env::var_os(MODEL_DIR_ENV) {
        let candidate = PathBuf::from(dir).join(registry_file_name(reference));
        if candidate.is_file() {
            return Ok(candidate);
        }
    }
    Err(Error::Load {
        what: format!("checkpoint {reference}"),
        detail: format!("no such file, and no registry entry under ${MODEL_DIR_ENV}"),
    })
}

pub fn save(segmenter: &Segmenter, path: &Path) -> Result<()> {
    let (architecture, store) = match &segmenter.network {
        Network::Unet(net) => (Architecture::Unet(net.config), &net.store),
        Network::Foundation(net) => (Architecture::Foundation(net.config), &net.store),
        Network::Threshold(_) => {
            return Err(Error::argument(
                "the threshold backend has no weights to checkpoint",
            ))
        }
    };
    let mut data = Vec::with_capacity(4 * store.iter().map(|(_, p)| p.value.len()).sum::<usize>());
    let mut tensors = Vec::with_capacity(store.len());
    for (_, p) in store.iter() {
        tensors.push(TensorMeta {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            frozen: p.frozen,
        });
        for v in p.value.iter() {
            data.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        version: FORMAT_VERSION,
        backend: segmenter.backend(),
        patch_resolution: segmenter.patch_resolution(),
        architecture,
        tensors,
        digest: hex::encode(Sha256::digest(&data)),
    };
    let header = serde_json::to_vec(&header)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("ckpt.partial");
    let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(MAGIC)
        .and_then(|_| file.write_all(&(header.len() as u64).to_le_bytes()))
        .and_then(|_| file.write_all(&header))
        .and_then(|_| file.write_all(&data))
        .and_then(|_| file.sync_all())
        .map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Segmenter> {
    let bytes = fs::read(path).map_err(|e| load_err(path, e.to_string()))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(load_err(path, "not a checkpoint file (bad magic)"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let data_start = 16usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| load_err(path, "truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[16..data_start])
        .map_err(|e| load_err(path, format!("malformed header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(load_err(
            path,
            format!("unsupported format version {}", header.version),
        ));
    }
    let data = &bytes[data_start..];
    let actual = hex::encode(Sha256::digest(data));
    if actual != header.digest {
        return Err(load_err(
            path,
            format!(
                "digest mismatch: header records {}, data hashes to {actual}",
                header.digest
            ),
        ));
    }
    let expected_len: usize = header
        .tensors
        .iter()
        .map(|t| 4 * t.shape.iter().product::<usize>())
        .sum();
    if expected_len != data.len() {
        return Err(load_err(
            path,
            format!("expected {expected_len} data bytes, found {}", data.len()),
        ));
    }
    let mut store = ParamStore::new();
    let mut offset = 0;
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        let values = data[offset..offset + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        offset += 4 * n;
        let value = ArrayD::from_shape_vec(IxDyn(&t.shape), values).expect("length checked");
        store.add(t.name.clone(), value, t.frozen);
    }
    let network = match (header.backend, header.architecture) {
        (Backend::Unet, Architecture::Unet(cfg)) => {
            cfg.validate(header.patch_resolution)?;
            Network::Unet(UNet::with_store(cfg, store).map_err(|e| load_err(path, e.to_string()))?)
        }
        (Backend::Foundation, Architecture::Foundation(cfg)) => {
            cfg.validate(header.patch_resolution)?;
            Network::Foundation(
                PromptableNet::with_store(cfg, store).map_err(|e| load_err(path, e.to_string()))?,
            )
        }
        (backend, _) => {
            return Err(load_err(
                path,
                format!("architecture does not match backend {backend}"),
            ))
        }
    };
    let segmenter = Segmenter {
        network,
        patch_resolution: header.patch_resolution,
    };
    segmenter
        .verify_partition()
        .map_err(|e| load_err(path, e.to_string()))?;
    Ok(segmenter)
}

/// Replaces `target` with `source` after checking that both describe the
/// same tensors (names, shapes and frozen flags, in order).
pub(crate) fn adopt_store(target: &mut ParamStore, source: ParamStore) -> Result<()> {
    if target.len() != source.len() {
        return Err(Error::invalid(format!(
            "expected {} tensors, found {}",
            target.len(),
            source.len()
        )));
    }
    for ((_, want), (_, got)) in target.iter().zip(source.iter()) {
        if want.name != got.name || want.value.shape() != got.value.shape() {
            return Err(Error::invalid(format!(
                "tensor {} {:?} does not match expected {} {:?}",
                got.name,
                got.value.shape(),
                want.name,
                want.value.shape()
            )));
        }
        if want.frozen != got.frozen {
            return Err(Error::invalid(format!(
                "tensor {} has the wrong trainable flag",
                got.name
            )));
        }
    }
    *target = source;
    Ok(())
}
