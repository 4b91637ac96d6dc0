use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::backbone::BackboneSpec;
use crate::datastream::ImageSize;
use crate::error::{Result, SamError};
use crate::nn::{ParamList, DEVICE};

/// Sidecar describing a parameter blob.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub spec: BackboneSpec,
    pub size: ImageSize,
    pub epochs: usize,
    pub seed: u64,
    /// Hex SHA-256 of the blob; filled in on save.
    pub sha256: String,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("safetensors"), stem.with_extension("manifest"))
}

/// Writes `<stem>.safetensors` and `<stem>.manifest`; returns the hash.
pub fn save_checkpoint(stem: &Path, params: &ParamList, meta: &CheckpointMeta) -> Result<String> {
    let (blob, manifest) = paths(stem);
    if let Some(dir) = blob.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| SamError::io(dir, e))?;
    }
    let tensors: HashMap<String, candle_core::Tensor> = params
        .iter()
        .map(|(n, v)| (n.clone(), v.as_tensor().clone()))
        .collect();
    candle_core::safetensors::save(&tensors, &blob)?;
    let bytes = fs::read(&blob).map_err(|e| SamError::io(&blob, e))?;
    let hash = hex::encode(Sha256::digest(&bytes));
    let text = format!(
        "arch = {}\nwidth = {}\nheight = {}\nimage_width = {}\nepochs = {}\nseed = {}\nsha256 = {hash}\n",
        meta.spec.arch, meta.spec.width, meta.size.height, meta.size.width, meta.epochs, meta.seed
    );
    fs::write(&manifest, text).map_err(|e| SamError::io(&manifest, e))?;
    Ok(hash)
}

pub fn read_checkpoint_meta(stem: &Path) -> Result<CheckpointMeta> {
    let (_, manifest) = paths(stem);
    let text = fs::read_to_string(&manifest).map_err(|e| SamError::io(&manifest, e))?;
    let mut kv = HashMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| SamError::data(format!("{}: bad line `{line}`", manifest.display())))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |k: &str| {
        kv.get(k)
            .cloned()
            .ok_or_else(|| SamError::data(format!("{}: missing `{k}`", manifest.display())))
    };
    let num = |k: &str| -> Result<u64> {
        get(k)?
            .parse()
            .map_err(|_| SamError::data(format!("{}: `{k}` is not an integer", manifest.display())))
    };
    Ok(CheckpointMeta {
        spec: BackboneSpec {
            arch: get("arch")?.parse()?,
            width: num("width")? as usize,
        },
        size: ImageSize::new(num("height")? as usize, num("image_width")? as usize),
        epochs: num("epochs")? as usize,
        seed: num("seed")?,
        sha256: get("sha256")?,
    })
}

/// Verifies the blob hash and copies every named tensor into `params`.
pub fn load_checkpoint(stem: &Path, params: &ParamList) -> Result<CheckpointMeta> {
    let meta = read_checkpoint_meta(stem)?;
    let (blob, _) = paths(stem);
    let bytes = fs::read(&blob).map_err(|e| SamError::io(&blob, e))?;
    let hash = hex::encode(Sha256::digest(&bytes));
    if hash != meta.sha256 {
        return Err(SamError::data(format!(
            "{}: content hash mismatch (manifest {}, file {hash})",
            blob.display(),
            meta.sha256
        )));
    }
    let tensors = candle_core::safetensors::load_buffer(&bytes, &DEVICE)?;
    for (name, var) in params {
        let t = tensors
            .get(name)
            .ok_or_else(|| SamError::data(format!("{}: no tensor `{name}`", blob.display())))?;
        if t.dims() != var.dims() {
            return Err(SamError::shape(format!(
                "`{name}`: checkpoint {:?}, model {:?}",
                t.dims(),
                var.dims()
            )));
        }
        var.set(t)?;
    }
    Ok(meta)
}
