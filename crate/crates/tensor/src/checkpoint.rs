//! Parameter checkpoints.
//!
//! A checkpoint is a directory holding two files:
//!
//! * `manifest.txt` in the [`kv`](crate::kv) grammar. It carries
//!   `format = tgckpt`, `version = 1`, any caller metadata, and one
//!   `param.<name> = d0,d1,...` entry per parameter in store order.
//! * `params.bin`, the parameters' values concatenated in manifest order,
//!   each value an IEEE-754 binary64 in little-endian byte order. No header,
//!   no padding; the file size is `8 * sum(prod(shape))`.

use std::path::Path;

use crate::error::{Result, TensorError};
use crate::kv::KvFile;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.txt";
pub const BLOB: &str = "params.bin";

pub fn save(dir: &Path, store: &ParamStore, meta: &KvFile) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut kv = KvFile::new();
    kv.set("format", "tgckpt");
    kv.set("version", 1);
    for (k, v) in meta.entries() {
        if k.starts_with("param.") || k == "format" || k == "version" {
            return Err(TensorError::Format(format!("reserved metadata key {k}")));
        }
        kv.set(k, v);
    }
    let mut blob = Vec::with_capacity(store.numel() * 8);
    for id in store.ids() {
        let t = store.get(id);
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        kv.set(format!("param.{}", store.name(id)), dims.join(","));
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    kv.write(&dir.join(MANIFEST))?;
    std::fs::write(dir.join(BLOB), blob)?;
    Ok(())
}

/// Read a checkpoint back as (metadata without `param.*` keys, parameters).
pub fn load(dir: &Path) -> Result<(KvFile, ParamStore)> {
    let kv = KvFile::read(&dir.join(MANIFEST))?;
    if kv.get("format") != Some("tgckpt") || kv.get("version") != Some("1") {
        return Err(TensorError::Format("not a version-1 tgckpt manifest".into()));
    }
    let blob = std::fs::read(dir.join(BLOB))?;
    let mut meta = KvFile::new();
    let mut store = ParamStore::new();
    let mut offset = 0usize;
    for (k, v) in kv.entries() {
        let Some(name) = k.strip_prefix("param.") else {
            if k != "format" && k != "version" {
                meta.set(k, v);
            }
            continue;
        };
        let shape: Vec<usize> = v
            .split(',')
            .map(|d| d.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| TensorError::Format(format!("bad shape for {name}: {v}")))?;
        let n: usize = shape.iter().product();
        let end = offset + 8 * n;
        if end > blob.len() {
            return Err(TensorError::Format(format!("params.bin truncated at {name}")));
        }
        let data = blob[offset..end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        offset = end;
        store.insert(name, Tensor::new(shape, data)?);
    }
    if offset != blob.len() {
        return Err(TensorError::Format("params.bin has trailing bytes".into()));
    }
    Ok((meta, store))
}

/// Overwrite every parameter of `target` with the same-named, same-shaped
/// entry of `source`.
pub fn copy_into(target: &mut ParamStore, source: &ParamStore) -> Result<()> {
    if target.len() != source.len() {
        return Err(TensorError::Format(format!(
            "checkpoint holds {} parameters, model expects {}",
            source.len(),
            target.len()
        )));
    }
    for id in target.ids().collect::<Vec<_>>() {
        let src = source.get(source.id(target.name(id))?);
        if src.shape() != target.get(id).shape() {
            return Err(TensorError::Format(format!(
                "shape mismatch for {}: {:?} vs {:?}",
                target.name(id),
                src.shape(),
                target.get(id).shape()
            )));
        }
        *target.get_mut(id) = src.clone();
    }
    Ok(())
}
