//! Stack checkpoints: one flat little-endian f32 payload plus a JSON
//! manifest describing where each named tensor lives inside it.
//!
//! `save(stack, base)` writes `base.bin` and `base.json`; `load(base)`
//! rebuilds the stack. Values are stored as f32 regardless of the stack's
//! compute type, so an f64 stack round-trips with f32 precision.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, LayerStack};
use crate::rng::RngStream;
use crate::tensor::{Scalar, Tensor};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    shape: Vec<usize>,
    /// Byte offset of the tensor's first scalar inside the .bin payload.
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: FusionConfig,
    tensors: BTreeMap<String, TensorEntry>,
}

fn paths(base: &Path) -> (PathBuf, PathBuf) {
    (base.with_extension("bin"), base.with_extension("json"))
}

pub fn save<E: Scalar>(stack: &LayerStack<E>, base: &Path) -> Result<()> {
    let (bin_path, json_path) = paths(base);
    let mut tensors = BTreeMap::new();
    let mut payload: Vec<u8> = Vec::new();
    for (name, _, t) in stack.params() {
        tensors.insert(
            name.to_string(),
            TensorEntry { shape: t.shape().to_vec(), offset: payload.len() as u64 },
        );
        for &v in t.data() {
            payload.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        config: stack.cfg().clone(),
        tensors,
    };
    if let Some(dir) = bin_path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut f = fs::File::create(&bin_path)?;
    f.write_all(&payload)?;
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&json_path, json)?;
    Ok(())
}

pub fn load<E: Scalar>(base: &Path) -> Result<LayerStack<E>> {
    let (bin_path, json_path) = paths(base);
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&json_path)?)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::config(format!(
            "checkpoint version {} unsupported (expected {})",
            manifest.version, MANIFEST_VERSION
        )));
    }
    let mut payload = Vec::new();
    fs::File::open(&bin_path)?.read_to_end(&mut payload)?;

    // Start from a freshly initialized stack of the saved configuration so
    // the expected tensor set and shapes are known, then overwrite all of it.
    let mut rng = RngStream::new(0);
    let mut stack = LayerStack::<E>::init(manifest.config.clone(), &mut rng)?;
    let expected: Vec<String> = stack.params().map(|(n, _, _)| n.to_string()).collect();
    for name in &expected {
        let entry = manifest.tensors.get(name).ok_or_else(|| {
            Error::config(format!("checkpoint manifest is missing tensor {name:?}"))
        })?;
        let numel: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + numel * 4;
        if end > payload.len() {
            return Err(Error::config(format!(
                "checkpoint payload truncated: {name:?} wants bytes {start}..{end} of {}",
                payload.len()
            )));
        }
        let data: Vec<E> = payload[start..end]
            .chunks_exact(4)
            .map(|b| E::from_f64(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        stack.set_param(name, Tensor::new(entry.shape.clone(), data)?)?;
    }
    if manifest.tensors.len() != expected.len() {
        return Err(Error::config(format!(
            "checkpoint has {} tensors, configuration expects {}",
            manifest.tensors.len(),
            expected.len()
        )));
    }
    Ok(stack)
}
