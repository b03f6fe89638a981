//! Checkpoint directory format shared by every trained component:
//!
//! ```text
//! <dir>/config.json    component configuration (free-form JSON object)
//! <dir>/manifest.json  {"vocab_hash", "total_bytes", "tensors": [{name, shape, offset, len}]}
//! <dir>/params.bin     concatenated little-endian float32 tensors
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into params.bin.
    pub offset: usize,
    /// Element count.
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub vocab_hash: Option<String>,
    pub total_bytes: usize,
    pub tensors: Vec<TensorEntry>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

pub fn save<C: Serialize>(
    dir: &Path,
    config: &C,
    tensors: &BTreeMap<String, Tensor>,
    vocab_hash: Option<&str>,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let values = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.dims().to_vec(),
            offset: blob.len(),
            len: values.len(),
        });
        for v in values {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        vocab_hash: vocab_hash.map(str::to_string),
        total_bytes: blob.len(),
        tensors: entries,
    };
    std::fs::write(dir.join(PARAMS_FILE), &blob)?;
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    write_json(&dir.join(CONFIG_FILE), config)?;
    Ok(())
}

pub struct Loaded<C> {
    pub config: C,
    pub manifest: Manifest,
    pub tensors: BTreeMap<String, Tensor>,
}

pub fn load<C: DeserializeOwned>(dir: &Path, dtype: DType) -> Result<Loaded<C>> {
    let params_path = dir.join(PARAMS_FILE);
    for f in [CONFIG_FILE, MANIFEST_FILE, PARAMS_FILE] {
        if !dir.join(f).exists() {
            return Err(Error::MissingArtifact(dir.join(f)));
        }
    }
    let corrupt =
        |e: &dyn std::fmt::Display| Error::CorruptCheckpoint(format!("{}: {e}", dir.display()));
    let config: C =
        serde_json::from_slice(&std::fs::read(dir.join(CONFIG_FILE))?).map_err(|e| corrupt(&e))?;
    let manifest: Manifest = serde_json::from_slice(&std::fs::read(dir.join(MANIFEST_FILE))?)
        .map_err(|e| corrupt(&e))?;
    let blob = std::fs::read(&params_path)?;
    if blob.len() != manifest.total_bytes {
        return Err(corrupt(&format!(
            "params.bin has {} bytes, manifest declares {}",
            blob.len(),
            manifest.total_bytes
        )));
    }
    let mut tensors = BTreeMap::new();
    for e in &manifest.tensors {
        let end = e.offset + 4 * e.len;
        if end > blob.len() || e.shape.iter().product::<usize>() != e.len {
            return Err(corrupt(&format!("bad extent for tensor {}", e.name)));
        }
        let values: Vec<f32> = blob[e.offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::from_vec(values, e.shape.as_slice(), &Device::Cpu)?.to_dtype(dtype)?;
        tensors.insert(e.name.clone(), t);
    }
    Ok(Loaded {
        config,
        manifest,
        tensors,
    })
}

/// Refuse artifacts produced against a different vocabulary.
pub fn check_vocab_hash(expected: &str, found: Option<&str>) -> Result<()> {
    match found {
        Some(f) if f == expected => Ok(()),
        other => Err(Error::VocabHashMismatch {
            expected: expected.to_string(),
            found: other.unwrap_or("<none>").to_string(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        m.insert(
            "a".into(),
            Tensor::new(&[[1f32, 2.], [3., 4.]], &Device::Cpu).unwrap(),
        );
        m.insert("b".into(), Tensor::new(&[0.5f32], &Device::Cpu).unwrap());
        m
    }

    #[test]
    fn round_trip_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        save(
            dir.path(),
            &serde_json::json!({"k": 1}),
            &sample(),
            Some("abc"),
        )
        .unwrap();
        let loaded: Loaded<serde_json::Value> = load(dir.path(), DType::F32).unwrap();
        assert_eq!(loaded.config["k"], 1);
        assert_eq!(loaded.manifest.tensors[1].offset, 16);
        assert_eq!(
            loaded.tensors["a"].to_vec2::<f32>().unwrap(),
            vec![vec![1., 2.], vec![3., 4.]]
        );
        let bytes = std::fs::read(dir.path().join(PARAMS_FILE)).unwrap();
        assert_eq!(&bytes[0..4], &1f32.to_le_bytes());
    }

    #[test]
    fn truncated_blob_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &serde_json::json!({}), &sample(), None).unwrap();
        let p = dir.path().join(PARAMS_FILE);
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            load::<serde_json::Value>(dir.path(), DType::F32),
            Err(Error::CorruptCheckpoint(_))
        ));
    }

    #[test]
    fn vocab_hash_check() {
        assert!(check_vocab_hash("x", Some("x")).is_ok());
        assert!(matches!(
            check_vocab_hash("x", Some("y")),
            Err(Error::VocabHashMismatch { .. })
        ));
        assert!(check_vocab_hash("x", None).is_err());
    }
}
