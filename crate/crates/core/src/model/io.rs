//! Weight container: a JSON manifest naming each tensor's shape and byte
//! offset inside one raw little-endian `f32` blob, plus a JSON config
//! document holding [`ModelConfig`].

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::weights::ModelWeights;
use super::Model;
use crate::error::{Error, Result};
use crate::tensor::{Precision, Tensor};

pub const MANIFEST_FORMAT: &str = "specstream-weights";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    /// Config file name, relative to the manifest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<String>,
    pub tensors: Vec<TensorEntry>,
}

/// Serializes weights into a manifest and blob, in canonical order.
pub fn encode_weights(weights: &ModelWeights, blob_name: &str) -> (Manifest, Vec<u8>) {
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    weights.visit(&mut |name, t| {
        tensors.push(TensorEntry { name, shape: t.shape().to_vec(), offset: blob.len() });
        for &x in t.data() {
            blob.extend_from_slice(&(x as f32).to_le_bytes());
        }
    });
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        blob: blob_name.into(),
        config: None,
        tensors,
    };
    (manifest, blob)
}

/// Decodes and validates weights from an in-memory manifest and blob.
pub fn decode_weights(
    config: &ModelConfig,
    manifest: &Manifest,
    blob: &[u8],
    precision: Precision,
) -> Result<ModelWeights> {
    if manifest.format != MANIFEST_FORMAT {
        return Err(Error::load("<manifest>", format!("bad format tag {:?}", manifest.format)));
    }
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::load("<manifest>", format!("unsupported version {}", manifest.version)));
    }
    let mut named = BTreeMap::new();
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        let end = e
            .offset
            .checked_add(n * 4)
            .filter(|&end| end <= blob.len())
            .ok_or_else(|| Error::load(&e.name, "extends past the end of the blob"))?;
        let data =
            blob[e.offset..end].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        if named.insert(e.name.clone(), Tensor::new(e.shape.clone(), data, precision)?).is_some() {
            return Err(Error::load(&e.name, "listed twice"));
        }
    }
    ModelWeights::from_named(config, named)
}

/// File locations of a saved model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelFiles {
    pub config: PathBuf,
    pub manifest: PathBuf,
    pub blob: PathBuf,
}

impl ModelFiles {
    /// `<dir>/<stem>.config.json`, `<dir>/<stem>.manifest.json`, `<dir>/<stem>.bin`.
    pub fn in_dir(dir: impl AsRef<Path>, stem: &str) -> Self {
        let d = dir.as_ref();
        ModelFiles {
            config: d.join(format!("{stem}.config.json")),
            manifest: d.join(format!("{stem}.manifest.json")),
            blob: d.join(format!("{stem}.bin")),
        }
    }
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn save_model(model: &Model, files: &ModelFiles) -> Result<()> {
    let (mut manifest, blob) = encode_weights(&model.weights, &file_name(&files.blob));
    manifest.config = Some(file_name(&files.config));
    fs::write(&files.config, serde_json::to_vec_pretty(&model.config)?)?;
    fs::write(&files.manifest, serde_json::to_vec_pretty(&manifest)?)?;
    fs::write(&files.blob, blob)?;
    Ok(())
}

pub fn read_config(path: impl AsRef<Path>) -> Result<ModelConfig> {
    let cfg: ModelConfig = serde_json::from_slice(&fs::read(path)?)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Loads a model from its manifest; the config path defaults to the one the
/// manifest names.
pub fn load_model(manifest_path: impl AsRef<Path>, config_path: Option<&Path>, precision: Precision) -> Result<Model> {
    let manifest_path = manifest_path.as_ref();
    let manifest: Manifest = serde_json::from_slice(&fs::read(manifest_path)?)?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let config_path = match config_path {
        Some(p) => p.to_path_buf(),
        None => dir.join(
            manifest
                .config
                .as_deref()
                .ok_or_else(|| Error::load("<manifest>", "no config path given and none recorded in the manifest"))?,
        ),
    };
    let config = read_config(&config_path)?;
    let blob = fs::read(dir.join(&manifest.blob))?;
    let weights = decode_weights(&config, &manifest, &blob, precision)?;
    Model::new(config, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::StreamMode;

    fn micro() -> (ModelConfig, Model) {
        let cfg = ModelConfig::micro();
        let m = Model::init(cfg.clone(), 5, Precision::F32).unwrap();
        (cfg, m)
    }

    #[test]
    fn decode_round_trip() {
        let (cfg, m) = micro();
        let (manifest, blob) = encode_weights(&m.weights, "w.bin");
        let w = decode_weights(&cfg, &manifest, &blob, Precision::F32).unwrap();
        assert_eq!(w, m.weights);
    }

    #[test]
    fn missing_stream_embedding_is_named() {
        let (cfg, m) = micro();
        let (mut manifest, blob) = encode_weights(&m.weights, "w.bin");
        manifest.tensors.retain(|t| t.name != "stream_embedding[2]");
        let err = decode_weights(&cfg, &manifest, &blob, Precision::F32).unwrap_err();
        assert!(err.to_string().contains("stream_embedding[2]"), "{err}");
    }

    #[test]
    fn rotation_config_rejects_stream_embeddings() {
        let (cfg, m) = micro();
        let (manifest, blob) = encode_weights(&m.weights, "w.bin");
        let rot = ModelConfig { stream_mode: StreamMode::Rotation, ..cfg };
        let err = decode_weights(&rot, &manifest, &blob, Precision::F32).unwrap_err();
        assert!(matches!(err, Error::Load { .. }));
        assert!(err.to_string().contains("stream_embedding"));
    }

    #[test]
    fn shape_mismatch_and_bad_magic() {
        let (cfg, m) = micro();
        let (mut manifest, blob) = encode_weights(&m.weights, "w.bin");
        let mut bad = manifest.clone();
        bad.format = "nope".into();
        assert!(decode_weights(&cfg, &bad, &blob, Precision::F32).is_err());
        bad = manifest.clone();
        bad.version = 99;
        assert!(decode_weights(&cfg, &bad, &blob, Precision::F32).is_err());
        let e = manifest.tensors.iter_mut().find(|t| t.name == "lm_head").unwrap();
        e.shape = vec![11, 8];
        let err = decode_weights(&cfg, &manifest, &blob, Precision::F32).unwrap_err();
        assert!(err.to_string().contains("lm_head"));
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let (cfg, m) = micro();
        let (manifest, blob) = encode_weights(&m.weights, "w.bin");
        let err = decode_weights(&cfg, &manifest, &blob[..blob.len() - 4], Precision::F32).unwrap_err();
        assert!(err.to_string().contains("prune_adapter.up"));
    }

    #[test]
    fn files_round_trip() {
        let (_, m) = micro();
        let dir = tempfile::tempdir().unwrap();
        let files = ModelFiles::in_dir(dir.path(), "micro");
        save_model(&m, &files).unwrap();
        let back = load_model(&files.manifest, None, Precision::F32).unwrap();
        assert_eq!(back.weights, m.weights);
        assert_eq!(back.config, m.config);
    }
}
