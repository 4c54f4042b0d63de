//! Neutral weight format: `manifest.json` listing every tensor's name, shape
//! and byte offset, plus one raw little-endian float32 blob. Full toy models
//! and MLP-only exports of real checkpoints share the format.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::params::{mlp_fc_name, mlp_proj_name};
use super::{ModelConfig, NeuronId, NeuronWeights, ToyTransformer};
use crate::error::{Error, Result};

pub const FORMAT: &str = "dkn-neutral-v1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "weights.bin";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightManifest {
    pub format: String,
    pub model: String,
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Present for full toy models; absent for MLP-only exports.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<ModelConfig>,
    pub tensors: Vec<ManifestTensor>,
    #[serde(default = "default_blob")]
    pub blob: String,
    pub blob_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_checksum: Option<String>,
}

fn default_blob() -> String {
    BLOB_FILE.to_string()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes every model tensor, narrowed to float32.
pub fn save_model(model: &ToyTransformer, dir: &Path, name: &str) -> Result<WeightManifest> {
    fs::create_dir_all(dir)?;
    let cfg = *model.config();
    let mut blob = Vec::with_capacity(model.params().len() * 4);
    let mut tensors = Vec::new();
    for e in model.layout().entries() {
        tensors.push(ManifestTensor {
            name: e.name.clone(),
            shape: e.shape.clone(),
            dtype: "float32".into(),
            offset: blob.len() as u64,
        });
        for v in &model.params()[e.offset..e.offset + e.len()] {
            blob.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let manifest = WeightManifest {
        format: FORMAT.into(),
        model: name.into(),
        n_layers: cfg.n_layers,
        d_model: cfg.d_model,
        d_ff: cfg.d_ff,
        config: Some(cfg),
        tensors,
        blob: BLOB_FILE.into(),
        blob_sha256: sha256_hex(&blob),
        source_checksum: None,
    };
    fs::write(dir.join(BLOB_FILE), &blob)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Reads and integrity-checks a weight directory.
pub fn read_weights(dir: &Path) -> Result<(WeightManifest, BTreeMap<String, (Vec<usize>, Vec<f64>)>)> {
    let manifest: WeightManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    if manifest.format != FORMAT {
        return Err(Error::WeightFormat(format!("unknown format tag {:?}", manifest.format)));
    }
    let blob_path = dir.join(&manifest.blob);
    let blob = fs::read(&blob_path)?;
    let found = sha256_hex(&blob);
    if found != manifest.blob_sha256 {
        return Err(Error::Checksum { path: blob_path, expected: manifest.blob_sha256.clone(), found });
    }
    let mut out = BTreeMap::new();
    for t in &manifest.tensors {
        if t.dtype != "float32" {
            return Err(Error::WeightFormat(format!("{}: unsupported dtype {}", t.name, t.dtype)));
        }
        let len: usize = t.shape.iter().product();
        let start = t.offset as usize;
        let end = start + len * 4;
        if end > blob.len() {
            return Err(Error::WeightFormat(format!("{}: extends past end of blob", t.name)));
        }
        let data =
            blob[start..end].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        if out.insert(t.name.clone(), (t.shape.clone(), data)).is_some() {
            return Err(Error::WeightFormat(format!("duplicate tensor {}", t.name)));
        }
    }
    Ok((manifest, out))
}

pub fn load_model(dir: &Path) -> Result<ToyTransformer> {
    let (manifest, mut tensors) = read_weights(dir)?;
    let cfg = manifest
        .config
        .ok_or_else(|| Error::WeightFormat("manifest carries no model config (MLP-only export?)".into()))?;
    cfg.validate()?;
    let layout = super::params::ParamLayout::new(&cfg);
    let mut params = vec![0.0; layout.total()];
    for e in layout.entries() {
        let (shape, data) =
            tensors.remove(&e.name).ok_or_else(|| Error::WeightFormat(format!("missing tensor {}", e.name)))?;
        if shape != e.shape {
            return Err(Error::WeightFormat(format!(
                "{}: shape {:?} does not match config ({:?})",
                e.name, shape, e.shape
            )));
        }
        params[e.offset..e.offset + e.len()].copy_from_slice(&data);
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::WeightFormat(format!("unexpected tensor {extra}")));
    }
    ToyTransformer::from_params(cfg, params)
}

/// MLP matrices only, as emitted by the checkpoint exporter.
#[derive(Debug, Clone)]
pub struct MlpWeights {
    pub model: String,
    pub d_model: usize,
    pub d_ff: usize,
    /// Per layer `d_model x d_ff`.
    pub w_fc: Vec<Vec<f64>>,
    /// Per layer `d_ff x d_model`.
    pub w_proj: Vec<Vec<f64>>,
}

impl MlpWeights {
    pub fn load(dir: &Path) -> Result<Self> {
        let (m, mut tensors) = read_weights(dir)?;
        let mut w_fc = Vec::with_capacity(m.n_layers);
        let mut w_proj = Vec::with_capacity(m.n_layers);
        for l in 0..m.n_layers {
            for (name, expect, sink) in [
                (mlp_fc_name(l), vec![m.d_model, m.d_ff], &mut w_fc),
                (mlp_proj_name(l), vec![m.d_ff, m.d_model], &mut w_proj),
            ] {
                let (shape, data) =
                    tensors.remove(&name).ok_or_else(|| Error::WeightFormat(format!("missing tensor {name}")))?;
                if shape != expect {
                    return Err(Error::WeightFormat(format!("{name}: shape {shape:?}, expected {expect:?}")));
                }
                sink.push(data);
            }
        }
        Ok(MlpWeights { model: m.model, d_model: m.d_model, d_ff: m.d_ff, w_fc, w_proj })
    }

    pub fn from_model(model: &ToyTransformer) -> Self {
        let cfg = model.config();
        let lay = model.layout();
        MlpWeights {
            model: "toy".into(),
            d_model: cfg.d_model,
            d_ff: cfg.d_ff,
            w_fc: lay.layers.iter().map(|l| model.s(l.w_fc).to_vec()).collect(),
            w_proj: lay.layers.iter().map(|l| model.s(l.w_proj).to_vec()).collect(),
        }
    }
}

impl NeuronWeights for MlpWeights {
    fn n_layers(&self) -> usize {
        self.w_fc.len()
    }

    fn d_ff(&self) -> usize {
        self.d_ff
    }

    fn d_model(&self) -> usize {
        self.d_model
    }

    fn w_fc_column(&self, n: NeuronId) -> Vec<f64> {
        let fc = &self.w_fc[n.layer];
        (0..self.d_model).map(|i| fc[i * self.d_ff + n.pos]).collect()
    }

    fn w_proj_row(&self, n: NeuronId) -> Vec<f64> {
        self.w_proj[n.layer][n.pos * self.d_model..(n.pos + 1) * self.d_model].to_vec()
    }
}
