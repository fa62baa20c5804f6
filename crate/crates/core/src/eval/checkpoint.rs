//! On-disk checkpoints: a JSON manifest next to one little-endian f32 blob.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use latent_autograd::params::component_of;
use latent_autograd::tensor::Tensor;
use latent_autograd::ParamStore;
use serde::{Deserialize, Serialize};

use crate::config::{Config, Mode};
use crate::error::{ensure, Error, Result};
use crate::model::{Model, COMPONENTS};

pub const FORMAT: &str = "latent-act-checkpoint/1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "weights.bin";

/// Training stage that produced a checkpoint, in pipeline order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageTag {
    Stage1,
    Projector1,
    Stage3,
    Bc,
    Sft,
    Rl,
}

impl std::fmt::Display for StageTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = serde_json::to_string(self).expect("tag serializes");
        f.write_str(s.trim_matches('"'))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ComponentEntry {
    pub name: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Manifest {
    pub format: String,
    pub stage_tag: StageTag,
    /// Action space the checkpoint is meant to act in.
    pub mode: Mode,
    pub seed: u64,
    pub blob: String,
    pub blob_bytes: usize,
    pub components: Vec<ComponentEntry>,
    pub config_snapshot: Config,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub model: Model<f32>,
}

impl Checkpoint {
    pub fn config(&self) -> &Config {
        &self.manifest.config_snapshot
    }

    pub fn require_stage(&self, min: StageTag) -> Result<()> {
        ensure(self.manifest.stage_tag >= min, || {
            format!("checkpoint stage `{}` precedes required `{min}`", self.manifest.stage_tag)
        })
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save(dir: &Path, model: &Model<f32>, cfg: &Config, stage: StageTag, mode: Mode, seed: u64) -> Result<Manifest> {
    ensure(cfg.backbone == model.cfg, || "config snapshot does not match the model".into())?;
    fs::create_dir_all(dir)?;
    let mut blob = Vec::with_capacity(model.store.num_scalars() * 4);
    let mut components: Vec<ComponentEntry> = Vec::new();
    for (_, name, t) in model.store.iter() {
        let comp = component_of(name);
        if components.last().map(|c| c.name.as_str()) != Some(comp) {
            ensure(components.iter().all(|c| c.name != comp), || format!("component `{comp}` is not contiguous"))?;
            components.push(ComponentEntry { name: comp.to_string(), tensors: Vec::new() });
        }
        let entry = TensorEntry {
            name: name.to_string(),
            shape: [t.rows(), t.cols()],
            dtype: "f32".into(),
            offset: blob.len(),
        };
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        components.last_mut().expect("pushed").tensors.push(entry);
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        stage_tag: stage,
        mode,
        seed,
        blob: BLOB_FILE.into(),
        blob_bytes: blob.len(),
        components,
        config_snapshot: cfg.clone(),
    };
    write_atomic(&dir.join(BLOB_FILE), &blob)?;
    write_atomic(&dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let m: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    ensure(m.format == FORMAT, || format!("unsupported checkpoint format `{}`", m.format))?;
    Ok(m)
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let manifest = load_manifest(dir)?;
    let blob = fs::read(dir.join(&manifest.blob))?;
    ensure(blob.len() == manifest.blob_bytes, || {
        format!("blob has {} bytes, manifest says {}", blob.len(), manifest.blob_bytes)
    })?;
    for c in COMPONENTS {
        ensure(manifest.components.iter().any(|e| e.name == c), || format!("checkpoint is missing component `{c}`"))?;
    }
    let mut tensors = BTreeMap::new();
    for comp in &manifest.components {
        for e in &comp.tensors {
            ensure(e.dtype == "f32", || format!("tensor `{}` has dtype `{}`", e.name, e.dtype))?;
            ensure(component_of(&e.name) == comp.name, || format!("tensor `{}` listed under `{}`", e.name, comp.name))?;
            let n = e.shape[0] * e.shape[1];
            let end = e.offset.checked_add(n * 4).filter(|&end| end <= blob.len() && e.offset % 4 == 0);
            let end = end.ok_or_else(|| Error::validation(format!("tensor `{}` lies outside the blob", e.name)))?;
            let data = blob[e.offset..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let t = Tensor::from_vec(e.shape[0], e.shape[1], data)?;
            ensure(tensors.insert(e.name.clone(), t).is_none(), || format!("duplicate tensor `{}`", e.name))?;
        }
    }
    let cfg = &manifest.config_snapshot.backbone;
    let layout = Model::<f32>::new(cfg, 0)?;
    let mut store = ParamStore::new();
    for (_, name, _) in layout.store.iter() {
        let t = tensors
            .remove(name)
            .ok_or_else(|| Error::validation(format!("checkpoint is missing tensor `{name}`")))?;
        store.add(name, t)?;
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::validation(format!("checkpoint has unknown tensor `{extra}`")));
    }
    let model = Model::from_store(cfg, store)?;
    Ok(Checkpoint { manifest, model })
}
