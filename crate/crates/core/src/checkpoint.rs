//! Checkpoint directories: one SDTN file per parameter plus a JSON manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{Backbone, BackboneConfig};
use crate::nn::ParamStore;
use crate::sidecar::{Sidecar, SidecarConfig};
use crate::tensor::{tensor_from_bytes, tensor_to_bytes};
use crate::train::MultiTalker;
use crate::{Error, Result};

pub const MANIFEST: &str = "checkpoint.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneEntry {
    pub config: BackboneConfig,
    pub frozen: bool,
    /// Hash of the whole parameter store, as reported by `ParamStore::sha256`.
    pub sha256: String,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SidecarEntry {
    pub config: SidecarConfig,
    pub sha256: String,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub backbone: BackboneEntry,
    pub sidecar: Option<SidecarEntry>,
}

fn write_store(dir: &Path, sub: &str, store: &ParamStore) -> Result<Vec<ParamEntry>> {
    let root = dir.join(sub);
    fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    store
        .iter()
        .map(|(name, t)| {
            let file = format!("{sub}/{name}.sdtn");
            let bytes = tensor_to_bytes(t);
            let path = dir.join(&file);
            fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
            Ok(ParamEntry {
                name: name.clone(),
                file,
                shape: t.shape().to_vec(),
                sha256: hex::encode(Sha256::digest(&bytes)),
            })
        })
        .collect()
}

fn read_store(dir: &Path, entries: &[ParamEntry]) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for e in entries {
        let path = dir.join(&e.file);
        let bytes = fs::read(&path).map_err(|err| Error::io(&path, err))?;
        let digest = hex::encode(Sha256::digest(&bytes));
        if digest != e.sha256 {
            return Err(Error::Input(format!("{}: hash mismatch for `{}`", path.display(), e.name)));
        }
        let t = tensor_from_bytes(&bytes)?;
        if t.shape() != e.shape.as_slice() {
            return Err(Error::Input(format!(
                "{}: shape {:?} does not match manifest {:?}",
                path.display(),
                t.shape(),
                e.shape
            )));
        }
        store.insert(e.name.clone(), t);
    }
    Ok(store)
}

fn backbone_entry(dir: &Path, b: &Backbone) -> Result<BackboneEntry> {
    Ok(BackboneEntry {
        config: b.config.clone(),
        frozen: b.is_frozen(),
        sha256: b.params.sha256(),
        params: write_store(dir, "backbone", &b.params)?,
    })
}

fn write_manifest(dir: &Path, m: &Manifest) -> Result<PathBuf> {
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(m)?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn save_backbone(dir: &Path, backbone: &Backbone) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let m = Manifest {
        backbone: backbone_entry(dir, backbone)?,
        sidecar: None,
    };
    write_manifest(dir, &m)
}

pub fn save_model(dir: &Path, model: &MultiTalker) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let s = &model.sidecar;
    let m = Manifest {
        backbone: backbone_entry(dir, &model.backbone)?,
        sidecar: Some(SidecarEntry {
            config: s.config,
            sha256: s.params.sha256(),
            params: write_store(dir, "sidecar", &s.params)?,
        }),
    };
    write_manifest(dir, &m)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn load_backbone_entry(dir: &Path, e: &BackboneEntry) -> Result<Backbone> {
    let b = Backbone::from_params(e.config.clone(), read_store(dir, &e.params)?, e.frozen)?;
    if b.params.sha256() != e.sha256 {
        return Err(Error::Input(format!("{}: backbone hash mismatch", dir.display())));
    }
    Ok(b)
}

/// Loads the backbone of any checkpoint, ignoring a Sidecar if present.
pub fn load_backbone(dir: &Path) -> Result<Backbone> {
    load_backbone_entry(dir, &read_manifest(dir)?.backbone)
}

pub fn load_model(dir: &Path) -> Result<MultiTalker> {
    let m = read_manifest(dir)?;
    let Some(se) = &m.sidecar else {
        return Err(Error::Input(format!("{}: checkpoint has no sidecar", dir.display())));
    };
    let backbone = load_backbone_entry(dir, &m.backbone)?;
    let sidecar = Sidecar::from_params(se.config, read_store(dir, &se.params)?)?;
    if sidecar.params.sha256() != se.sha256 {
        return Err(Error::Input(format!("{}: sidecar hash mismatch", dir.display())));
    }
    MultiTalker::new(backbone, sidecar)
}
