//! Group-keyed adaptor registry persisted as `registry.json` next to the
//! adaptor files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::{load_adaptor, save_adaptor, LoraAdaptor};
use crate::error::{Error, Result};
use crate::io::{atomic_write, file_stem};

const MANIFEST: &str = "registry.json";
const REGISTRY_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptorRecord {
    pub adaptor_id: String,
    pub group_id: String,
    /// File name relative to the registry directory.
    pub file: String,
    pub version: u32,
    pub created_unix_secs: u64,
    pub train_config_digest: String,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    active: BTreeMap<String, AdaptorRecord>,
    retired: Vec<AdaptorRecord>,
}

#[derive(Debug)]
pub struct AdaptorRegistry {
    root: PathBuf,
    manifest: Manifest,
}


impl AdaptorRegistry {
    /// Opens the registry under `root`, starting empty when no manifest exists.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let path = root.join(MANIFEST);
        let manifest = if path.exists() {
            let m: Manifest = serde_json::from_slice(&fs::read(&path)?)
                .map_err(|e| Error::corrupt(&path, e.to_string()))?;
            if m.format_version != REGISTRY_VERSION {
                return Err(Error::VersionMismatch {
                    path,
                    expected: REGISTRY_VERSION,
                    found: m.format_version,
                });
            }
            m
        } else {
            Manifest {
                format_version: REGISTRY_VERSION,
                ..Manifest::default()
            }
        };
        Ok(Self { root, manifest })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Stores `adaptor` as the active adaptor of its group. A previously
    /// active file is kept under a `.v{version}` suffix.
    pub fn register(&mut self, adaptor: &LoraAdaptor, train_config_digest: &str) -> Result<AdaptorRecord> {
        fs::create_dir_all(&self.root)?;
        let stem = file_stem(&adaptor.group_id);
        let file = format!("{stem}.lora");
        let mut version = 1;
        if let Some(mut old) = self.manifest.active.remove(&adaptor.group_id) {
            let retired = format!("{stem}.v{}.lora", old.version);
            fs::rename(self.root.join(&old.file), self.root.join(&retired))?;
            version = old.version + 1;
            old.file = retired;
            self.manifest.retired.push(old);
        }
        save_adaptor(adaptor, &self.root.join(&file))?;
        let record = AdaptorRecord {
            adaptor_id: adaptor.adaptor_id.clone(),
            group_id: adaptor.group_id.clone(),
            file,
            version,
            created_unix_secs: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            train_config_digest: train_config_digest.to_string(),
        };
        self.manifest.active.insert(adaptor.group_id.clone(), record.clone());
        self.persist()?;
        Ok(record)
    }

    pub fn lookup(&self, group_id: &str) -> Result<&AdaptorRecord> {
        self.manifest
            .active
            .get(group_id)
            .ok_or_else(|| Error::AdaptorNotFound(group_id.to_string()))
    }

    /// Loads the active adaptor file of `group_id`.
    pub fn load(&self, group_id: &str) -> Result<LoraAdaptor> {
        let record = self.lookup(group_id)?;
        load_adaptor(&self.root.join(&record.file))
    }

    /// Active records ordered by group id.
    pub fn records(&self) -> impl Iterator<Item = &AdaptorRecord> {
        self.manifest.active.values()
    }

    pub fn retired(&self) -> &[AdaptorRecord] {
        &self.manifest.retired
    }

    fn persist(&self) -> Result<()> {
        atomic_write(&self.root.join(MANIFEST), &serde_json::to_vec_pretty(&self.manifest)?)
    }
}
