use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{GroupPolicy, ServeContext};
use crate::encoder::{CompressionConfig, ContextEncoder};
use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::lora::{AdaptorRecord, AdaptorRegistry, LoraAdaptor};
use crate::model::{load_checkpoint, save_checkpoint, tokenize, Checkpoint, ModelWeights};
use crate::store::{Embedder, VectorStore};

const MODEL_FILE: &str = "model.json";
const COMPRESSION_FILE: &str = "compression.json";
const STORE_DIR: &str = "store";
const ADAPTOR_DIR: &str = "adaptors";

/// An artifact directory: base checkpoint with slots, compression profile,
/// passage store with summary archives, and the adaptor registry.
pub struct Artifacts {
    pub dir: PathBuf,
    pub weights: ModelWeights,
    pub slots: Array2<f64>,
    pub compression: CompressionConfig,
    pub store: VectorStore,
    pub registry: AdaptorRegistry,
    pub adaptors: HashMap<String, LoraAdaptor>,
    pub embedder: Embedder,
}

impl Artifacts {
    /// Writes a fresh artifact directory around a trained base model.
    pub fn create(dir: &Path, weights: ModelWeights, slots: Array2<f64>, compression: CompressionConfig) -> Result<Self> {
        ContextEncoder::new(&weights, &slots, compression)?;
        fs::create_dir_all(dir)?;
        save_checkpoint(
            &dir.join(MODEL_FILE),
            &Checkpoint {
                weights: weights.clone(),
                summary_slots: Some(slots.clone()),
            },
        )?;
        atomic_write(&dir.join(COMPRESSION_FILE), &serde_json::to_vec_pretty(&compression)?)?;
        let embedder = Embedder::new(&weights);
        Ok(Self {
            dir: dir.to_path_buf(),
            store: VectorStore::new(weights.config.d_model, embedder.digest()),
            registry: AdaptorRegistry::open(dir.join(ADAPTOR_DIR))?,
            adaptors: HashMap::new(),
            embedder,
            weights,
            slots,
            compression,
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let model_path = dir.join(MODEL_FILE);
        if !model_path.exists() {
            return Err(Error::InvalidConfig(format!(
                "no model checkpoint at {}; run `lloco pretrain --out {}` first",
                model_path.display(),
                dir.display()
            )));
        }
        let ckpt = load_checkpoint(&model_path)?;
        let slots = ckpt
            .summary_slots
            .ok_or_else(|| Error::corrupt(&model_path, "checkpoint has no summary slots"))?;
        let comp_path = dir.join(COMPRESSION_FILE);
        let compression: CompressionConfig =
            serde_json::from_slice(&fs::read(&comp_path)?).map_err(|e| Error::corrupt(&comp_path, e.to_string()))?;
        let weights = ckpt.weights;
        ContextEncoder::new(&weights, &slots, compression)?;
        let embedder = Embedder::new(&weights);
        let store_dir = dir.join(STORE_DIR);
        let store = if store_dir.join("manifest.json").exists() {
            VectorStore::load(&store_dir)?
        } else {
            VectorStore::new(weights.config.d_model, embedder.digest())
        };
        let registry = AdaptorRegistry::open(dir.join(ADAPTOR_DIR))?;
        let mut adaptors = HashMap::new();
        for record in registry.records() {
            let a = registry.load(&record.group_id)?;
            a.check_compatible(&weights.config)?;
            adaptors.insert(record.group_id.clone(), a);
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            weights,
            slots,
            compression,
            store,
            registry,
            adaptors,
            embedder,
        })
    }

    pub fn encoder(&self) -> ContextEncoder<'_> {
        ContextEncoder::new(&self.weights, &self.slots, self.compression).expect("validated at load")
    }

    pub fn context(&self, policy: GroupPolicy) -> ServeContext<'_> {
        ServeContext {
            weights: &self.weights,
            store: &self.store,
            adaptors: &self.adaptors,
            embedder: &self.embedder,
            policy,
        }
    }

    pub fn save_store(&self) -> Result<()> {
        self.store.persist(&self.dir.join(STORE_DIR))
    }

    /// Registers `adaptor` as its group's active adaptor and links the
    /// group's passages to it.
    pub fn register_adaptor(&mut self, adaptor: LoraAdaptor, train_config_digest: &str) -> Result<AdaptorRecord> {
        let record = self.registry.register(&adaptor, train_config_digest)?;
        self.store.link_adaptor(&adaptor.group_id, &adaptor.adaptor_id);
        self.save_store()?;
        self.adaptors.insert(adaptor.group_id.clone(), adaptor);
        Ok(record)
    }

    /// Compresses and indexes one document in memory.
    pub fn index_document(&mut self, doc_id: &str, group_id: &str, text: &str) -> Result<usize> {
        let summaries = self.encoder().compress_document(doc_id, &tokenize(text))?;
        let adaptor_id = self.adaptors.get(group_id).map(|a| a.adaptor_id.clone());
        let ids = self
            .store
            .add_document(&self.embedder, doc_id, group_id, text, self.compression, summaries, adaptor_id)?;
        Ok(ids.len())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedDoc {
    pub doc_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub documents: usize,
    pub passages: usize,
    pub tokens: usize,
    pub summary_rows: usize,
    pub skipped: Vec<SkippedDoc>,
}

pub const DEFAULT_GROUP: &str = "default";

/// Rebuilds the artifact store from every `*.txt` file in `corpus`, in file
/// name order. Documents missing from `groups` land in group `default`.
/// The store is rebuilt from scratch, so reruns reproduce identical files.
pub fn preprocess(corpus: &Path, groups: &BTreeMap<String, String>, artifacts: &mut Artifacts) -> Result<PreprocessReport> {
    let mut files: Vec<PathBuf> = fs::read_dir(corpus)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    files.sort();
    artifacts.store = VectorStore::new(artifacts.weights.config.d_model, artifacts.embedder.digest());
    let mut report = PreprocessReport::default();
    for path in files {
        let doc_id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let text = match fs::read(&path).map(String::from_utf8) {
            Ok(Ok(t)) => t,
            Ok(Err(e)) => {
                report.skipped.push(SkippedDoc {
                    doc_id,
                    reason: format!("not UTF-8: {e}"),
                });
                continue;
            }
            Err(e) => {
                report.skipped.push(SkippedDoc {
                    doc_id,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let group = groups.get(&doc_id).map(String::as_str).unwrap_or(DEFAULT_GROUP);
        match artifacts.index_document(&doc_id, group, &text) {
            Ok(n) => {
                report.documents += 1;
                report.passages += n;
                report.tokens += text.len();
                report.summary_rows += artifacts.compression.summary_rows(text.len());
            }
            Err(e @ Error::LengthOverflow { .. }) => report.skipped.push(SkippedDoc {
                doc_id,
                reason: e.to_string(),
            }),
            Err(e) => return Err(e),
        }
    }
    artifacts.save_store()?;
    Ok(report)
}
