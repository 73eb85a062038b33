//! Passage index with exact cosine search, linked to per-document summary
//! archives.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::encoder::{chunk_document, concat_summaries, load_archive, save_archive, CompressionConfig, SummaryEmbeddings};
use crate::error::{Error, Result};
use crate::io::{atomic_write, decode_f32, encode_f32, file_stem, round_slice_to_f32};
use crate::model::{detokenize, tokenize, EmbeddingSequence, ModelWeights};
use crate::trainer::SummarySource;

pub const PASSAGE_LENGTH: usize = 512;
pub const STORE_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_TOP_K: usize = 5;

/// Consecutive 512-token (or `passage_length`) retrieval spans.
pub fn chunk_passages(n_tokens: usize, passage_length: usize) -> Vec<Range<usize>> {
    chunk_document(n_tokens, passage_length)
}

/// Sentence embedder standing in for a dense retriever: the L2-normalized
/// mean of the base model's token embeddings.
#[derive(Debug, Clone)]
pub struct Embedder {
    table: Array2<f64>,
    digest: String,
}

impl Embedder {
    pub fn new(weights: &ModelWeights) -> Self {
        let table = weights.embed.clone();
        let digest = crate::io::json_digest(&table.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        Self { table, digest }
    }

    pub fn dim(&self) -> usize {
        self.table.ncols()
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    /// Unit vector for `text`, on the f32 grid so stored vectors round-trip
    /// exactly. Empty text maps to the fixed vector `(1, ..., 1) / sqrt(d)`.
    pub fn embed(&self, text: &str) -> Array1<f64> {
        let d = self.dim();
        let tokens = tokenize(text);
        let mut v = Array1::zeros(d);
        for &t in &tokens {
            v += &self.table.row(t as usize);
        }
        let norm = v.dot(&v).sqrt();
        if tokens.is_empty() || norm == 0.0 || !norm.is_finite() {
            v.fill(1.0 / (d as f64).sqrt());
        } else {
            v /= norm;
        }
        round_slice_to_f32(v.as_slice_mut().expect("contiguous"));
        v
    }
}

pub fn embed_passage(weights: &ModelWeights, text: &str) -> Array1<f64> {
    Embedder::new(weights).embed(text)
}

pub fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    a.dot(b) / (na * nb)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassageRecord {
    pub passage_id: u64,
    pub doc_id: String,
    pub group_id: String,
    pub span: Range<usize>,
    pub text: String,
    /// Stored in `embeddings.bin`, not in the record file.
    #[serde(skip)]
    pub sentence_embedding: Vec<f64>,
    pub covering_chunk_indices: Vec<usize>,
    pub adaptor_id: Option<String>,
}

/// Chunks of length `chunk_length` whose spans intersect `span`.
pub fn covering_chunks(span: &Range<usize>, chunk_length: usize, n_tokens: usize) -> Vec<usize> {
    chunk_document(n_tokens, chunk_length)
        .iter()
        .enumerate()
        .filter(|(_, c)| c.start < span.end && span.start < c.end)
        .map(|(i, _)| i)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocEntry {
    pub group_id: String,
    pub config: CompressionConfig,
    pub n_tokens: usize,
    pub archive: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub format_version: u32,
    pub passage_count: usize,
    pub dim: usize,
    pub embedder_digest: String,
    pub documents: BTreeMap<String, DocEntry>,
}

/// A scored hit from [`VectorStore::top_k`].
#[derive(Debug, Clone, PartialEq)]
pub struct Hit<'a> {
    pub record: &'a PassageRecord,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct VectorStore {
    dim: usize,
    embedder_digest: String,
    records: Vec<PassageRecord>,
    documents: BTreeMap<String, DocEntry>,
    summaries: BTreeMap<String, Vec<SummaryEmbeddings>>,
}

impl VectorStore {
    pub fn new(dim: usize, embedder_digest: impl Into<String>) -> Self {
        Self {
            dim,
            embedder_digest: embedder_digest.into(),
            records: Vec::new(),
            documents: BTreeMap::new(),
            summaries: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[PassageRecord] {
        &self.records
    }

    pub fn record(&self, passage_id: u64) -> Option<&PassageRecord> {
        self.records.iter().find(|r| r.passage_id == passage_id)
    }

    pub fn documents(&self) -> &BTreeMap<String, DocEntry> {
        &self.documents
    }

    pub fn embedder_digest(&self) -> &str {
        &self.embedder_digest
    }

    fn next_id(&self) -> u64 {
        self.records.iter().map(|r| r.passage_id + 1).max().unwrap_or(0)
    }

    pub fn add(&mut self, record: PassageRecord) -> Result<()> {
        if record.sentence_embedding.len() != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "embedding of length {} in a store of dimension {}",
                record.sentence_embedding.len(),
                self.dim
            )));
        }
        let norm = record.sentence_embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidConfig(format!("passage embedding has norm {norm}")));
        }
        if self.records.iter().any(|r| r.passage_id == record.passage_id) {
            return Err(Error::InvalidConfig(format!("duplicate passage id {}", record.passage_id)));
        }
        self.records.push(record);
        Ok(())
    }

    /// Indexes one compressed document: its summaries plus one record per
    /// passage, linked to the chunks each passage overlaps. Re-adding a
    /// document replaces it.
    #[allow(clippy::too_many_arguments)]
    pub fn add_document(
        &mut self,
        embedder: &Embedder,
        doc_id: &str,
        group_id: &str,
        text: &str,
        config: CompressionConfig,
        summaries: Vec<SummaryEmbeddings>,
        adaptor_id: Option<String>,
    ) -> Result<Vec<u64>> {
        let tokens = tokenize(text);
        if summaries.len() != config.chunk_count(tokens.len()) {
            return Err(Error::ShapeMismatch(format!(
                "{} summaries for a document of {} chunks",
                summaries.len(),
                config.chunk_count(tokens.len())
            )));
        }
        let spans = chunk_document(tokens.len(), config.chunk_length);
        for (i, (s, span)) in summaries.iter().zip(&spans).enumerate() {
            if s.chunk_index != i || s.source_doc != doc_id || s.source_token_range != *span {
                return Err(Error::ShapeMismatch(format!(
                    "summary {i} is chunk {} of {:?} over {:?}, expected chunk {i} of {doc_id:?} over {span:?}",
                    s.chunk_index, s.source_doc, s.source_token_range
                )));
            }
        }
        self.remove_document(doc_id);
        let mut ids = Vec::new();
        for span in chunk_passages(tokens.len(), PASSAGE_LENGTH) {
            let text = detokenize(&tokens[span.clone()]);
            let record = PassageRecord {
                passage_id: self.next_id(),
                doc_id: doc_id.to_string(),
                group_id: group_id.to_string(),
                covering_chunk_indices: covering_chunks(&span, config.chunk_length, tokens.len()),
                sentence_embedding: embedder.embed(&text).to_vec(),
                span,
                text,
                adaptor_id: adaptor_id.clone(),
            };
            ids.push(record.passage_id);
            self.add(record)?;
        }
        let archive = format!("archives/{:05}-{}.llsa", self.documents.len(), file_stem(doc_id));
        self.documents.insert(
            doc_id.to_string(),
            DocEntry {
                group_id: group_id.to_string(),
                config,
                n_tokens: tokens.len(),
                archive,
            },
        );
        self.summaries.insert(doc_id.to_string(), summaries);
        Ok(ids)
    }

    fn remove_document(&mut self, doc_id: &str) {
        self.records.retain(|r| r.doc_id != doc_id);
        self.documents.remove(doc_id);
        self.summaries.remove(doc_id);
    }

    /// Sets the adaptor id on every passage of `group_id`.
    pub fn link_adaptor(&mut self, group_id: &str, adaptor_id: &str) {
        for r in self.records.iter_mut().filter(|r| r.group_id == group_id) {
            r.adaptor_id = Some(adaptor_id.to_string());
        }
    }

    /// Exhaustive cosine search: descending score, ties by ascending id.
    pub fn top_k(&self, query: &Array1<f64>, k: usize) -> Result<Vec<Hit<'_>>> {
        self.top_k_where(query, k, |_| true)
    }

    /// [`VectorStore::top_k`] restricted to records accepted by `keep`.
    pub fn top_k_where(&self, query: &Array1<f64>, k: usize, keep: impl Fn(&PassageRecord) -> bool) -> Result<Vec<Hit<'_>>> {
        if self.records.is_empty() {
            return Err(Error::EmptyStore);
        }
        if query.len() != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "query of length {} in a store of dimension {}",
                query.len(),
                self.dim
            )));
        }
        let qn = query.dot(query).sqrt();
        let mut hits: Vec<Hit<'_>> = self
            .records
            .iter()
            .filter(|r| keep(r))
            .map(|r| {
                let dot: f64 = r.sentence_embedding.iter().zip(query.iter()).map(|(a, b)| a * b).sum();
                Hit { record: r, score: dot / qn }
            })
            .collect();
        hits.sort_by(|a, b| rank_order(a.score, a.record.passage_id, b.score, b.record.passage_id));
        hits.truncate(k);
        Ok(hits)
    }

    /// Summary rows of every chunk covered by `records`, deduplicated and
    /// ordered by `(doc_id, chunk_index)`.
    pub fn gather_summaries<'r>(&self, records: impl IntoIterator<Item = &'r PassageRecord>) -> Result<EmbeddingSequence> {
        let wanted: BTreeSet<(&str, usize)> = records
            .into_iter()
            .flat_map(|r| r.covering_chunk_indices.iter().map(move |&c| (r.doc_id.as_str(), c)))
            .collect();
        let mut picked = Vec::with_capacity(wanted.len());
        for (doc, chunk) in wanted {
            let sums = self
                .summaries
                .get(doc)
                .ok_or_else(|| Error::MissingArchive(doc.to_string()))?;
            let s = sums
                .get(chunk)
                .ok_or_else(|| Error::MissingArchive(format!("{doc} chunk {chunk}")))?;
            picked.push(s);
        }
        Ok(concat_summaries(self.dim, picked))
    }

    pub fn doc_summaries(&self, doc_id: &str) -> Result<&[SummaryEmbeddings]> {
        self.summaries
            .get(doc_id)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::MissingArchive(doc_id.to_string()))
    }

    /// Full text of a document, reassembled from its passages.
    pub fn doc_text(&self, doc_id: &str) -> Result<String> {
        if !self.documents.contains_key(doc_id) {
            return Err(Error::UnknownDocument(doc_id.to_string()));
        }
        let mut parts: Vec<&PassageRecord> = self.records.iter().filter(|r| r.doc_id == doc_id).collect();
        parts.sort_by_key(|r| r.span.start);
        Ok(parts.iter().map(|r| r.text.as_str()).collect())
    }

    pub fn persist(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("archives"))?;
        let manifest = StoreManifest {
            format_version: STORE_FORMAT_VERSION,
            passage_count: self.records.len(),
            dim: self.dim,
            embedder_digest: self.embedder_digest.clone(),
            documents: self.documents.clone(),
        };
        for (doc_id, entry) in &self.documents {
            save_archive(&dir.join(&entry.archive), doc_id, &entry.config, self.dim, &self.summaries[doc_id])?;
        }
        let mut lines = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut lines, r)?;
            lines.write_all(b"\n")?;
        }
        atomic_write(&dir.join("records.jsonl"), &lines)?;
        let mut bytes = Vec::with_capacity(self.records.len() * self.dim * 4);
        encode_f32(self.records.iter().flat_map(|r| r.sentence_embedding.iter().copied()), &mut bytes);
        atomic_write(&dir.join("embeddings.bin"), &bytes)?;
        // The manifest goes last so a torn write leaves no loadable store.
        atomic_write(&dir.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        let manifest: StoreManifest = serde_json::from_slice(&fs::read(&manifest_path)?)
            .map_err(|e| Error::corrupt(&manifest_path, e.to_string()))?;
        if manifest.format_version != STORE_FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                path: manifest_path,
                expected: STORE_FORMAT_VERSION,
                found: manifest.format_version,
            });
        }
        let records_path = dir.join("records.jsonl");
        let mut records: Vec<PassageRecord> = Vec::new();
        for (i, line) in BufReader::new(fs::File::open(&records_path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(
                serde_json::from_str(&line).map_err(|e| Error::corrupt(&records_path, format!("line {}: {e}", i + 1)))?,
            );
        }
        if records.len() != manifest.passage_count {
            return Err(Error::corrupt(
                &records_path,
                format!("{} records, manifest says {}", records.len(), manifest.passage_count),
            ));
        }
        let emb_path = dir.join("embeddings.bin");
        let bytes = fs::read(&emb_path)?;
        if bytes.len() != records.len() * manifest.dim * 4 {
            return Err(Error::corrupt(
                &emb_path,
                format!("{} bytes for {} embeddings of dimension {}", bytes.len(), records.len(), manifest.dim),
            ));
        }
        let floats = decode_f32(&bytes);
        for (r, e) in records.iter_mut().zip(floats.chunks_exact(manifest.dim.max(1))) {
            r.sentence_embedding = e.to_vec();
        }
        let mut summaries = BTreeMap::new();
        for (doc_id, entry) in &manifest.documents {
            let path: PathBuf = dir.join(&entry.archive);
            let (cfg, sums) = load_archive(&path)?;
            if cfg != entry.config || sums.len() != cfg.chunk_count(entry.n_tokens) {
                return Err(Error::corrupt(&path, "archive disagrees with the store manifest"));
            }
            summaries.insert(doc_id.clone(), sums);
        }
        Ok(Self {
            dim: manifest.dim,
            embedder_digest: manifest.embedder_digest,
            records,
            documents: manifest.documents,
            summaries,
        })
    }
}

/// Descending score, then ascending passage id.
pub fn rank_order(score_a: f64, id_a: u64, score_b: f64, id_b: u64) -> Ordering {
    score_b.total_cmp(&score_a).then(id_a.cmp(&id_b))
}

impl SummarySource for VectorStore {
    fn summaries(&self, doc_id: &str) -> Result<Vec<SummaryEmbeddings>> {
        self.doc_summaries(doc_id).map(|s| s.to_vec())
    }
}
