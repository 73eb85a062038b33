//! Recursive summary-token compression.
//!
//! A document is cut into fixed-length chunks. Each chunk is run through the
//! decoder as `[prior summaries; chunk tokens; k summary slots]` and the final
//! hidden states at the slot positions become that chunk's summary rows.

use std::ops::Range;
use std::path::Path;

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_framed, round_slice_to_f32, write_framed};
use crate::model::{EmbeddingSequence, ModelWeights, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompressionConfig {
    /// Tokens per chunk (L).
    pub chunk_length: usize,
    /// Summary rows emitted per chunk (k).
    pub summary_count: usize,
    /// Cap on prior summary rows a compression pass is conditioned on.
    pub max_summary_rows: usize,
}

impl CompressionConfig {
    /// 1536-token chunks, 50 summary rows each, on a 4096-token window.
    pub fn full_scale() -> Self {
        Self {
            chunk_length: 1536,
            summary_count: 50,
            max_summary_rows: 4096 / 2,
        }
    }

    /// Desk-scale profile with the same 30:1 chunk-to-summary ratio, sized
    /// for a 256-position window.
    pub fn toy() -> Self {
        Self {
            chunk_length: 120,
            summary_count: 4,
            max_summary_rows: 256 / 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.chunk_length == 0 || self.summary_count == 0 {
            return Err(Error::InvalidConfig("chunk length and summary count must be positive".into()));
        }
        if self.summary_count >= self.chunk_length {
            return Err(Error::InvalidConfig(format!(
                "summary count {} must be below chunk length {}",
                self.summary_count, self.chunk_length
            )));
        }
        Ok(())
    }

    pub fn ratio(&self) -> f64 {
        compression_ratio(self.chunk_length, self.summary_count)
    }

    pub fn chunk_count(&self, n_tokens: usize) -> usize {
        n_tokens.div_ceil(self.chunk_length)
    }

    /// Summary rows produced for a document of `n_tokens`.
    pub fn summary_rows(&self, n_tokens: usize) -> usize {
        self.chunk_count(n_tokens) * self.summary_count
    }
}

/// Summary rows for one chunk of one document.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryEmbeddings {
    pub chunk_index: usize,
    pub rows: Array2<f64>,
    pub source_doc: String,
    pub source_token_range: Range<usize>,
}

/// Consecutive non-overlapping spans of `chunk_length`; the last may be short.
pub fn chunk_document(n_tokens: usize, chunk_length: usize) -> Vec<Range<usize>> {
    assert!(chunk_length > 0, "chunk length must be positive");
    (0..n_tokens)
        .step_by(chunk_length)
        .map(|start| start..(start + chunk_length).min(n_tokens))
        .collect()
}

/// Original tokens per summary row (τ = L / k).
pub fn compression_ratio(chunk_length: usize, summary_count: usize) -> f64 {
    assert!(summary_count > 0, "summary count must be positive");
    chunk_length as f64 / summary_count as f64
}

/// Short label for a ratio: whole multiples from 20 up (`30.72` → `30x`),
/// one truncated decimal below (`1.6x`, `12.8x`).
pub fn ratio_label(ratio: f64) -> String {
    if ratio >= 20.0 {
        format!("{}x", ratio.floor())
    } else {
        format!("{}x", (ratio * 10.0 + 1e-9).floor() / 10.0)
    }
}

/// Longest document whose summaries fit the window: `floor(W / k) · L`.
pub fn effective_window(window: usize, chunk_length: usize, summary_count: usize) -> usize {
    assert!(summary_count > 0 && summary_count <= window, "need 0 < k <= W");
    (window / summary_count) * chunk_length
}

/// Compressor bound to a model and its learned slot embeddings.
#[derive(Clone, Copy)]
pub struct ContextEncoder<'a> {
    weights: &'a ModelWeights,
    slots: &'a Array2<f64>,
    config: CompressionConfig,
}

impl<'a> ContextEncoder<'a> {
    pub fn new(weights: &'a ModelWeights, slots: &'a Array2<f64>, config: CompressionConfig) -> Result<Self> {
        config.validate()?;
        weights
            .config
            .validate_for_compression(config.chunk_length, config.summary_count)?;
        if slots.dim() != (config.summary_count, weights.config.d_model) {
            return Err(Error::ShapeMismatch(format!(
                "slot embeddings are {:?}, expected ({}, {})",
                slots.dim(),
                config.summary_count,
                weights.config.d_model
            )));
        }
        Ok(Self { weights, slots, config })
    }

    pub fn config(&self) -> &CompressionConfig {
        &self.config
    }

    /// How many of the most recent prior rows a pass over `chunk_len` tokens
    /// can condition on.
    pub fn prior_budget(&self, chunk_len: usize) -> usize {
        let room = self
            .weights
            .config
            .window
            .saturating_sub(chunk_len + self.config.summary_count);
        room.min(self.config.max_summary_rows)
    }

    /// Compresses one chunk conditioned on `prior` summary rows. Rows are
    /// rounded to f32 so stored archives reproduce them exactly.
    pub fn compress_chunk(&self, chunk: &[TokenId], prior: &EmbeddingSequence) -> Result<EmbeddingSequence> {
        let k = self.config.summary_count;
        let window = self.weights.config.window;
        if chunk.len() + k > window {
            return Err(Error::LengthOverflow {
                len: chunk.len() + k,
                window,
            });
        }
        let mut prior = prior.clone();
        prior.keep_last(self.prior_budget(chunk.len()));
        let input = self.pass_input(chunk, prior.rows())?;
        let out = self.weights.forward_hidden(&input)?;
        let start = input.nrows() - k;
        let mut rows = out.slice(s![start.., ..]).to_owned();
        round_slice_to_f32(rows.as_slice_mut().expect("standard layout"));
        Ok(EmbeddingSequence::summaries(rows))
    }

    pub(crate) fn pass_input(&self, chunk: &[TokenId], prior: &Array2<f64>) -> Result<Array2<f64>> {
        let tok = self.weights.embed_tokens(chunk)?;
        Ok(ndarray::concatenate(Axis(0), &[prior.view(), tok.view(), self.slots.view()]).expect("same width"))
    }

    /// Compresses every chunk in order, each conditioned on the summaries of
    /// the chunks before it.
    pub fn compress_document(&self, doc_id: &str, tokens: &[TokenId]) -> Result<Vec<SummaryEmbeddings>> {
        let mut prior = EmbeddingSequence::empty(self.weights.config.d_model);
        let mut out = Vec::new();
        for (chunk_index, span) in chunk_document(tokens.len(), self.config.chunk_length)
            .into_iter()
            .enumerate()
        {
            let summary = self.compress_chunk(&tokens[span.clone()], &prior)?;
            prior.extend(&summary)?;
            prior.keep_last(self.config.max_summary_rows);
            out.push(SummaryEmbeddings {
                chunk_index,
                rows: summary.into_rows(),
                source_doc: doc_id.to_string(),
                source_token_range: span,
            });
        }
        Ok(out)
    }
}

/// Concatenates summary rows in the given order.
pub fn concat_summaries<'s>(d_model: usize, summaries: impl IntoIterator<Item = &'s SummaryEmbeddings>) -> EmbeddingSequence {
    let views: Vec<_> = summaries.into_iter().map(|s| s.rows.view()).collect();
    if views.is_empty() {
        return EmbeddingSequence::empty(d_model);
    }
    EmbeddingSequence::summaries(ndarray::concatenate(Axis(0), &views).expect("same width"))
}

pub const ARCHIVE_FORMAT_VERSION: u32 = 1;
const ARCHIVE_MAGIC: &[u8; 4] = b"LLSA";

#[derive(Debug, Serialize, Deserialize)]
struct ArchiveHeader {
    format_version: u32,
    doc_id: String,
    config: CompressionConfig,
    d_model: usize,
    chunk_count: usize,
    /// `[start, end)` token span per chunk.
    spans: Vec<[usize; 2]>,
}

/// Writes one document's summaries: JSON header then f32 rows, chunk-major.
pub fn save_archive(
    path: &Path,
    doc_id: &str,
    config: &CompressionConfig,
    d_model: usize,
    summaries: &[SummaryEmbeddings],
) -> Result<()> {
    for (i, s) in summaries.iter().enumerate() {
        if s.chunk_index != i || s.rows.dim() != (config.summary_count, d_model) {
            return Err(Error::ShapeMismatch(format!("summary entry {i} is malformed")));
        }
    }
    let header = ArchiveHeader {
        format_version: ARCHIVE_FORMAT_VERSION,
        doc_id: doc_id.to_string(),
        config: *config,
        d_model,
        chunk_count: summaries.len(),
        spans: summaries
            .iter()
            .map(|s| [s.source_token_range.start, s.source_token_range.end])
            .collect(),
    };
    write_framed(
        path,
        ARCHIVE_MAGIC,
        &header,
        summaries.iter().flat_map(|s| s.rows.iter().copied()),
    )
}

/// Reads an archive written by [`save_archive`].
pub fn load_archive(path: &Path) -> Result<(CompressionConfig, Vec<SummaryEmbeddings>)> {
    let (h, floats) = read_framed::<ArchiveHeader>(path, ARCHIVE_MAGIC, |h| {
        if h.format_version != ARCHIVE_FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                path: path.to_path_buf(),
                expected: ARCHIVE_FORMAT_VERSION,
                found: h.format_version,
            });
        }
        if h.spans.len() != h.chunk_count {
            return Err(Error::corrupt(path, "span list disagrees with chunk count"));
        }
        Ok(h.chunk_count * h.config.summary_count * h.d_model)
    })?;
    let per_chunk = h.config.summary_count * h.d_model;
    let summaries = h
        .spans
        .iter()
        .enumerate()
        .map(|(i, span)| SummaryEmbeddings {
            chunk_index: i,
            rows: Array2::from_shape_vec(
                (h.config.summary_count, h.d_model),
                floats[i * per_chunk..(i + 1) * per_chunk].to_vec(),
            )
            .expect("sized by header"),
            source_doc: h.doc_id.clone(),
            source_token_range: span[0]..span[1],
        })
        .collect();
    Ok((h.config, summaries))
}
