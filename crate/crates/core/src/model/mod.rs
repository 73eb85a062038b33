//! Small pre-norm decoder-only transformer.
//!
//! The model accepts an arbitrary prefix of raw embedding rows (summary
//! embeddings) ahead of the token embeddings, applies rotary positions to every
//! row, and exposes low-rank adaptor injection on the query and value
//! projections.

mod checkpoint;
pub(crate) mod forward;
mod generate;
pub mod tokenizer;
mod weights;

#[cfg(test)]
mod tests;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub(crate) use forward::{cross_entropy, ForwardCache, LoraGrads, ModelGrads};
pub(crate) use weights::normal_matrix as normal_init;
pub use forward::DecoderOutput;
pub use generate::{DecodeState, GenerateMode};
pub use tokenizer::{detokenize, tokenize};
pub use weights::{LayerWeights, ModelWeights};

/// Token id. The tokenizer is byte-level, so ids live in `[0, 256)`.
pub type TokenId = u32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Context window W: maximum number of positions in one forward pass.
    pub window: usize,
    pub rope_base: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            window: 256,
            rope_base: 10_000.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_model == 0 || self.n_heads == 0 || self.window == 0 {
            return Err(Error::InvalidConfig("sizes must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(Error::InvalidConfig("rotary encoding needs an even head dimension".into()));
        }
        Ok(())
    }

    /// Checks that one compression pass (a chunk plus its summary slots) fits.
    pub fn validate_for_compression(&self, chunk_length: usize, summary_count: usize) -> Result<()> {
        self.validate()?;
        if self.window < chunk_length + summary_count {
            return Err(Error::InvalidConfig(format!(
                "window {} cannot hold a chunk of {} plus {} summary slots",
                self.window, chunk_length, summary_count
            )));
        }
        Ok(())
    }

    pub(crate) fn check_len(&self, len: usize) -> Result<()> {
        if len > self.window {
            return Err(Error::LengthOverflow {
                len,
                window: self.window,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowOrigin {
    Summary,
    Token,
}

/// Ordered embedding rows fed to (or read from) the decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    rows: Array2<f64>,
    origins: Vec<RowOrigin>,
}

impl EmbeddingSequence {
    pub fn empty(d_model: usize) -> Self {
        Self {
            rows: Array2::zeros((0, d_model)),
            origins: Vec::new(),
        }
    }

    pub fn new(rows: Array2<f64>, origin: RowOrigin) -> Self {
        let origins = vec![origin; rows.nrows()];
        Self { rows, origins }
    }

    pub fn summaries(rows: Array2<f64>) -> Self {
        Self::new(rows, RowOrigin::Summary)
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.rows.row(i)
    }

    pub fn origins(&self) -> &[RowOrigin] {
        &self.origins
    }

    pub fn into_rows(self) -> Array2<f64> {
        self.rows
    }

    /// Appends rows of `other`. Dimensions must agree.
    pub fn extend(&mut self, other: &EmbeddingSequence) -> Result<()> {
        if other.dim() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "cannot append rows of width {} to width {}",
                other.dim(),
                self.dim()
            )));
        }
        if other.is_empty() {
            return Ok(());
        }
        self.rows = ndarray::concatenate(ndarray::Axis(0), &[self.rows.view(), other.rows.view()])
            .expect("widths checked");
        self.origins.extend_from_slice(&other.origins);
        Ok(())
    }

    /// Keeps only the last `n` rows.
    pub fn keep_last(&mut self, n: usize) {
        let len = self.len();
        if len > n {
            self.rows = self.rows.slice(ndarray::s![len - n.., ..]).to_owned();
            self.origins.drain(..len - n);
        }
    }
}
