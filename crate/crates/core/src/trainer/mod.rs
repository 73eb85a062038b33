//! Per-group LoRA finetuning over compressed contexts, plus pretraining of
//! the toy base model and its summary slots.

mod finetune;
mod gradcheck;
mod optim;
mod pretrain;
mod schedule;
mod sequence;

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::SummaryEmbeddings;
use crate::error::{Error, Result};

pub use finetune::{sample_combined, train_combined, train_group, train_sequences, TrainOutcome, COMBINED_GROUP};
pub use gradcheck::{adaptor_grad_check, grad_check, tiny_config};
pub use optim::AdamW;
pub use pretrain::{
    evaluate_pretraining, init_slots, pretrain_base, pretrain_cached, synthetic_docs, PretrainConfig, PretrainEval, PretrainOutcome,
};
pub use schedule::{lr_at, warmup_steps};
pub use sequence::{
    build_training_sequence, prompt_tokens, LossMask, TrainingSequence, ANSWER_DELIMITER, ANSWER_END,
    QUESTION_PREFIX,
};

/// One instruction pair tied to a document whose summaries are precomputed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub group_id: String,
    pub doc_id: String,
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    /// Examples per micro-batch.
    pub batch_size: usize,
    /// Micro-batches per optimizer step.
    pub grad_accum: usize,
    pub epochs: usize,
    pub rank: usize,
    pub alpha: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Hard cap on optimizer steps, mostly for tests.
    pub max_steps: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-5,
            weight_decay: 0.0,
            warmup_ratio: 0.04,
            batch_size: 2,
            grad_accum: 4,
            epochs: 3,
            rank: crate::lora::DEFAULT_RANK,
            alpha: crate::lora::DEFAULT_ALPHA,
            grad_clip: Some(1.0),
            max_steps: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Desk-scale profile: a learning rate sized for the toy model.
    pub fn toy() -> Self {
        Self {
            lr: 1e-2,
            epochs: 30,
            ..Self::default()
        }
    }

    pub fn steps_per_epoch(&self, n_examples: usize) -> usize {
        n_examples.div_ceil((self.batch_size * self.grad_accum).max(1))
    }

    pub fn total_steps(&self, n_examples: usize) -> usize {
        let full = self.steps_per_epoch(n_examples) * self.epochs;
        self.max_steps.map_or(full, |m| m.min(full))
    }

    pub fn digest(&self) -> String {
        crate::io::json_digest(self)
    }
}

/// Where precomputed summaries come from during training.
pub trait SummarySource {
    fn summaries(&self, doc_id: &str) -> Result<Vec<SummaryEmbeddings>>;
}

impl SummarySource for HashMap<String, Vec<SummaryEmbeddings>> {
    fn summaries(&self, doc_id: &str) -> Result<Vec<SummaryEmbeddings>> {
        self.get(doc_id)
            .cloned()
            .ok_or_else(|| Error::MissingArchive(doc_id.to_string()))
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_clock_secs: f64,
}

pub fn write_training_log(path: &Path, log: &[StepLog]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for row in log {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_examples(path: &Path) -> Result<Vec<TrainingExample>> {
    let f = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::corrupt(path, format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

pub fn write_examples(path: &Path, examples: &[TrainingExample]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    for e in examples {
        serde_json::to_writer(&mut f, e)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}
