use std::time::Instant;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::report::{BenchResult, Cell};
use crate::encoder::{CompressionConfig, ContextEncoder};
use crate::error::Result;
use crate::model::{tokenize, EmbeddingSequence, ModelWeights, RowOrigin};
use crate::synth::{kv_group, KeyPool};
use crate::trainer::{build_training_sequence, train_sequences, LossMask, TrainConfig, TrainingSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputConfig {
    pub n_docs: usize,
    pub chunks_per_doc: usize,
    pub steps: usize,
    pub train: TrainConfig,
    pub seed: u64,
}

impl ThroughputConfig {
    pub fn toy() -> Self {
        Self {
            n_docs: 8,
            chunks_per_doc: 8,
            steps: 8,
            train: TrainConfig::toy(),
            seed: 0,
        }
    }

    pub fn digest(&self) -> String {
        crate::io::json_digest(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThroughputResult {
    pub full_context_samples_per_sec: f64,
    pub lloco_samples_per_sec: f64,
    /// Mean decoder rows per training sequence.
    pub full_context_rows: f64,
    pub lloco_rows: f64,
    pub steps: usize,
}

impl ThroughputResult {
    pub fn ratio(&self) -> f64 {
        self.lloco_samples_per_sec / self.full_context_samples_per_sec
    }
}

fn mean_rows(seqs: &[TrainingSequence]) -> f64 {
    seqs.iter().map(|s| (s.prefix.len() + s.tokens.len()) as f64).sum::<f64>() / seqs.len().max(1) as f64
}

fn samples_per_sec(weights: &ModelWeights, seqs: &[TrainingSequence], cfg: &ThroughputConfig) -> Result<f64> {
    let started = Instant::now();
    train_sequences(weights, "throughput", seqs, &cfg.train, cfg.steps)?;
    let samples = cfg.steps * cfg.train.batch_size * cfg.train.grad_accum;
    Ok(samples as f64 / started.elapsed().as_secs_f64())
}

/// Finetuning throughput with the raw document in the prompt (its head,
/// truncated to fit the window) versus its summary rows, at equal steps.
pub fn throughput_bench(
    weights: &ModelWeights,
    slots: &Array2<f64>,
    comp: CompressionConfig,
    cfg: &ThroughputConfig,
) -> Result<ThroughputResult> {
    let encoder = ContextEncoder::new(weights, slots, comp)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut keys = KeyPool::new(&mut rng);
    let docs = kv_group(&mut rng, &mut keys, "throughput", cfg.n_docs, cfg.chunks_per_doc, 1, comp.chunk_length);
    let d = weights.config.d_model;
    let window = weights.config.window;
    let mut full = Vec::new();
    let mut lloco = Vec::new();
    for doc in &docs {
        let tokens = tokenize(&doc.text);
        let summaries = encoder.compress_document(&doc.doc_id, &tokens)?;
        for ex in doc.qa_examples() {
            let compressed = build_training_sequence(&summaries, &ex.question, &ex.answer, d, window)?;
            let room = window - compressed.tokens.len();
            let context = weights.embed_tokens(&tokens[..tokens.len().min(room)])?;
            full.push(TrainingSequence {
                prefix: EmbeddingSequence::new(context, RowOrigin::Token),
                tokens: compressed.tokens.clone(),
                mask: LossMask(compressed.mask.0.clone()),
            });
            lloco.push(compressed);
        }
    }
    Ok(ThroughputResult {
        full_context_samples_per_sec: samples_per_sec(weights, &full, cfg)?,
        lloco_samples_per_sec: samples_per_sec(weights, &lloco, cfg)?,
        full_context_rows: mean_rows(&full),
        lloco_rows: mean_rows(&lloco),
        steps: cfg.steps,
    })
}

pub fn throughput_table(r: &ThroughputResult, config_digest: &str, seed: u64, wall_clock_secs: f64) -> BenchResult {
    BenchResult {
        name: "throughput".into(),
        config_digest: config_digest.into(),
        seed,
        wall_clock_secs,
        columns: ["mode", "samples_per_sec", "mean_rows", "steps"].map(String::from).to_vec(),
        rows: vec![
            vec![
                Cell::from("full_context_ft"),
                Cell::from(r.full_context_samples_per_sec),
                Cell::from(r.full_context_rows),
                Cell::from(r.steps),
            ],
            vec![
                Cell::from("lloco_ft"),
                Cell::from(r.lloco_samples_per_sec),
                Cell::from(r.lloco_rows),
                Cell::from(r.steps),
            ],
        ],
        summary: [("ratio".to_string(), r.ratio())].into(),
    }
}
