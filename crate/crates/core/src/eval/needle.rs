use std::collections::HashMap;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::contains_answer;
use super::report::{BenchResult, Cell};
use crate::encoder::{CompressionConfig, ContextEncoder};
use crate::error::{Error, Result};
use crate::lora::LoraAdaptor;
use crate::model::{tokenize, ModelWeights};
use crate::serving::{serve_query, GroupPolicy, ServeContext, ServeMode, ServeRequest};
use crate::store::{Embedder, VectorStore};
use crate::synth::{filler, insert_needle, Needle, EVAL_CITIES, TRAIN_CITIES};
use crate::trainer::{train_group, TrainConfig, TrainOutcome, TrainingExample};

pub const NEEDLE_GROUP: &str = "needle";
const HAYSTACK_DOC: &str = "haystack";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum NeedleVariant {
    /// The same designer fact in every cell.
    Fixed,
    /// A held-out city with a random magic word in every cell.
    #[value(alias = "city")]
    RandomCity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeedleGridConfig {
    /// Total document lengths in tokens, needle included.
    pub lengths: Vec<usize>,
    /// Insertion depths in `[0, 1]`.
    pub depths: Vec<f64>,
    pub variant: NeedleVariant,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl NeedleGridConfig {
    /// 8 lengths × 10 depths, all inside the toy window once compressed.
    pub fn toy() -> Self {
        Self {
            lengths: vec![240, 480, 960, 1440, 1920, 2880, 3840, 4800],
            depths: (0..10).map(|i| i as f64 / 9.0).collect(),
            variant: NeedleVariant::Fixed,
            max_new_tokens: 16,
            seed: 0,
        }
    }

    pub fn digest(&self) -> String {
        crate::io::json_digest(self)
    }
}

/// A filler haystack of `length - needle` bytes with the needle inserted at
/// `depth`. The haystack depends only on `(seed, length)`.
pub fn needle_document(needle: &Needle, length: usize, depth: f64, seed: u64) -> Result<String> {
    if length < needle.text.len() {
        return Err(Error::InvalidConfig(format!(
            "length {length} is shorter than the needle ({} bytes)",
            needle.text.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (length as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let hay = filler(&mut rng, length - needle.text.len());
    Ok(insert_needle(&hay, &needle.text, depth).0)
}

fn cell_needle(variant: NeedleVariant, seed: u64, li: usize, di: usize) -> Needle {
    match variant {
        NeedleVariant::Fixed => Needle::fixed(),
        NeedleVariant::RandomCity => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((li as u64) << 32) ^ di as u64 ^ 0xc17e);
            Needle::random_city(&mut rng, EVAL_CITIES)
        }
    }
}

/// Training pairs for a needle adaptor: haystacks of random length and depth,
/// each with its own needle document and summaries computed by the caller.
pub fn needle_training_docs(
    variant: NeedleVariant,
    cities: &[&str],
    lengths: &[usize],
    n: usize,
    seed: u64,
) -> Result<Vec<(String, String, TrainingExample)>> {
    use rand::seq::IndexedRandom;
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7ea1);
    (0..n)
        .map(|i| {
            let needle = match variant {
                NeedleVariant::Fixed => Needle::fixed(),
                NeedleVariant::RandomCity => Needle::random_city(&mut rng, cities),
            };
            let length = *lengths.choose(&mut rng).expect("non-empty lengths");
            let depth = rng.random_range(0.0..=1.0);
            let doc_id = format!("needle-train-{i:04}");
            let text = needle_document(&needle, length, depth, rng.random())?;
            let ex = TrainingExample {
                group_id: NEEDLE_GROUP.into(),
                doc_id: doc_id.clone(),
                question: needle.question,
                answer: needle.answer,
            };
            Ok((doc_id, text, ex))
        })
        .collect()
}

/// Compresses `n_docs` needle training documents and trains the needle
/// group's adaptor on them.
#[allow(clippy::too_many_arguments)]
pub fn train_needle_adaptor(
    weights: &ModelWeights,
    slots: &Array2<f64>,
    comp: CompressionConfig,
    variant: NeedleVariant,
    lengths: &[usize],
    n_docs: usize,
    train: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    let encoder = ContextEncoder::new(weights, slots, comp)?;
    let mut summaries = HashMap::new();
    let mut examples = Vec::with_capacity(n_docs);
    for (doc_id, text, ex) in needle_training_docs(variant, TRAIN_CITIES, lengths, n_docs, seed)? {
        summaries.insert(doc_id.clone(), encoder.compress_document(&doc_id, &tokenize(&text))?);
        examples.push(ex);
    }
    train_group(weights, NEEDLE_GROUP, &examples, &summaries, train)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeedleCell {
    pub length: usize,
    pub depth: f64,
    pub gold: String,
    pub answer: Option<String>,
    pub success: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeedleGrid {
    pub mode: ServeMode,
    pub cells: Vec<NeedleCell>,
}

impl NeedleGrid {
    /// Percentage of successful cells; failed cells count as misses.
    pub fn success_rate(&self) -> f64 {
        if self.cells.is_empty() {
            return 0.0;
        }
        100.0 * self.cells.iter().filter(|c| c.success).count() as f64 / self.cells.len() as f64
    }
}

/// Runs the grid once per mode. Each cell's document is compressed once and
/// served from a single-document store, retrieving every passage so the
/// whole haystack reaches the decoder.
pub fn needle_grid(
    weights: &ModelWeights,
    slots: &Array2<f64>,
    comp: CompressionConfig,
    adaptors: &HashMap<String, LoraAdaptor>,
    modes: &[ServeMode],
    cfg: &NeedleGridConfig,
) -> Result<Vec<NeedleGrid>> {
    let encoder = ContextEncoder::new(weights, slots, comp)?;
    let embedder = Embedder::new(weights);
    let mut grids: Vec<NeedleGrid> = modes.iter().map(|&mode| NeedleGrid { mode, cells: Vec::new() }).collect();
    for (li, &length) in cfg.lengths.iter().enumerate() {
        for (di, &depth) in cfg.depths.iter().enumerate() {
            let needle = cell_needle(cfg.variant, cfg.seed, li, di);
            let text = needle_document(&needle, length, depth, cfg.seed)?;
            let summaries = encoder.compress_document(HAYSTACK_DOC, &tokenize(&text))?;
            let mut store = VectorStore::new(weights.config.d_model, embedder.digest());
            let ids = store.add_document(&embedder, HAYSTACK_DOC, NEEDLE_GROUP, &text, comp, summaries, None)?;
            let ctx = ServeContext {
                weights,
                store: &store,
                adaptors,
                embedder: &embedder,
                policy: GroupPolicy::Strict,
            };
            for grid in &mut grids {
                let req = ServeRequest {
                    doc_id: Some(HAYSTACK_DOC.into()),
                    group_id: (grid.mode == ServeMode::Lloco).then(|| NEEDLE_GROUP.to_string()),
                    max_new_tokens: cfg.max_new_tokens,
                    top_k: ids.len(),
                    ..ServeRequest::new(needle.question.clone(), grid.mode)
                };
                let cell = match serve_query(&req, &ctx) {
                    Ok(resp) => NeedleCell {
                        length,
                        depth,
                        gold: needle.answer.clone(),
                        success: contains_answer(&resp.answer, &needle.answer),
                        answer: Some(resp.answer),
                        error: None,
                    },
                    Err(e) => NeedleCell {
                        length,
                        depth,
                        gold: needle.answer.clone(),
                        answer: None,
                        success: false,
                        error: Some(e.to_string()),
                    },
                };
                grid.cells.push(cell);
            }
        }
    }
    Ok(grids)
}

/// One row per (mode, cell).
pub fn needle_table(grids: &[NeedleGrid], config_digest: &str, seed: u64, wall_clock_secs: f64) -> BenchResult {
    let mut rows = Vec::new();
    for g in grids {
        for c in &g.cells {
            rows.push(vec![
                Cell::from(g.mode.as_str()),
                Cell::from(c.length),
                Cell::from(c.depth),
                Cell::from(c.gold.as_str()),
                match (&c.answer, &c.error) {
                    (Some(a), _) => Cell::from(a.as_str()),
                    (None, Some(e)) => Cell::Failed(e.clone()),
                    (None, None) => Cell::Failed("no answer".into()),
                },
                Cell::from(c.success),
            ]);
        }
    }
    BenchResult {
        name: "needle".into(),
        config_digest: config_digest.into(),
        seed,
        wall_clock_secs,
        columns: ["mode", "length", "depth", "gold", "answer", "success"].map(String::from).to_vec(),
        rows,
        summary: grids
            .iter()
            .map(|g| (format!("{}_success", g.mode.as_str()), g.success_rate()))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn needle_documents_have_requested_length() {
        let n = Needle::fixed();
        for (len, depth) in [(240, 0.0), (480, 0.5), (4800, 1.0)] {
            let doc = needle_document(&n, len, depth, 1).unwrap();
            assert_eq!(doc.len(), len);
            assert!(doc.contains(&n.text));
        }
        assert!(needle_document(&n, 10, 0.5, 1).is_err());
    }

    #[test]
    fn haystack_is_shared_across_depths() {
        let n = Needle::fixed();
        let a = needle_document(&n, 600, 0.0, 3).unwrap();
        let b = needle_document(&n, 600, 1.0, 3).unwrap();
        assert_eq!(&a[n.text.len()..], &b[..600 - n.text.len()]);
    }

    #[test]
    fn toy_grid_fits_the_window() {
        let cfg = NeedleGridConfig::toy();
        assert_eq!(cfg.lengths.len() * cfg.depths.len(), 80);
        let comp = CompressionConfig::toy();
        let q = crate::trainer::prompt_tokens(crate::synth::FIXED_QUESTION).len();
        for &len in &cfg.lengths {
            assert!(comp.summary_rows(len) + q + cfg.max_new_tokens <= 256, "length {len}");
        }
    }
}
