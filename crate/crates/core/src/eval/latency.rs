use std::time::Instant;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::report::{BenchResult, Cell};
use crate::encoder::{concat_summaries, effective_window, CompressionConfig, ContextEncoder};
use crate::error::Result;
use crate::model::{tokenize, EmbeddingSequence, GenerateMode, ModelWeights, TokenId};
use crate::synth::filler;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyConfig {
    /// Decoder window for the benchmark. Positions are rotary, so the same
    /// weights run at any window.
    pub window: usize,
    /// Original context sizes in tokens.
    pub sizes: Vec<usize>,
    pub max_new_tokens: usize,
    pub runs: usize,
    pub warmups: usize,
    pub seed: u64,
}

impl LatencyConfig {
    /// A 1024-position window: full mode covers the first two sizes, and the
    /// last size is the longest whose summaries leave room for decoding.
    pub fn toy() -> Self {
        Self {
            window: 1024,
            sizes: vec![480, 960, 1920, 3840, 7680, 15360, 29760],
            max_new_tokens: 16,
            runs: 5,
            warmups: 2,
            seed: 0,
        }
    }

    pub fn digest(&self) -> String {
        crate::io::json_digest(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatencyMode {
    Full,
    Compressed,
}

impl LatencyMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            LatencyMode::Full => "full",
            LatencyMode::Compressed => "compressed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Ok,
    /// The mode cannot represent this size at all.
    Refused(String),
    /// The size was accepted but decoding could not run.
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyCell {
    pub context_tokens: usize,
    pub mode: LatencyMode,
    /// Rows fed to the decoder before generation.
    pub prompt_rows: usize,
    pub status: CellStatus,
    /// Median over runs of generation time divided by new tokens.
    pub per_token_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyTable {
    pub window: usize,
    pub effective_window: usize,
    pub cells: Vec<LatencyCell>,
}

impl LatencyTable {
    pub fn cell(&self, size: usize, mode: LatencyMode) -> Option<&LatencyCell> {
        self.cells.iter().find(|c| c.context_tokens == size && c.mode == mode)
    }

    /// Full over compressed per-token latency, where both ran.
    pub fn speedup(&self, size: usize) -> Option<f64> {
        let full = self.cell(size, LatencyMode::Full)?.per_token_ms?;
        let comp = self.cell(size, LatencyMode::Compressed)?.per_token_ms?;
        Some(full / comp)
    }
}

/// Copy of `weights` running at a different window.
pub fn with_window(weights: &ModelWeights, window: usize) -> Result<ModelWeights> {
    let mut w = weights.clone();
    w.config.window = window;
    w.config.validate()?;
    Ok(w)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn time_generation(
    weights: &ModelWeights,
    prefix: &EmbeddingSequence,
    prompt: &[TokenId],
    cfg: &LatencyConfig,
) -> Result<f64> {
    for _ in 0..cfg.warmups {
        weights.generate(prefix, prompt, cfg.max_new_tokens, GenerateMode::Greedy, None)?;
    }
    let mut samples = Vec::with_capacity(cfg.runs);
    for _ in 0..cfg.runs.max(1) {
        let t = Instant::now();
        weights.generate(prefix, prompt, cfg.max_new_tokens, GenerateMode::Greedy, None)?;
        samples.push(t.elapsed().as_secs_f64() * 1e3 / cfg.max_new_tokens.max(1) as f64);
    }
    Ok(median(samples))
}

/// Per-token decode latency with the raw context versus its summaries.
/// Full mode refuses sizes above the window; compressed mode refuses sizes
/// above the effective window. Accepted sizes that leave no room for the new
/// tokens are reported as failed.
pub fn latency_bench(
    weights: &ModelWeights,
    slots: &Array2<f64>,
    comp: CompressionConfig,
    cfg: &LatencyConfig,
) -> Result<LatencyTable> {
    let weights = with_window(weights, cfg.window)?;
    let encoder = ContextEncoder::new(&weights, slots, comp)?;
    let eff = effective_window(cfg.window, comp.chunk_length, comp.summary_count);
    let empty = EmbeddingSequence::empty(weights.config.d_model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cells = Vec::new();
    for &size in &cfg.sizes {
        let tokens = tokenize(&filler(&mut rng, size));

        let full = if size > cfg.window {
            (size, CellStatus::Refused(format!("{size} tokens exceed the {} window", cfg.window)), None)
        } else if size + cfg.max_new_tokens > cfg.window {
            (size, CellStatus::Failed("no room left for new tokens".into()), None)
        } else {
            (size, CellStatus::Ok, Some(time_generation(&weights, &empty, &tokens, cfg)?))
        };
        cells.push(LatencyCell {
            context_tokens: size,
            mode: LatencyMode::Full,
            prompt_rows: full.0,
            status: full.1,
            per_token_ms: full.2,
        });

        let rows = comp.summary_rows(size);
        let compressed = if size > eff {
            (CellStatus::Refused(format!("{size} tokens exceed the effective window {eff}")), None)
        } else if rows + cfg.max_new_tokens > cfg.window {
            (CellStatus::Failed("no room left for new tokens".into()), None)
        } else {
            let summaries = encoder.compress_document("latency", &tokens)?;
            let prefix = concat_summaries(weights.config.d_model, &summaries);
            (CellStatus::Ok, Some(time_generation(&weights, &prefix, &[], cfg)?))
        };
        cells.push(LatencyCell {
            context_tokens: size,
            mode: LatencyMode::Compressed,
            prompt_rows: rows,
            status: compressed.0,
            per_token_ms: compressed.1,
        });
    }
    Ok(LatencyTable {
        window: cfg.window,
        effective_window: eff,
        cells,
    })
}

fn latency_cell(c: Option<&LatencyCell>) -> Cell {
    match c.map(|c| (&c.status, c.per_token_ms)) {
        Some((CellStatus::Ok, Some(ms))) => Cell::from(ms),
        Some((CellStatus::Refused(r), _)) => Cell::Failed(format!("refused: {r}")),
        Some((CellStatus::Failed(r), _)) => Cell::Failed(r.clone()),
        _ => Cell::Failed("not run".into()),
    }
}

/// One row per context size, with a speedup column of full over compressed.
pub fn latency_table(table: &LatencyTable, config_digest: &str, seed: u64, wall_clock_secs: f64) -> BenchResult {
    let mut sizes: Vec<usize> = table.cells.iter().map(|c| c.context_tokens).collect();
    sizes.dedup();
    let rows = sizes
        .iter()
        .map(|&n| {
            let full = table.cell(n, LatencyMode::Full);
            let comp = table.cell(n, LatencyMode::Compressed);
            vec![
                Cell::from(n),
                Cell::from(full.map_or(0, |c| c.prompt_rows)),
                Cell::from(comp.map_or(0, |c| c.prompt_rows)),
                latency_cell(full),
                latency_cell(comp),
                table
                    .speedup(n)
                    .map_or_else(|| Cell::Failed("needs both modes".into()), Cell::from),
            ]
        })
        .collect();
    BenchResult {
        name: "latency".into(),
        config_digest: config_digest.into(),
        seed,
        wall_clock_secs,
        columns: ["context_tokens", "full_rows", "compressed_rows", "full_ms_per_token", "compressed_ms_per_token", "speedup"]
            .map(String::from)
            .to_vec(),
        rows,
        summary: [
            ("window".to_string(), table.window as f64),
            ("effective_window".to_string(), table.effective_window as f64),
        ]
        .into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn toy_sizes_straddle_both_limits() {
        let cfg = LatencyConfig::toy();
        let comp = CompressionConfig::toy();
        let eff = effective_window(cfg.window, comp.chunk_length, comp.summary_count);
        assert!(cfg.sizes.iter().any(|&s| s > cfg.window));
        assert!(cfg.sizes.iter().all(|&s| s <= eff));
        let last = *cfg.sizes.last().unwrap();
        assert!(comp.summary_rows(last) + cfg.max_new_tokens <= cfg.window);
    }
}
