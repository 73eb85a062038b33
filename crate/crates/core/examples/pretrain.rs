//! Pretrain the toy base model and summary slots, then measure whether the
//! summaries carry the chunk's content: reconstruction loss and key-value
//! recall, each with and without the summary prefix.
//!
//!     cargo run --release --example pretrain -- 600
//!
//! The argument is the step count (default 600, about 30 s). The full
//! default schedule is 6000 steps; `lloco pretrain` runs it and caches the
//! result.

use std::time::Instant;

use lloco::encoder::CompressionConfig;
use lloco::model::ModelConfig;
use lloco::trainer::{evaluate_pretraining, pretrain_base, synthetic_docs, PretrainConfig};

fn main() -> lloco::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(600);
    let config = ModelConfig::default();
    let comp = CompressionConfig::toy();
    let pcfg = PretrainConfig { steps, ..PretrainConfig::default() };

    let started = Instant::now();
    let out = pretrain_base(&config, &comp, &pcfg)?;
    let secs = started.elapsed().as_secs_f64();
    let every = (steps / 10).max(1);
    for entry in out.log.iter().step_by(every) {
        println!("step {:>5}  loss {:.3}  lr {:.2e}", entry.step, entry.loss, entry.lr);
    }
    println!("{steps} steps in {secs:.1}s");

    let held_out = synthetic_docs(30, pcfg.max_chunks, pcfg.max_facts_per_chunk, comp.chunk_length, 999);
    let ev = evaluate_pretraining(&out.weights, &out.slots, &comp, &held_out)?;
    println!(
        "reconstruction loss {:.3} with summaries, {:.3} without",
        ev.recon_loss_with_summaries, ev.recon_loss_without
    );
    println!(
        "held-out recall {:.1}% with summaries, {:.1}% without",
        100.0 * ev.recall_with_summaries,
        100.0 * ev.recall_without
    );
    Ok(())
}
