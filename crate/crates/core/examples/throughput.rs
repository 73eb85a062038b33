//! Finetuning throughput when each training sequence carries the raw
//! document head versus the document's summary rows.
//!
//!     cargo run --release --example throughput

use lloco::encoder::CompressionConfig;
use lloco::eval::{throughput_bench, ThroughputConfig};
use lloco::model::{ModelConfig, ModelWeights};
use lloco::trainer::init_slots;

fn main() -> lloco::Result<()> {
    let config = ModelConfig::default();
    let comp = CompressionConfig::toy();
    let weights = ModelWeights::init(&config)?;
    let slots = init_slots(&config, comp.summary_count, 1);

    let r = throughput_bench(&weights, &slots, comp, &ThroughputConfig::toy())?;
    println!("{} steps each", r.steps);
    println!("full context: {:>7.2} samples/s at {:>5.0} rows per sequence", r.full_context_samples_per_sec, r.full_context_rows);
    println!("summaries:    {:>7.2} samples/s at {:>5.0} rows per sequence", r.lloco_samples_per_sec, r.lloco_rows);
    println!("ratio {:.2}", r.ratio());
    Ok(())
}
