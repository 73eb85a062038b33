//! Per-token decode latency with the raw document in the prompt versus its
//! summary rows, across context sizes. Timing does not depend on weight
//! values, so this runs on an untrained model.
//!
//!     cargo run --release --example latency

use lloco::encoder::CompressionConfig;
use lloco::eval::{latency_bench, CellStatus, LatencyConfig, LatencyMode};
use lloco::model::{ModelConfig, ModelWeights};
use lloco::trainer::init_slots;

fn main() -> lloco::Result<()> {
    let config = ModelConfig::default();
    let comp = CompressionConfig::toy();
    let weights = ModelWeights::init(&config)?;
    let slots = init_slots(&config, comp.summary_count, 1);
    let cfg = LatencyConfig { sizes: vec![480, 960, 3840, 15360], runs: 3, warmups: 1, ..LatencyConfig::toy() };

    let table = latency_bench(&weights, &slots, comp, &cfg)?;
    println!("window {} positions, effective window {} tokens", table.window, table.effective_window);
    println!("{:>8} {:>22} {:>22} {:>8}", "tokens", "full ms/tok", "compressed ms/tok", "speedup");
    for &n in &cfg.sizes {
        let show = |mode| match table.cell(n, mode) {
            Some(c) => match (&c.status, c.per_token_ms) {
                (CellStatus::Ok, Some(ms)) => format!("{ms:.3} ({} rows)", c.prompt_rows),
                (CellStatus::Refused(_), _) => "refused".into(),
                _ => "failed".into(),
            },
            None => "-".into(),
        };
        let speedup = table.speedup(n).map(|s| format!("{s:.1}x")).unwrap_or_else(|| "-".into());
        println!("{n:>8} {:>22} {:>22} {speedup:>8}", show(LatencyMode::Full), show(LatencyMode::Compressed));
    }
    Ok(())
}
