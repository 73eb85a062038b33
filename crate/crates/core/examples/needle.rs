//! Needle-in-a-haystack grid: a fixed fact hidden at varying depth in filler
//! documents of varying length, served from summaries with and without the
//! needle adaptor. Prints the success grid for each mode.
//!
//!     cargo run --release --example needle
//!
//! Uses a reduced 4 x 5 grid; `lloco bench needle` runs the full 8 x 10.

use std::collections::HashMap;
use std::path::Path;

use lloco::encoder::CompressionConfig;
use lloco::eval::{needle_grid, train_needle_adaptor, NeedleGridConfig, NeedleVariant};
use lloco::model::ModelConfig;
use lloco::serving::ServeMode;
use lloco::trainer::{pretrain_cached, PretrainConfig, TrainConfig};

fn main() -> lloco::Result<()> {
    let comp = CompressionConfig::toy();
    let cache = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/tmp/pretrain-cache");
    let (weights, slots, _) = pretrain_cached(&ModelConfig::default(), &comp, &PretrainConfig::default(), &cache)?;

    let trained = train_needle_adaptor(&weights, &slots, comp, NeedleVariant::Fixed, &[240, 480, 960], 32, &TrainConfig::toy(), 8)?;
    println!("needle adaptor: loss {:.3} -> {:.3}", trained.initial_loss, trained.final_loss);
    let adaptors = HashMap::from([(trained.adaptor.group_id.clone(), trained.adaptor)]);

    let cfg = NeedleGridConfig {
        lengths: vec![240, 960, 2880, 4800],
        depths: vec![0.0, 0.25, 0.5, 0.75, 1.0],
        ..NeedleGridConfig::toy()
    };
    let modes = [ServeMode::CompressedUnfinetuned, ServeMode::Lloco];
    for grid in needle_grid(&weights, &slots, comp, &adaptors, &modes, &cfg)? {
        println!("\n{} ({:.0}% found)", grid.mode.as_str(), grid.success_rate());
        print!("{:>8}", "length");
        for d in &cfg.depths {
            print!("{:>6.2}", d);
        }
        println!();
        for &length in &cfg.lengths {
            print!("{length:>8}");
            for cell in grid.cells.iter().filter(|c| c.length == length) {
                print!("{:>6}", if cell.success { "#" } else { "." });
            }
            println!();
        }
    }
    Ok(())
}
