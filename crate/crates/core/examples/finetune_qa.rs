//! Finetune one group's adaptor on key-value questions over compressed
//! documents, then score every serving mode by exact match and F1.
//!
//!     cargo run --release --example finetune_qa
//!
//! The first run pretrains the base model (about five minutes) and caches it
//! under `target/tmp/pretrain-cache`.

use std::path::Path;

use lloco::encoder::CompressionConfig;
use lloco::eval::qa_eval;
use lloco::model::ModelConfig;
use lloco::serving::{Artifacts, GroupPolicy, ServeMode};
use lloco::synth::{kv_group, KeyPool};
use lloco::trainer::{pretrain_cached, train_group, PretrainConfig, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> lloco::Result<()> {
    let comp = CompressionConfig::toy();
    let cache = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/tmp/pretrain-cache");
    let (weights, slots, hit) = pretrain_cached(&ModelConfig::default(), &comp, &PretrainConfig::default(), &cache)?;
    println!("base model {}", if hit { "loaded from cache" } else { "pretrained" });

    let dir = tempfile::tempdir()?;
    let mut art = Artifacts::create(dir.path(), weights, slots, comp)?;
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let mut keys = KeyPool::new(&mut rng);
    let docs = kv_group(&mut rng, &mut keys, "kv", 12, 2, 1, comp.chunk_length);
    for d in &docs {
        art.index_document(&d.doc_id, &d.group_id, &d.text)?;
    }
    let examples: Vec<_> = docs.iter().flat_map(|d| d.qa_examples()).collect();

    let cfg = TrainConfig::toy();
    let trained = train_group(&art.weights, "kv", &examples, &art.store, &cfg)?;
    println!(
        "trained {} steps on {} questions: loss {:.3} -> {:.3}",
        trained.log.len(),
        examples.len(),
        trained.initial_loss,
        trained.final_loss
    );
    art.register_adaptor(trained.adaptor, &cfg.digest())?;

    let ctx = art.context(GroupPolicy::Strict);
    println!("{:<24} {:>6} {:>6}", "mode", "EM", "F1");
    for mode in ServeMode::ALL {
        let report = qa_eval(&examples, mode, &ctx, 16);
        println!("{:<24} {:>6.1} {:>6.1}", mode.as_str(), report.em(), report.f1());
    }
    Ok(())
}
