//! Build a LoRA adaptor, fold it into the base weights and back out,
//! save it, and register it under its group.
//!
//!     cargo run --release --example lora_merge

use lloco::io::to_f32_grid;
use lloco::lora::{default_targets, load_adaptor, merge, save_adaptor, unmerge, AdaptorRegistry, LoraAdaptor};
use lloco::model::{EmbeddingSequence, ModelConfig, ModelWeights};

fn main() -> lloco::Result<()> {
    let config = ModelConfig::default();
    let base = ModelWeights::init(&config)?;
    let mut adaptor = LoraAdaptor::init("legal", &default_targets(config.n_layers), 8, 16.0, 7, &config)?;
    // A fresh adaptor has B = 0; perturb it so merging has something to do.
    // Adaptor files store f32, so stay on that grid for an exact round trip.
    for (i, pair) in adaptor.pairs.iter_mut().enumerate() {
        pair.b[[0, 0]] = to_f32_grid(0.01 * (i + 1) as f64);
    }
    println!("{} targets, rank {}, scale {}", adaptor.pairs.len(), adaptor.rank, adaptor.scale());

    let merged = merge(&adaptor, &base)?;
    let restored = unmerge(&merged, &adaptor)?;
    let flatten = |w: &ModelWeights| {
        let mut all = Vec::new();
        w.for_each_tensor(|_, _, values| all.extend_from_slice(values));
        all
    };
    let drift = flatten(&base)
        .iter()
        .zip(flatten(&restored))
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    println!("merge then unmerge: max |delta| {drift:.2e}");

    let prompt = lloco::model::tokenize("Q: hello\nA: ");
    let empty = EmbeddingSequence::empty(config.d_model);
    let input = base.assemble_input(&empty, &prompt)?;
    let live = base.forward_embeddings(&input, Some(&adaptor))?;
    let folded = merged.forward_embeddings(&input, None)?;
    let gap = (&live.logits - &folded.logits).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
    println!("adaptor applied live vs merged: max logit gap {gap:.2e}");

    let dir = tempfile::tempdir()?;
    save_adaptor(&adaptor, &dir.path().join("legal.lora"))?;
    assert!(load_adaptor(&dir.path().join("legal.lora"))?.bitwise_eq(&adaptor));
    let mut registry = AdaptorRegistry::open(dir.path().join("adaptors"))?;
    let record = registry.register(&adaptor, "example")?;
    println!("registered group {} as {} (version {})", record.group_id, record.adaptor_id, record.version);
    Ok(())
}
