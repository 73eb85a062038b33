//! Greedy completion of a planted fact, with and without the document's
//! summary rows in front of the prompt.
//!
//!     cargo run --release --example generate

use std::path::Path;

use lloco::encoder::{concat_summaries, CompressionConfig, ContextEncoder};
use lloco::model::{detokenize, tokenize, EmbeddingSequence, GenerateMode, ModelConfig};
use lloco::synth::{kv_document, KeyPool};
use lloco::trainer::{pretrain_cached, PretrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> lloco::Result<()> {
    let config = ModelConfig::default();
    let comp = CompressionConfig::toy();
    let cache = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/tmp/pretrain-cache");
    let (weights, slots, _) = pretrain_cached(&config, &comp, &PretrainConfig::default(), &cache)?;
    let encoder = ContextEncoder::new(&weights, &slots, comp)?;

    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut keys = KeyPool::new(&mut rng);
    let doc = kv_document(&mut rng, &mut keys, "demo", "demo", 1, 1, comp.chunk_length);
    let fact = &doc.facts[0];
    println!("document: {:?}", doc.text);

    let summaries = encoder.compress_document(&doc.doc_id, &tokenize(&doc.text))?;
    let prefix = concat_summaries(config.d_model, &summaries);
    let prompt = tokenize(&fact.prompt());
    let stop = Some(b'.' as u32);
    for (label, prefix) in [("no prefix", EmbeddingSequence::empty(config.d_model)), ("summaries", prefix)] {
        let out = weights.generate_until(&prefix, &prompt, 8, GenerateMode::Greedy, None, stop)?;
        println!("{label:<10} -> {:?} (gold {:?})", detokenize(&out).trim_end_matches('.'), fact.value);
    }
    Ok(())
}
