//! Index a few documents in the passage store and rank passages for a
//! question by cosine similarity.
//!
//!     cargo run --release --example retrieval

use lloco::encoder::{CompressionConfig, ContextEncoder};
use lloco::model::{tokenize, ModelConfig, ModelWeights};
use lloco::store::{Embedder, VectorStore};
use lloco::synth::{kv_group, KeyPool};
use lloco::trainer::init_slots;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> lloco::Result<()> {
    let config = ModelConfig::default();
    let comp = CompressionConfig::toy();
    let weights = ModelWeights::init(&config)?;
    let slots = init_slots(&config, comp.summary_count, 1);
    let encoder = ContextEncoder::new(&weights, &slots, comp)?;
    let embedder = Embedder::new(&weights);
    let mut store = VectorStore::new(embedder.dim(), embedder.digest());

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut keys = KeyPool::new(&mut rng);
    let docs = kv_group(&mut rng, &mut keys, "notes", 4, 3, 1, comp.chunk_length);
    for d in &docs {
        let summaries = encoder.compress_document(&d.doc_id, &tokenize(&d.text))?;
        store.add_document(&embedder, &d.doc_id, &d.group_id, &d.text, comp, summaries, None)?;
    }
    println!("{} passages over {} documents", store.len(), store.documents().len());

    let question = docs[2].facts[0].question();
    println!("query: {question}");
    for hit in store.top_k(&embedder.embed(&question), 3)? {
        println!(
            "  {:.4}  passage {} of {} (chunks {:?})",
            hit.score, hit.record.passage_id, hit.record.doc_id, hit.record.covering_chunk_indices
        );
    }
    Ok(())
}
