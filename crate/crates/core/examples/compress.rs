//! Compress a long document into summary rows, persist the archive and
//! read it back. Runs on an untrained model, so it finishes in a second.
//!
//!     cargo run --release --example compress

use lloco::encoder::{effective_window, load_archive, ratio_label, save_archive, CompressionConfig, ContextEncoder};
use lloco::model::{tokenize, ModelConfig, ModelWeights};
use lloco::trainer::init_slots;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> lloco::Result<()> {
    let full = CompressionConfig::full_scale();
    println!(
        "full scale: {} tokens -> {} rows per chunk ({}), effective window {} tokens",
        full.chunk_length,
        full.summary_count,
        ratio_label(full.ratio()),
        effective_window(4096, full.chunk_length, full.summary_count)
    );

    let config = ModelConfig::default();
    let comp = CompressionConfig::toy();
    let weights = ModelWeights::init(&config)?;
    let slots = init_slots(&config, comp.summary_count, 1);
    let encoder = ContextEncoder::new(&weights, &slots, comp)?;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let text = lloco::synth::filler(&mut rng, 1000);
    let tokens = tokenize(&text);
    let summaries = encoder.compress_document("demo", &tokens)?;
    println!(
        "toy profile: {} tokens -> {} chunks -> {} summary rows ({})",
        tokens.len(),
        summaries.len(),
        comp.summary_rows(tokens.len()),
        ratio_label(comp.ratio())
    );

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("demo.llsa");
    save_archive(&path, "demo", &comp, config.d_model, &summaries)?;
    let (back_cfg, back) = load_archive(&path)?;
    assert_eq!(back_cfg, comp);
    assert_eq!(back.len(), summaries.len());
    println!("archive round trip ok: {} bytes", std::fs::metadata(&path)?.len());
    Ok(())
}
