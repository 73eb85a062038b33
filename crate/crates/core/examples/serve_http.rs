//! Build an artifact directory over a small corpus, start the HTTP server on
//! a free port and send one query per serving mode.
//!
//! The base model here is untrained, so answers are noise; the point is the
//! request/response contract. Swap in `lloco pretrain` output for real answers.
//!
//!     cargo run --release --example serve_http

use std::collections::BTreeMap;

use lloco::encoder::CompressionConfig;
use lloco::lora::{default_targets, LoraAdaptor};
use lloco::model::{ModelConfig, ModelWeights};
use lloco::serving::{preprocess, router, Artifacts, GroupPolicy, ServeMode, ServeRequest, ServeResponse};
use lloco::synth::{kv_group, KeyPool};
use lloco::trainer::init_slots;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let config = ModelConfig::default();
    let comp = CompressionConfig::toy();
    let weights = ModelWeights::init(&config)?;
    let slots = init_slots(&config, comp.summary_count, 1);
    let mut art = Artifacts::create(&dir.path().join("artifacts"), weights, slots, comp)?;

    let corpus = dir.path().join("corpus");
    std::fs::create_dir_all(&corpus)?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut keys = KeyPool::new(&mut rng);
    let docs = kv_group(&mut rng, &mut keys, "handbook", 3, 2, 1, comp.chunk_length);
    let mut groups = BTreeMap::new();
    for d in &docs {
        std::fs::write(corpus.join(format!("{}.txt", d.doc_id)), &d.text)?;
        groups.insert(d.doc_id.clone(), d.group_id.clone());
    }
    let report = preprocess(&corpus, &groups, &mut art)?;
    println!("indexed {} documents: {} passages, {} tokens -> {} summary rows", report.documents, report.passages, report.tokens, report.summary_rows);
    art.register_adaptor(LoraAdaptor::init("handbook", &default_targets(config.n_layers), 8, 16.0, 0, &config)?, "example")?;

    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await?;
    let addr = listener.local_addr()?;
    tokio::spawn(async move { axum::serve(listener, router(art, GroupPolicy::Strict)).await });
    println!("listening on http://{addr}");

    let client = reqwest::Client::new();
    let question = docs[0].facts[0].question();
    for mode in ServeMode::ALL {
        let req = ServeRequest { doc_id: Some(docs[0].doc_id.clone()), ..ServeRequest::new(question.clone(), mode) };
        let resp = client.post(format!("http://{addr}/v1/query")).json(&req).send().await?;
        let status = resp.status();
        let body: ServeResponse = resp.json().await?;
        println!(
            "{:<24} {status} rows={:<3} ctx={:<4} q={:<3} answer={:?}",
            mode.as_str(),
            body.composition.summary_rows,
            body.composition.context_tokens,
            body.composition.question_tokens,
            body.answer
        );
    }
    let bad = client.post(format!("http://{addr}/v1/query")).body("{not json").header("content-type", "application/json").send().await?;
    println!("malformed body -> {}", bad.status());
    Ok(())
}
