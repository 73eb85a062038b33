#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use lloco::encoder::CompressionConfig;
use lloco::lora::{default_targets, LoraAdaptor};
use lloco::model::{ModelConfig, ModelWeights};
use lloco::serving::{preprocess, Artifacts};
use lloco::synth::{kv_group, KeyPool, SyntheticDoc};
use lloco::trainer::init_slots;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Untrained toy model with fresh slots in a new artifact directory.
pub fn untrained_artifacts(dir: &Path) -> Artifacts {
    let config = ModelConfig::default();
    let weights = ModelWeights::init(&config).unwrap();
    let slots = init_slots(&config, 4, 1);
    Artifacts::create(dir, weights, slots, CompressionConfig::toy()).unwrap()
}

/// Writes a corpus of key-value documents, `n` documents of `chunks` chunks
/// for each `(group, n)`. Returns the group map.
pub fn write_kv_corpus(corpus: &Path, groups: &[(&str, usize)], chunks: usize, seed: u64) -> BTreeMap<String, String> {
    kv_corpus(corpus, groups, chunks, seed)
        .into_iter()
        .map(|d| (d.doc_id, d.group_id))
        .collect()
}

/// Like [`write_kv_corpus`], returning the documents with their facts.
pub fn kv_corpus(corpus: &Path, groups: &[(&str, usize)], chunks: usize, seed: u64) -> Vec<SyntheticDoc> {
    fs::create_dir_all(corpus).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keys = KeyPool::new(&mut rng);
    let mut docs = Vec::new();
    for (group, n) in groups {
        for d in kv_group(&mut rng, &mut keys, group, *n, chunks, 1, 120) {
            fs::write(corpus.join(format!("{}.txt", d.doc_id)), &d.text).unwrap();
            docs.push(d);
        }
    }
    docs
}

/// Artifacts over a two-group corpus with an adaptor registered per group.
pub fn two_group_artifacts(dir: &Path) -> Artifacts {
    let mut a = untrained_artifacts(dir);
    let corpus = dir.join("corpus");
    let groups = write_kv_corpus(&corpus, &[("alpha", 3), ("beta", 2)], 2, 9);
    preprocess(&corpus, &groups, &mut a).unwrap();
    for (i, g) in ["alpha", "beta"].into_iter().enumerate() {
        let adaptor = LoraAdaptor::init(g, &default_targets(2), 8, 16.0, i as u64, &a.weights.config).unwrap();
        a.register_adaptor(adaptor, "test").unwrap();
    }
    a
}

/// The toy base model and slots, pretrained once per target directory.
pub fn pretrained() -> (ModelWeights, ndarray::Array2<f64>, CompressionConfig) {
    let comp = CompressionConfig::toy();
    let cache = Path::new(env!("CARGO_TARGET_TMPDIR")).join("pretrain-cache");
    let (w, s, _) = lloco::trainer::pretrain_cached(
        &ModelConfig::default(),
        &comp,
        &lloco::trainer::PretrainConfig::default(),
        &cache,
    )
    .unwrap();
    (w, s, comp)
}
