use ndarray::Array1;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lloco::error::Error;
use lloco::io::to_f32_grid;
use lloco::lora::{
    default_targets, load_adaptor, merge, save_adaptor, unmerge, AdaptorRegistry, LoraAdaptor, Projection,
};
use lloco::model::{EmbeddingSequence, ModelConfig, ModelWeights};

fn adaptor_with_b(group: &str, seed: u64, config: &ModelConfig) -> LoraAdaptor {
    let mut a = LoraAdaptor::init(group, &default_targets(config.n_layers), 8, 16.0, seed, config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in &mut a.pairs {
        p.b.mapv_inplace(|_| to_f32_grid(rng.random_range(-0.05..0.05)));
    }
    a
}

#[test]
fn init_targets_q_and_v_with_zero_b() {
    let config = ModelConfig::default();
    let a = LoraAdaptor::init("g", &default_targets(2), 8, 16.0, 0, &config).unwrap();
    assert_eq!(a.pairs.len(), 4);
    assert_eq!(a.scale(), 2.0);
    for layer in 0..2 {
        for proj in [Projection::Query, Projection::Value] {
            let p = a.pair(layer, proj).unwrap();
            assert_eq!(p.a.dim(), (8, 64));
            assert_eq!(p.b.dim(), (64, 8));
            assert!(p.b.iter().all(|&x| x == 0.0));
            assert!(p.a.iter().any(|&x| x != 0.0));
        }
    }
    assert!(LoraAdaptor::init("g", &default_targets(2), 0, 16.0, 0, &config).is_err());
}

#[test]
fn delta_matrix_agrees_with_apply_delta() {
    let config = ModelConfig::default();
    let a = adaptor_with_b("g", 3, &config);
    let x = Array1::from_iter((0..64).map(|i| (i as f64 * 0.37).sin()));
    for pair in &a.pairs {
        let dense = a.delta_matrix(&pair.target).unwrap().dot(&x);
        let lowrank = a.apply_delta(&pair.target, x.view()).unwrap();
        let gap = (&dense - &lowrank).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        assert!(gap < 1e-12, "{gap}");
    }
    let short = Array1::zeros(10);
    assert!(matches!(a.apply_delta(&a.pairs[0].target, short.view()), Err(Error::ShapeMismatch(_))));
}

#[test]
fn merged_model_matches_live_adaptor() {
    let config = ModelConfig::default();
    let base = ModelWeights::init(&config).unwrap();
    let a = adaptor_with_b("g", 4, &config);
    let merged = merge(&a, &base).unwrap();
    let input = base
        .assemble_input(&EmbeddingSequence::empty(64), &lloco::model::tokenize("Q: where?\nA: "))
        .unwrap();
    let live = base.forward_embeddings(&input, Some(&a)).unwrap();
    let folded = merged.forward_embeddings(&input, None).unwrap();
    let gap = (&live.logits - &folded.logits).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
    assert!(gap < 1e-9, "{gap}");
}

#[test]
fn incompatible_adaptor_is_rejected() {
    let small = ModelConfig { d_model: 32, ..ModelConfig::default() };
    let a = LoraAdaptor::init("g", &default_targets(2), 4, 8.0, 0, &small).unwrap();
    let base = ModelWeights::init(&ModelConfig::default()).unwrap();
    assert!(matches!(merge(&a, &base), Err(Error::ShapeMismatch(_))));
    let deep = LoraAdaptor::init("g", &default_targets(3), 4, 8.0, 0, &ModelConfig { n_layers: 3, ..ModelConfig::default() }).unwrap();
    assert!(deep.check_compatible(&ModelConfig::default()).is_err());
}

#[test]
fn file_round_trip_is_bit_exact_and_corruption_is_typed() {
    let config = ModelConfig::default();
    let a = adaptor_with_b("legal", 5, &config);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("legal.lora");
    save_adaptor(&a, &path).unwrap();
    assert!(load_adaptor(&path).unwrap().bitwise_eq(&a));

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
    assert!(matches!(load_adaptor(&path), Err(Error::CorruptFile { .. })));
    std::fs::write(&path, b"JUNKJUNKJUNK").unwrap();
    assert!(load_adaptor(&path).is_err());
}

#[test]
fn registry_versions_and_reopens() {
    let config = ModelConfig::default();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("adaptors");
    let mut reg = AdaptorRegistry::open(&root).unwrap();
    assert!(matches!(reg.lookup("legal"), Err(Error::AdaptorNotFound(_))));

    let first = adaptor_with_b("legal", 1, &config);
    let second = adaptor_with_b("legal", 2, &config);
    let other = adaptor_with_b("medical", 3, &config);
    assert_eq!(reg.register(&first, "d1").unwrap().version, 1);
    assert_eq!(reg.register(&other, "d1").unwrap().version, 1);
    let rec = reg.register(&second, "d2").unwrap();
    assert_eq!(rec.version, 2);
    assert_eq!(rec.train_config_digest, "d2");
    assert_eq!(reg.retired().len(), 1);

    let reopened = AdaptorRegistry::open(&root).unwrap();
    let groups: Vec<_> = reopened.records().map(|r| r.group_id.clone()).collect();
    assert_eq!(groups, ["legal", "medical"]);
    assert!(reopened.load("legal").unwrap().bitwise_eq(&second));
    assert!(reopened.load("medical").unwrap().bitwise_eq(&other));
    let retired = &reopened.retired()[0];
    assert!(load_adaptor(&root.join(&retired.file)).unwrap().bitwise_eq(&first));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn unmerge_inverts_merge(seed in 0u64..1000, scale in 0.001f64..0.5) {
        let config = ModelConfig::default();
        let base = ModelWeights::init(&config).unwrap();
        let mut a = adaptor_with_b("p", seed, &config);
        for p in &mut a.pairs {
            p.b.mapv_inplace(|x| x * scale);
        }
        let back = unmerge(&merge(&a, &base).unwrap(), &a).unwrap();
        let mut worst = 0.0f64;
        let mut flat = Vec::new();
        base.for_each_tensor(|_, _, v| flat.extend_from_slice(v));
        let mut i = 0;
        back.for_each_tensor(|_, _, v| {
            for x in v {
                worst = worst.max((x - flat[i]).abs());
                i += 1;
            }
        });
        prop_assert!(worst < 1e-12, "{}", worst);
    }
}
