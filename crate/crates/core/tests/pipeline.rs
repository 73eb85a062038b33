mod common;

use std::collections::HashMap;

use proptest::prelude::*;

use lloco::encoder::{chunk_document, effective_window, ratio_label, CompressionConfig};
use lloco::eval::{
    f1_score, latency_bench, needle_document, needle_grid, normalize_answer, CellStatus, LatencyConfig, LatencyMode,
    NeedleGridConfig,
};
use lloco::lora::{default_targets, LoraAdaptor};
use lloco::model::{tokenize, ModelConfig, ModelWeights};
use lloco::serving::{serve_query, GroupPolicy, ServeMode, ServeRequest};
use lloco::synth::Needle;
use lloco::trainer::init_slots;

#[test]
fn zero_b_adaptor_serves_like_no_adaptor() {
    let tmp = tempfile::tempdir().unwrap();
    let art = common::two_group_artifacts(tmp.path());
    let ctx = art.context(GroupPolicy::Strict);
    let base = ServeRequest { group_id: Some("alpha".into()), doc_id: Some("alpha-doc001".into()), ..ServeRequest::new("what is the code for qq?", ServeMode::Lloco) };
    let lloco = serve_query(&base, &ctx).unwrap();
    let plain = serve_query(&ServeRequest { mode: ServeMode::CompressedUnfinetuned, ..base.clone() }, &ctx).unwrap();
    assert_eq!(lloco.answer, plain.answer);
    assert_eq!(lloco.composition, plain.composition);
    assert_eq!(lloco.retrieved_passage_ids, plain.retrieved_passage_ids);
    assert!(lloco.adaptor_id.is_some());
    assert!(plain.adaptor_id.is_none());
}

#[test]
fn no_context_ignores_the_store() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let with_docs = common::two_group_artifacts(a.path());
    let empty = common::untrained_artifacts(b.path());
    let req = ServeRequest::new("what is the code for ab?", ServeMode::NoContext);
    let x = serve_query(&req, &with_docs.context(GroupPolicy::Strict)).unwrap();
    let y = serve_query(&req, &empty.context(GroupPolicy::Strict)).unwrap();
    assert_eq!(x.answer, y.answer);
    assert_eq!(x.composition.summary_rows + x.composition.context_tokens, 0);
    assert!(x.retrieved_passage_ids.is_empty());
    assert!(x.adaptor_id.is_none());
}

#[test]
fn repeated_queries_are_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let art = common::two_group_artifacts(tmp.path());
    let ctx = art.context(GroupPolicy::Majority);
    for mode in ServeMode::ALL {
        let req = ServeRequest::new("what is the code for zz?", mode);
        let first = serve_query(&req, &ctx).unwrap();
        let again = serve_query(&req, &ctx).unwrap();
        assert_eq!(first.answer, again.answer, "{mode:?}");
        assert_eq!(first.retrieved_passage_ids, again.retrieved_passage_ids);
    }
}

#[test]
fn needle_at_depth_zero_sits_in_the_first_chunk() {
    let needle = Needle::fixed();
    for length in [240, 960, 4800] {
        let text = needle_document(&needle, length, 0.0, 3).unwrap();
        let at = text.find(&needle.text).unwrap();
        assert!(at + needle.text.len() <= 120, "needle ends at {}", at + needle.text.len());
        let text = needle_document(&needle, length, 1.0, 3).unwrap();
        assert!(text.ends_with(&needle.text));
        assert_eq!(tokenize(&text).len(), length);
    }
}

#[test]
fn needle_grid_is_deterministic() {
    let config = ModelConfig::default();
    let weights = ModelWeights::init(&config).unwrap();
    let slots = init_slots(&config, 4, 1);
    let adaptor = LoraAdaptor::init("needle", &default_targets(2), 8, 16.0, 0, &config).unwrap();
    let adaptors = HashMap::from([("needle".to_string(), adaptor)]);
    let cfg = NeedleGridConfig { lengths: vec![240, 480], depths: vec![0.0, 1.0], max_new_tokens: 4, ..NeedleGridConfig::toy() };
    let modes = [ServeMode::CompressedUnfinetuned, ServeMode::Lloco];
    let comp = CompressionConfig::toy();
    let first = needle_grid(&weights, &slots, comp, &adaptors, &modes, &cfg).unwrap();
    let again = needle_grid(&weights, &slots, comp, &adaptors, &modes, &cfg).unwrap();
    assert_eq!(first, again);
    assert_eq!(first[0].cells.len(), 4);
    assert!(first.iter().all(|g| g.cells.iter().all(|c| c.error.is_none())));
}

#[test]
fn short_contexts_still_cost_one_chunk_of_rows() {
    let config = ModelConfig::default();
    let weights = ModelWeights::init(&config).unwrap();
    let slots = init_slots(&config, 4, 1);
    let cfg = LatencyConfig { sizes: vec![50, 120, 121], runs: 1, warmups: 0, max_new_tokens: 2, ..LatencyConfig::toy() };
    let t = latency_bench(&weights, &slots, CompressionConfig::toy(), &cfg).unwrap();
    let rows = |n| t.cell(n, LatencyMode::Compressed).unwrap().prompt_rows;
    assert_eq!((rows(50), rows(120), rows(121)), (4, 4, 8));
    assert_eq!(t.cell(50, LatencyMode::Full).unwrap().prompt_rows, 50);
    assert!(t.cells.iter().all(|c| c.status == CellStatus::Ok));
}

proptest! {
    #[test]
    fn chunks_tile_the_document(n in 0usize..5000, l in 1usize..400) {
        let spans = chunk_document(n, l);
        prop_assert_eq!(spans.len(), n.div_ceil(l));
        let mut next = 0;
        for s in &spans {
            prop_assert_eq!(s.start, next);
            prop_assert!(s.end - s.start <= l && s.end > s.start);
            next = s.end;
        }
        prop_assert_eq!(next, n);
    }

    #[test]
    fn effective_window_rows_fit(w in 1usize..5000, l in 1usize..2000, k in 1usize..64) {
        prop_assume!(k <= l && k <= w);
        let eff = effective_window(w, l, k);
        let comp = CompressionConfig { chunk_length: l, summary_count: k, ..CompressionConfig::toy() };
        prop_assert!(comp.summary_rows(eff) <= w);
        prop_assert!(comp.summary_rows(eff + l) > w);
    }

    #[test]
    fn ratio_label_never_rounds_up(r in 1.0f64..200.0) {
        let label = ratio_label(r);
        let shown: f64 = label.trim_end_matches('x').parse().unwrap();
        prop_assert!(shown <= r + 1e-9);
        prop_assert!(r - shown < 1.0);
    }

    #[test]
    fn f1_is_bounded_and_symmetric(a in "[a-c ]{0,12}", b in "[a-c ]{0,12}") {
        let f = f1_score(&a, &b);
        prop_assert!((0.0..=1.0).contains(&f));
        prop_assert!((f - f1_score(&b, &a)).abs() < 1e-12);
        prop_assert_eq!(normalize_answer(&normalize_answer(&a)), normalize_answer(&a));
    }
}
