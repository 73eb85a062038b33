use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::optim::clip_global_norm;
use super::sequence::{build_training_sequence, TrainingSequence};
use super::{lr_at, AdamW, StepLog, SummarySource, TrainConfig, TrainingExample};
use crate::encoder::SummaryEmbeddings;
use crate::error::{Error, Result};
use crate::io::round_slice_to_f32;
use crate::lora::{default_targets, LoraAdaptor};
use crate::model::{cross_entropy, LoraGrads, ModelWeights};

pub const COMBINED_GROUP: &str = "combined";

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub adaptor: LoraAdaptor,
    pub log: Vec<StepLog>,
    /// Mean masked cross-entropy over the training set before the first step.
    pub initial_loss: f64,
    /// The same quantity after the last step.
    pub final_loss: f64,
}

fn build_sequences(
    weights: &ModelWeights,
    examples: &[TrainingExample],
    source: &dyn SummarySource,
) -> Result<Vec<TrainingSequence>> {
    let mut cache: HashMap<&str, Vec<SummaryEmbeddings>> = HashMap::new();
    let cfg = &weights.config;
    examples
        .iter()
        .map(|ex| {
            if !cache.contains_key(ex.doc_id.as_str()) {
                cache.insert(&ex.doc_id, source.summaries(&ex.doc_id)?);
            }
            build_training_sequence(&cache[ex.doc_id.as_str()], &ex.question, &ex.answer, cfg.d_model, cfg.window)
        })
        .collect()
}

/// Masked loss of one sequence, accumulating adaptor gradients (scaled by
/// `weight`) when `grads` is given.
fn sequence_loss(
    weights: &ModelWeights,
    adaptor: &LoraAdaptor,
    seq: &TrainingSequence,
    grads: Option<(&mut LoraGrads, f64)>,
) -> Result<f64> {
    let targets = seq.targets();
    if targets.is_empty() {
        return Ok(0.0);
    }
    let input = weights.assemble_input(&seq.prefix, &seq.tokens)?;
    let (hidden, cache) = weights.forward_cached(&input, Some(adaptor));
    let (loss, mut d_hidden) = cross_entropy(weights, &hidden, &targets, None);
    if let Some((g, w)) = grads {
        d_hidden *= w;
        weights.backward(&cache, &d_hidden, Some(adaptor), None, Some(g));
    }
    Ok(loss)
}

fn mean_loss(weights: &ModelWeights, adaptor: &LoraAdaptor, seqs: &[TrainingSequence]) -> Result<f64> {
    if seqs.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for s in seqs {
        total += sequence_loss(weights, adaptor, s, None)?;
    }
    Ok(total / seqs.len() as f64)
}

/// Trains one adaptor on `examples` over frozen base weights and frozen,
/// precomputed summaries.
pub fn train_group(
    weights: &ModelWeights,
    group_id: &str,
    examples: &[TrainingExample],
    source: &dyn SummarySource,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if let Some(other) = examples.iter().find(|e| e.group_id != group_id) {
        return Err(Error::MixedGroups(vec![group_id.to_string(), other.group_id.clone()]));
    }
    fit(weights, group_id, examples, source, cfg)
}

fn fit(
    weights: &ModelWeights,
    group_id: &str,
    examples: &[TrainingExample],
    source: &dyn SummarySource,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if cfg.batch_size == 0 || cfg.grad_accum == 0 {
        return Err(Error::InvalidConfig("batch size and accumulation must be positive".into()));
    }
    let seqs = build_sequences(weights, examples, source)?;
    let fresh = fresh_adaptor(weights, group_id, cfg)?;
    let initial_loss = mean_loss(weights, &fresh, &seqs)?;
    let total = cfg.total_steps(seqs.len());
    let (adaptor, log) = optimize(weights, fresh, &seqs, cfg, total)?;
    let final_loss = if total == 0 { initial_loss } else { mean_loss(weights, &adaptor, &seqs)? };
    if !final_loss.is_finite() {
        return Err(Error::Diverged { step: total, loss: final_loss });
    }
    Ok(TrainOutcome {
        adaptor,
        log,
        initial_loss,
        final_loss,
    })
}

pub(crate) fn fresh_adaptor(weights: &ModelWeights, group_id: &str, cfg: &TrainConfig) -> Result<LoraAdaptor> {
    LoraAdaptor::init(
        group_id,
        &default_targets(weights.config.n_layers),
        cfg.rank,
        cfg.alpha,
        cfg.seed,
        &weights.config,
    )
}

/// Runs `total` optimizer steps over prepared sequences. Each step takes the
/// next `batch_size * grad_accum` sequences of a seeded per-epoch shuffle.
pub(crate) fn optimize(
    weights: &ModelWeights,
    mut adaptor: LoraAdaptor,
    seqs: &[TrainingSequence],
    cfg: &TrainConfig,
    total: usize,
) -> Result<(LoraAdaptor, Vec<StepLog>)> {
    if cfg.batch_size == 0 || cfg.grad_accum == 0 {
        return Err(Error::InvalidConfig("batch size and accumulation must be positive".into()));
    }
    if seqs.is_empty() && total > 0 {
        return Err(Error::InvalidConfig("no training sequences".into()));
    }
    let per_step = cfg.batch_size * cfg.grad_accum;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_f1ae);
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut log = Vec::with_capacity(total);
    let started = Instant::now();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    for step in 0..total {
        if cursor >= order.len() {
            order = (0..seqs.len()).collect();
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch: Vec<usize> = order[cursor..(cursor + per_step).min(order.len())].to_vec();
        cursor += batch.len();

        let mut grads = LoraGrads::zeros_like(&adaptor);
        let w = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for &i in &batch {
            loss += w * sequence_loss(weights, &adaptor, &seqs[i], Some((&mut grads, w)))?;
        }
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        if let Some(max) = cfg.grad_clip {
            let mut slices: Vec<&mut [f64]> = grads
                .pairs
                .iter_mut()
                .flat_map(|(a, b)| [a.as_slice_mut().expect("standard"), b.as_slice_mut().expect("standard")])
                .collect();
            clip_global_norm(&mut slices, max);
        }
        let lr = lr_at(step + 1, cfg, total);
        opt.begin_step();
        for (p, (pair, (ga, gb))) in adaptor.pairs.iter_mut().zip(&grads.pairs).enumerate() {
            for (j, (param, grad)) in [(&mut pair.a, ga), (&mut pair.b, gb)].into_iter().enumerate() {
                let ps = param.as_slice_mut().expect("standard layout");
                opt.update(2 * p + j, lr, ps, grad.as_slice().expect("standard layout"));
                round_slice_to_f32(ps);
            }
        }
        log.push(StepLog {
            step: step + 1,
            loss,
            lr,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        });
    }
    Ok((adaptor, log))
}

/// Trains a fresh adaptor for exactly `steps` steps on prepared sequences,
/// whatever their prefix is. Used to compare prompt layouts at equal work.
pub fn train_sequences(
    weights: &ModelWeights,
    group_id: &str,
    seqs: &[TrainingSequence],
    cfg: &TrainConfig,
    steps: usize,
) -> Result<(LoraAdaptor, Vec<StepLog>)> {
    optimize(weights, fresh_adaptor(weights, group_id, cfg)?, seqs, cfg, steps)
}

/// Balanced union of groups: each group with a cap keeps at most that many
/// examples, chosen by a seeded shuffle; selection keeps input order.
pub fn sample_combined(
    examples: &[TrainingExample],
    caps: &BTreeMap<String, usize>,
    seed: u64,
) -> Vec<TrainingExample> {
    let mut by_group: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, e) in examples.iter().enumerate() {
        by_group.entry(&e.group_id).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    for (group, mut idx) in by_group {
        match caps.get(group) {
            Some(&cap) if cap < idx.len() => {
                idx.shuffle(&mut rng);
                idx.truncate(cap);
                keep.extend(idx);
            }
            _ => keep.extend(idx),
        }
    }
    keep.sort_unstable();
    keep.into_iter().map(|i| examples[i].clone()).collect()
}

/// One general adaptor over the capped union of every group's examples.
pub fn train_combined(
    weights: &ModelWeights,
    examples: &[TrainingExample],
    caps: &BTreeMap<String, usize>,
    source: &dyn SummarySource,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let sampled = sample_combined(examples, caps, cfg.seed);
    fit(weights, COMBINED_GROUP, &sampled, source, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{CompressionConfig, ContextEncoder};
    use crate::model::{tokenize, ModelConfig};
    use crate::trainer::init_slots;

    fn tiny() -> (ModelWeights, HashMap<String, Vec<SummaryEmbeddings>>, Vec<TrainingExample>) {
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            window: 64,
            ..ModelConfig::default()
        };
        let w = ModelWeights::init(&cfg).unwrap();
        let comp = CompressionConfig {
            chunk_length: 12,
            summary_count: 2,
            max_summary_rows: 8,
        };
        let slots = init_slots(&cfg, comp.summary_count, 1);
        let enc = ContextEncoder::new(&w, &slots, comp).unwrap();
        let mut source = HashMap::new();
        let mut examples = Vec::new();
        for (i, text) in ["the code for ab is 123. xx", "the code for cd is 456. yy"].iter().enumerate() {
            let doc = format!("d{i}");
            source.insert(doc.clone(), enc.compress_document(&doc, &tokenize(text)).unwrap());
            examples.push(TrainingExample {
                group_id: "g".into(),
                doc_id: doc,
                question: format!("code {i}?"),
                answer: ["123", "456"][i].into(),
            });
        }
        (w, source, examples)
    }

    #[test]
    fn zero_steps_returns_init() {
        let (w, source, examples) = tiny();
        let cfg = TrainConfig {
            max_steps: Some(0),
            ..TrainConfig::toy()
        };
        let out = train_group(&w, "g", &examples, &source, &cfg).unwrap();
        let init = LoraAdaptor::init("g", &default_targets(2), cfg.rank, cfg.alpha, cfg.seed, &w.config).unwrap();
        assert!(out.adaptor.bitwise_eq(&init));
        assert!(out.log.is_empty());
    }

    #[test]
    fn deterministic_frozen_base_and_loss_drops() {
        let (w, source, examples) = tiny();
        let before = w.clone();
        let cfg = TrainConfig {
            batch_size: 1,
            grad_accum: 1,
            epochs: 20,
            ..TrainConfig::toy()
        };
        let a = train_group(&w, "g", &examples, &source, &cfg).unwrap();
        let b = train_group(&w, "g", &examples, &source, &cfg).unwrap();
        assert!(a.adaptor.bitwise_eq(&b.adaptor));
        assert!(w.bitwise_eq(&before));
        assert_eq!(a.log.len(), 40);
        assert!(a.final_loss < a.initial_loss, "{} !< {}", a.final_loss, a.initial_loss);
    }

    #[test]
    fn rejects_foreign_examples() {
        let (w, source, mut examples) = tiny();
        examples[1].group_id = "h".into();
        assert!(matches!(
            train_group(&w, "g", &examples, &source, &TrainConfig::toy()),
            Err(Error::MixedGroups(_))
        ));
    }

    #[test]
    fn sampling_respects_caps_and_seed() {
        let mk = |g: &str, i: usize| TrainingExample {
            group_id: g.into(),
            doc_id: format!("{g}{i}"),
            question: format!("q{i}"),
            answer: "a".into(),
        };
        let mut examples: Vec<_> = (0..5).map(|i| mk("g1", i)).collect();
        examples.extend((0..7).map(|i| mk("g2", i)));
        let caps = BTreeMap::from([("g1".to_string(), 2), ("g2".to_string(), usize::MAX)]);
        let s = sample_combined(&examples, &caps, 3);
        assert_eq!(s.iter().filter(|e| e.group_id == "g1").count(), 2);
        assert_eq!(s.iter().filter(|e| e.group_id == "g2").count(), 7);
        assert_eq!(s, sample_combined(&examples, &caps, 3));
    }
}
