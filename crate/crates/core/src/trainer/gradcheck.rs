use ndarray::Array2;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::lora::{default_targets, LoraAdaptor};
use crate::model::{cross_entropy, normal_init, LoraGrads, ModelConfig, ModelWeights, TokenId};

/// Absolute floor under the relative-error denominator, so parameters with
/// vanishing gradients do not turn rounding noise into huge ratios.
const REL_FLOOR: f64 = 1e-8;

/// Central finite differences of `loss` at each of `indices` versus the
/// `analytic` gradient; returns the largest relative error
/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check(
    params: &[f64],
    analytic: &[f64],
    indices: &[usize],
    eps: f64,
    mut loss: impl FnMut(&[f64]) -> f64,
) -> f64 {
    assert_eq!(params.len(), analytic.len());
    let mut p = params.to_vec();
    let mut worst: f64 = 0.0;
    for &i in indices {
        let orig = p[i];
        p[i] = orig + eps;
        let up = loss(&p);
        p[i] = orig - eps;
        let down = loss(&p);
        p[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        worst = worst.max(err);
    }
    worst
}

/// Tiny model used for gradient checks: 2 layers, width 16, 2 heads.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_layers: 2,
        window: 32,
        ..ModelConfig::default()
    }
}

fn flatten(adaptor: &LoraAdaptor) -> Vec<f64> {
    adaptor
        .pairs
        .iter()
        .flat_map(|p| p.a.iter().chain(p.b.iter()).copied())
        .collect()
}

fn unflatten(adaptor: &mut LoraAdaptor, flat: &[f64]) {
    let mut off = 0;
    for p in &mut adaptor.pairs {
        for m in [&mut p.a, &mut p.b] {
            let n = m.len();
            m.as_slice_mut().expect("standard layout").copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }
}

/// Gradient check of the masked-loss path over `samples` randomly chosen
/// adaptor parameters on the tiny config. The adaptor's `B` matrices are
/// randomized so gradients on `A` are non-trivial, and the input carries a
/// prefix of raw rows like a compressed context.
pub fn adaptor_grad_check(seed: u64, samples: usize, eps: f64) -> f64 {
    let cfg = ModelConfig { seed, ..tiny_config() };
    let weights = ModelWeights::init(&cfg).expect("valid tiny config");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adaptor = LoraAdaptor::init("check", &default_targets(cfg.n_layers), 4, 8.0, seed, &cfg).expect("valid");
    for p in &mut adaptor.pairs {
        p.b = normal_init(&mut rng, p.b.nrows(), p.b.ncols(), 0.3);
    }
    let prefix = normal_init(&mut rng, 4, cfg.d_model, 1.0);
    let tokens: Vec<TokenId> = (0..12).map(|i| (i * 37 + seed as u32) % 256).collect();
    let tok = weights.embed_tokens(&tokens).expect("in range");
    let input: Array2<f64> = ndarray::concatenate(ndarray::Axis(0), &[prefix.view(), tok.view()]).expect("same width");
    let targets: Vec<(usize, TokenId)> = (0..tokens.len() - 1).map(|i| (prefix.nrows() + i, tokens[i + 1])).collect();

    let (hidden, cache) = weights.forward_cached(&input, Some(&adaptor));
    let (_, d_hidden) = cross_entropy(&weights, &hidden, &targets, None);
    let mut grads = LoraGrads::zeros_like(&adaptor);
    weights.backward(&cache, &d_hidden, Some(&adaptor), None, Some(&mut grads));
    let analytic: Vec<f64> = grads.pairs.iter().flat_map(|(a, b)| a.iter().chain(b.iter()).copied()).collect();

    let params = flatten(&adaptor);
    let picks = sample(&mut rng, params.len(), samples.min(params.len())).into_vec();
    let mut probe = adaptor.clone();
    grad_check(&params, &analytic, &picks, eps, |p| {
        unflatten(&mut probe, p);
        let (h, _) = weights.forward_cached(&input, Some(&probe));
        cross_entropy(&weights, &h, &targets, None).0
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_loss_is_exact() {
        let err = grad_check(&[0.3], &[2.5], &[0], 1e-3, |p| 2.5 * p[0] - 1.0);
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn flat_region_has_zero_gradients() {
        let err = grad_check(&[1.0, -2.0], &[0.0, 0.0], &[0, 1], 1e-4, |_| 0.0);
        assert_eq!(err, 0.0);
    }

    #[test]
    fn adaptor_gradients_match_finite_differences() {
        let err = adaptor_grad_check(7, 64, 1e-5);
        assert!(err < 1e-4, "max relative error {err}");
    }
}
