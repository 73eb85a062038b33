use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::error::Result;
use crate::io::round_slice_to_f32;

/// Parameters of one transformer block. Projections are stored input-major
/// (`d_in × d_out`) so a row vector multiplies on the left.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Array1<f64>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub mlp_norm: Array1<f64>,
    pub w_up: Array2<f64>,
    pub w_down: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    /// Token embedding table, also used as the tied output head.
    pub embed: Array2<f64>,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Array1<f64>,
}

pub(crate) fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let mut m = Array2::from_shape_fn((rows, cols), |_| dist.sample(rng));
    round_slice_to_f32(m.as_slice_mut().expect("standard layout"));
    m
}

impl ModelWeights {
    /// Scaled-normal initialization, fully determined by `config.seed`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let f = config.ffn_dim();
        let proj_std = 1.0 / (d as f64).sqrt();
        let out_std = proj_std / (2.0 * config.n_layers as f64).sqrt();
        let embed = normal_matrix(&mut rng, config.vocab_size, d, proj_std);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                attn_norm: Array1::ones(d),
                wq: normal_matrix(&mut rng, d, d, proj_std),
                wk: normal_matrix(&mut rng, d, d, proj_std),
                wv: normal_matrix(&mut rng, d, d, proj_std),
                wo: normal_matrix(&mut rng, d, d, out_std),
                mlp_norm: Array1::ones(d),
                w_up: normal_matrix(&mut rng, d, f, proj_std),
                w_down: normal_matrix(&mut rng, f, d, 1.0 / (f as f64).sqrt() / (2.0 * config.n_layers as f64).sqrt()),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            embed,
            layers,
            final_norm: Array1::ones(d),
        })
    }

    /// Same shapes, every entry zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_tensor_mut(|_, _, data| data.iter_mut().for_each(|x| *x = 0.0));
        z
    }

    /// Visits every tensor in canonical (checkpoint) order with its name and shape.
    pub fn for_each_tensor(&self, mut f: impl FnMut(&str, &[usize], &[f64])) {
        f("embed", self.embed.shape(), self.embed.as_slice().unwrap());
        for (i, l) in self.layers.iter().enumerate() {
            let p = |n: &str| format!("layers.{i}.{n}");
            f(&p("attn_norm"), l.attn_norm.shape(), l.attn_norm.as_slice().unwrap());
            f(&p("wq"), l.wq.shape(), l.wq.as_slice().unwrap());
            f(&p("wk"), l.wk.shape(), l.wk.as_slice().unwrap());
            f(&p("wv"), l.wv.shape(), l.wv.as_slice().unwrap());
            f(&p("wo"), l.wo.shape(), l.wo.as_slice().unwrap());
            f(&p("mlp_norm"), l.mlp_norm.shape(), l.mlp_norm.as_slice().unwrap());
            f(&p("w_up"), l.w_up.shape(), l.w_up.as_slice().unwrap());
            f(&p("w_down"), l.w_down.shape(), l.w_down.as_slice().unwrap());
        }
        f("final_norm", self.final_norm.shape(), self.final_norm.as_slice().unwrap());
    }

    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&str, &[usize], &mut [f64])) {
        let shape = self.embed.shape().to_vec();
        f("embed", &shape, self.embed.as_slice_mut().unwrap());
        for (i, l) in self.layers.iter_mut().enumerate() {
            macro_rules! visit {
                ($field:ident) => {{
                    let shape = l.$field.shape().to_vec();
                    f(
                        &format!("layers.{i}.{}", stringify!($field)),
                        &shape,
                        l.$field.as_slice_mut().unwrap(),
                    );
                }};
            }
            visit!(attn_norm);
            visit!(wq);
            visit!(wk);
            visit!(wv);
            visit!(wo);
            visit!(mlp_norm);
            visit!(w_up);
            visit!(w_down);
        }
        let shape = self.final_norm.shape().to_vec();
        f("final_norm", &shape, self.final_norm.as_slice_mut().unwrap());
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(|_, _, d| n += d.len());
        n
    }

    /// Bitwise equality of every parameter.
    pub fn bitwise_eq(&self, other: &ModelWeights) -> bool {
        let mut a = Vec::new();
        self.for_each_tensor(|_, _, d| a.extend(d.iter().map(|x| x.to_bits())));
        let mut b = Vec::new();
        other.for_each_tensor(|_, _, d| b.extend(d.iter().map(|x| x.to_bits())));
        self.config == other.config && a == b
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_f32_representable() {
        let cfg = ModelConfig::default();
        let a = ModelWeights::init(&cfg).unwrap();
        let b = ModelWeights::init(&cfg).unwrap();
        assert!(a.bitwise_eq(&b));
        a.for_each_tensor(|_, _, d| {
            assert!(d.iter().all(|&x| x == (x as f32) as f64));
        });
    }

    #[test]
    fn different_seed_differs() {
        let a = ModelWeights::init(&ModelConfig::default()).unwrap();
        let b = ModelWeights::init(&ModelConfig {
            seed: 1,
            ..ModelConfig::default()
        })
        .unwrap();
        assert!(!a.bitwise_eq(&b));
    }

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = ModelConfig {
            n_heads: 5,
            ..ModelConfig::default()
        };
        assert!(ModelWeights::init(&cfg).is_err());
    }
}
