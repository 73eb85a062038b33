use std::fmt;

use ndarray::{Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelWeights};

pub const DEFAULT_RANK: usize = 8;
pub const DEFAULT_ALPHA: f64 = 16.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Query,
    Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LoraTarget {
    pub layer: usize,
    pub projection: Projection,
}

impl fmt::Display for LoraTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layers.{}.{:?}", self.layer, self.projection)
    }
}

/// Query and value projections of every layer.
pub fn default_targets(n_layers: usize) -> Vec<LoraTarget> {
    (0..n_layers)
        .flat_map(|layer| {
            [Projection::Query, Projection::Value]
                .into_iter()
                .map(move |projection| LoraTarget { layer, projection })
        })
        .collect()
}

/// One low-rank pair. The applied update to the projection is
/// `(alpha / rank) · B · A`, with `A: rank × d_in` and `B: d_out × rank`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    pub target: LoraTarget,
    pub a: Array2<f64>,
    pub b: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdaptor {
    pub adaptor_id: String,
    pub group_id: String,
    pub rank: usize,
    pub alpha: f64,
    pub pairs: Vec<LoraPair>,
}

fn projection_dims(config: &ModelConfig, target: &LoraTarget) -> Result<(usize, usize)> {
    if target.layer >= config.n_layers {
        return Err(Error::UnknownTarget(target.to_string()));
    }
    Ok((config.d_model, config.d_model))
}

impl LoraAdaptor {
    /// `A` is drawn from a small normal, `B` is zero, so the adaptor starts
    /// as an exact no-op.
    pub fn init(
        group_id: &str,
        targets: &[LoraTarget],
        rank: usize,
        alpha: f64,
        seed: u64,
        config: &ModelConfig,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::InvalidConfig("LoRA rank must be at least 1".into()));
        }
        if targets.is_empty() {
            return Err(Error::InvalidConfig("LoRA adaptor needs at least one target".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pairs = Vec::with_capacity(targets.len());
        for (i, target) in targets.iter().enumerate() {
            if targets[..i].contains(target) {
                return Err(Error::InvalidConfig(format!("duplicate target {target}")));
            }
            let (d_in, d_out) = projection_dims(config, target)?;
            let a = crate::model::normal_init(&mut rng, rank, d_in, 1.0 / (d_in as f64).sqrt());
            pairs.push(LoraPair {
                target: *target,
                a,
                b: Array2::zeros((d_out, rank)),
            });
        }
        Ok(Self {
            adaptor_id: format!("{group_id}-r{rank}-s{seed}"),
            group_id: group_id.to_string(),
            rank,
            alpha,
            pairs,
        })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn pair(&self, layer: usize, projection: Projection) -> Option<&LoraPair> {
        self.pairs
            .iter()
            .find(|p| p.target.layer == layer && p.target.projection == projection)
    }

    pub(crate) fn pair_index(&self, layer: usize, projection: Projection) -> Option<usize> {
        self.pairs
            .iter()
            .position(|p| p.target.layer == layer && p.target.projection == projection)
    }

    /// `(alpha / rank) · B (A x)` for one target.
    pub fn apply_delta(&self, target: &LoraTarget, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        let pair = self
            .pair(target.layer, target.projection)
            .ok_or_else(|| Error::UnknownTarget(target.to_string()))?;
        if x.len() != pair.a.ncols() {
            return Err(Error::ShapeMismatch(format!(
                "input of length {} for target {} expecting {}",
                x.len(),
                target,
                pair.a.ncols()
            )));
        }
        Ok(pair.b.dot(&pair.a.dot(&x)) * self.scale())
    }

    /// The dense update `(alpha / rank) · B · A` (`d_out × d_in`).
    pub fn delta_matrix(&self, target: &LoraTarget) -> Result<Array2<f64>> {
        let pair = self
            .pair(target.layer, target.projection)
            .ok_or_else(|| Error::UnknownTarget(target.to_string()))?;
        Ok(pair.b.dot(&pair.a) * self.scale())
    }

    /// Checks the adaptor against a model's projection shapes.
    pub fn check_compatible(&self, config: &ModelConfig) -> Result<()> {
        for p in &self.pairs {
            let (d_in, d_out) = projection_dims(config, &p.target)?;
            if p.a.dim() != (self.rank, d_in) || p.b.dim() != (d_out, self.rank) {
                return Err(Error::ShapeMismatch(format!(
                    "adaptor pair {} has A {:?} and B {:?}, model expects A ({}, {}) and B ({}, {})",
                    p.target,
                    p.a.dim(),
                    p.b.dim(),
                    self.rank,
                    d_in,
                    d_out,
                    self.rank
                )));
            }
        }
        Ok(())
    }

    pub fn bitwise_eq(&self, other: &LoraAdaptor) -> bool {
        let bits = |m: &Array2<f64>| m.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        self.adaptor_id == other.adaptor_id
            && self.group_id == other.group_id
            && self.rank == other.rank
            && self.alpha.to_bits() == other.alpha.to_bits()
            && self.pairs.len() == other.pairs.len()
            && self.pairs.iter().zip(&other.pairs).all(|(x, y)| {
                x.target == y.target && bits(&x.a) == bits(&y.a) && bits(&x.b) == bits(&y.b)
            })
    }
}

fn projection_mut<'a>(weights: &'a mut ModelWeights, target: &LoraTarget) -> Result<&'a mut Array2<f64>> {
    let layer = weights
        .layers
        .get_mut(target.layer)
        .ok_or_else(|| Error::UnknownTarget(target.to_string()))?;
    Ok(match target.projection {
        Projection::Query => &mut layer.wq,
        Projection::Value => &mut layer.wv,
    })
}

fn fold(adaptor: &LoraAdaptor, weights: &ModelWeights, sign: f64) -> Result<ModelWeights> {
    adaptor.check_compatible(&weights.config)?;
    let mut out = weights.clone();
    for pair in &adaptor.pairs {
        // Projections are stored input-major, so the update is transposed.
        let delta = adaptor.delta_matrix(&pair.target)?;
        let w = projection_mut(&mut out, &pair.target)?;
        w.scaled_add(sign, &delta.t());
    }
    Ok(out)
}

/// Folds the adaptor into the base projections: `W' = W + (alpha / rank) · B · A`.
pub fn merge(adaptor: &LoraAdaptor, weights: &ModelWeights) -> Result<ModelWeights> {
    fold(adaptor, weights, 1.0)
}

/// Inverse of [`merge`], up to floating-point rounding.
pub fn unmerge(merged: &ModelWeights, adaptor: &LoraAdaptor) -> Result<ModelWeights> {
    fold(adaptor, merged, -1.0)
}
