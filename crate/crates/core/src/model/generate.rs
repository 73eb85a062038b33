//! Incremental decoding with a per-request key/value cache.

use ndarray::{s, Array1, Array2, Axis, Zip};
use serde::{Deserialize, Serialize};

use super::forward::{lora_ref, Rope};
use super::{DecoderOutput, EmbeddingSequence, ModelWeights, TokenId};
use crate::error::{Error, Result};
use crate::lora::{LoraAdaptor, Projection};

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerateMode {
    #[default]
    Greedy,
}

/// Decoding state for one request. Keys are cached after rotation.
pub struct DecodeState<'a> {
    weights: &'a ModelWeights,
    adaptor: Option<&'a LoraAdaptor>,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

fn norm_rows(x: &Array2<f64>, gain: &Array1<f64>) -> Array2<f64> {
    let d = x.ncols() as f64;
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d;
        let r = 1.0 / (ms + NORM_EPS).sqrt();
        Zip::from(&mut row).and(gain).for_each(|v, &g| *v *= r * g);
    }
    y
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (0.797_884_560_802_865_4 * (u + 0.044_715 * u * u * u)).tanh())
}

impl<'a> DecodeState<'a> {
    pub fn new(weights: &'a ModelWeights, adaptor: Option<&'a LoraAdaptor>) -> Result<Self> {
        if let Some(a) = adaptor {
            a.check_compatible(&weights.config)?;
        }
        let n = weights.config.n_layers;
        Ok(Self {
            weights,
            adaptor,
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            len: 0,
        })
    }

    /// Number of positions already consumed.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Consumes new input rows (positions `len..len + m`) and returns their
    /// outputs.
    pub fn feed(&mut self, rows: &Array2<f64>) -> Result<DecoderOutput> {
        let hidden = self.feed_hidden(rows)?;
        let logits = hidden.dot(&self.weights.embed.t());
        Ok(DecoderOutput {
            logits,
            final_hidden: hidden,
        })
    }

    /// Like [`DecodeState::feed`] but only computes logits for the last row.
    pub fn feed_last(&mut self, rows: &Array2<f64>) -> Result<Array1<f64>> {
        let hidden = self.feed_hidden(rows)?;
        let last = hidden.row(hidden.nrows() - 1);
        Ok(self.weights.embed.dot(&last))
    }

    fn feed_hidden(&mut self, rows: &Array2<f64>) -> Result<Array2<f64>> {
        let w = self.weights;
        let cfg = &w.config;
        let m = rows.nrows();
        if m == 0 {
            return Err(Error::InvalidConfig("decode step needs at least one row".into()));
        }
        if rows.ncols() != cfg.d_model {
            return Err(Error::ShapeMismatch(format!(
                "rows are {} wide, model width is {}",
                rows.ncols(),
                cfg.d_model
            )));
        }
        cfg.check_len(self.len + m)?;
        let rope = Rope::new(cfg, self.len, m);
        let d = cfg.d_model;
        let n_heads = cfg.n_heads;
        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let start = self.len;
        let mut x = rows.clone();
        for (li, lw) in w.layers.iter().enumerate() {
            let a = norm_rows(&x, &lw.attn_norm);
            let mut q = a.dot(&lw.wq);
            if let Some(l) = lora_ref(self.adaptor, li, Projection::Query) {
                q += &(a.dot(&l.a.t()).dot(&l.b.t()) * l.scale);
            }
            let mut k = a.dot(&lw.wk);
            let mut v = a.dot(&lw.wv);
            if let Some(l) = lora_ref(self.adaptor, li, Projection::Value) {
                v += &(a.dot(&l.a.t()).dot(&l.b.t()) * l.scale);
            }
            rope.apply(&mut q, n_heads, false);
            rope.apply(&mut k, n_heads, false);
            let keys = &mut self.keys[li];
            let values = &mut self.values[li];
            keys.extend(k.iter());
            values.extend(v.iter());
            let mut o = Array2::<f64>::zeros((m, d));
            let mut scores = vec![0.0; start + m];
            for i in 0..m {
                let visible = start + i + 1;
                for h in 0..n_heads {
                    let qh = q.slice(s![i, h * hd..(h + 1) * hd]);
                    let mut max = f64::NEG_INFINITY;
                    for (j, sc) in scores.iter_mut().enumerate().take(visible) {
                        let kr = &keys[j * d + h * hd..j * d + (h + 1) * hd];
                        let mut dot = 0.0;
                        for t in 0..hd {
                            dot += qh[t] * kr[t];
                        }
                        *sc = dot * scale;
                        max = max.max(*sc);
                    }
                    let mut sum = 0.0;
                    for sc in scores.iter_mut().take(visible) {
                        *sc = (*sc - max).exp();
                        sum += *sc;
                    }
                    let mut out = o.slice_mut(s![i, h * hd..(h + 1) * hd]);
                    for (j, &p) in scores.iter().enumerate().take(visible) {
                        let vr = &values[j * d + h * hd..j * d + (h + 1) * hd];
                        let p = p / sum;
                        for t in 0..hd {
                            out[t] += p * vr[t];
                        }
                    }
                }
            }
            x = &x + &o.dot(&lw.wo);
            let b = norm_rows(&x, &lw.mlp_norm);
            let hmid = b.dot(&lw.w_up).mapv(gelu);
            x = &x + &hmid.dot(&lw.w_down);
        }
        self.len += m;
        Ok(norm_rows(&x, &w.final_norm))
    }
}

/// Greedy choice; ties resolve to the lowest token id.
pub(crate) fn argmax(logits: &Array1<f64>) -> TokenId {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as TokenId
}

impl ModelWeights {
    /// Greedy decoding of exactly `max_new` tokens after `[prefix; prompt]`.
    pub fn generate(
        &self,
        prefix: &EmbeddingSequence,
        prompt: &[TokenId],
        max_new: usize,
        mode: GenerateMode,
        adaptor: Option<&LoraAdaptor>,
    ) -> Result<Vec<TokenId>> {
        self.generate_until(prefix, prompt, max_new, mode, adaptor, None)
    }

    /// Greedy decoding that also stops right after emitting `stop`.
    pub fn generate_until(
        &self,
        prefix: &EmbeddingSequence,
        prompt: &[TokenId],
        max_new: usize,
        mode: GenerateMode,
        adaptor: Option<&LoraAdaptor>,
        stop: Option<TokenId>,
    ) -> Result<Vec<TokenId>> {
        let GenerateMode::Greedy = mode;
        let context = prefix.len() + prompt.len();
        self.config.check_len(context + max_new)?;
        let input = self.assemble_input(prefix, prompt)?;
        if max_new == 0 {
            return Ok(Vec::new());
        }
        if context == 0 {
            return Err(Error::InvalidConfig("generation needs a non-empty prefix or prompt".into()));
        }
        let mut state = DecodeState::new(self, adaptor)?;
        let mut logits = state.feed_last(&input)?;
        let mut out = Vec::with_capacity(max_new);
        loop {
            let tok = argmax(&logits);
            out.push(tok);
            if out.len() == max_new || Some(tok) == stop {
                break;
            }
            let row = self.embed.row(tok as usize).insert_axis(Axis(0)).to_owned();
            logits = state.feed_last(&row)?;
        }
        Ok(out)
    }
}
