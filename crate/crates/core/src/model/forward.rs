//! Forward pass, activation cache, and hand-written backward pass.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use super::{EmbeddingSequence, ModelConfig, ModelWeights, LayerWeights, TokenId};
use crate::error::{Error, Result};
use crate::lora::{LoraAdaptor, Projection};

const NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderOutput {
    /// One `vocab_size` row per input position.
    pub logits: Array2<f64>,
    /// Final-normed hidden state per input position (`d_model` wide).
    pub final_hidden: Array2<f64>,
}

impl DecoderOutput {
    pub fn len(&self) -> usize {
        self.final_hidden.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Final hidden rows at `positions`, in the order given.
    pub fn hidden_at(&self, positions: &[usize]) -> Result<EmbeddingSequence> {
        hidden_rows(&self.final_hidden, positions).map(EmbeddingSequence::summaries)
    }
}

pub(crate) fn hidden_rows(hidden: &Array2<f64>, positions: &[usize]) -> Result<Array2<f64>> {
    let n = hidden.nrows();
    if let Some(&bad) = positions.iter().find(|&&p| p >= n) {
        return Err(Error::OutOfRange { index: bad, len: n });
    }
    Ok(hidden.select(Axis(0), positions))
}

/// Cosine/sine tables for a contiguous run of positions.
pub(crate) struct Rope {
    cos: Array2<f64>,
    sin: Array2<f64>,
}

impl Rope {
    pub(crate) fn new(config: &ModelConfig, start: usize, len: usize) -> Self {
        let half = config.head_dim() / 2;
        let hd = config.head_dim() as f64;
        let mut cos = Array2::zeros((len, half));
        let mut sin = Array2::zeros((len, half));
        for i in 0..len {
            let pos = (start + i) as f64;
            for j in 0..half {
                let freq = config.rope_base.powf(-((2 * j) as f64) / hd);
                let (s, c) = (pos * freq).sin_cos();
                cos[[i, j]] = c;
                sin[[i, j]] = s;
            }
        }
        Self { cos, sin }
    }

    /// Rotates every head's consecutive pairs in place; `inverse` undoes it
    /// (and is also the backward pass of the rotation).
    pub(crate) fn apply(&self, m: &mut Array2<f64>, n_heads: usize, inverse: bool) {
        let half = self.cos.ncols();
        let hd = 2 * half;
        let sign = if inverse { -1.0 } else { 1.0 };
        for (i, mut row) in m.rows_mut().into_iter().enumerate() {
            for h in 0..n_heads {
                for j in 0..half {
                    let c = self.cos[[i, j]];
                    let s = sign * self.sin[[i, j]];
                    let a = h * hd + 2 * j;
                    let x0 = row[a];
                    let x1 = row[a + 1];
                    row[a] = x0 * c - x1 * s;
                    row[a + 1] = x0 * s + x1 * c;
                }
            }
        }
    }
}

fn rms_norm(x: &Array2<f64>, gain: &Array1<f64>) -> (Array2<f64>, Vec<f64>) {
    let d = x.ncols() as f64;
    let mut y = x.clone();
    let mut inv = Vec::with_capacity(x.nrows());
    for mut row in y.rows_mut() {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d;
        let r = 1.0 / (ms + NORM_EPS).sqrt();
        inv.push(r);
        Zip::from(&mut row).and(gain).for_each(|v, &g| *v *= r * g);
    }
    (y, inv)
}

fn rms_norm_backward(
    x: &Array2<f64>,
    gain: &Array1<f64>,
    inv: &[f64],
    dy: &Array2<f64>,
    dgain: Option<&mut Array1<f64>>,
) -> Array2<f64> {
    let d = x.ncols() as f64;
    let mut dx = Array2::zeros(x.raw_dim());
    for (i, ((xr, dyr), mut dxr)) in x
        .rows()
        .into_iter()
        .zip(dy.rows())
        .zip(dx.rows_mut())
        .enumerate()
    {
        let r = inv[i];
        let mut dot = 0.0;
        for j in 0..xr.len() {
            dot += gain[j] * dyr[j] * xr[j];
        }
        let k = r * r * r * dot / d;
        for j in 0..xr.len() {
            dxr[j] = r * gain[j] * dyr[j] - xr[j] * k;
        }
    }
    if let Some(dg) = dgain {
        for (i, (xr, dyr)) in x.rows().into_iter().zip(dy.rows()).enumerate() {
            let r = inv[i];
            Zip::from(&mut *dg).and(&xr).and(&dyr).for_each(|g, &xv, &dv| *g += dv * xv * r);
        }
    }
    dx
}

#[inline]
fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_K * u * u * u)).tanh())
}

#[inline]
fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_K * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * u * u)
}

/// Borrowed low-rank pair with its scale.
#[derive(Clone, Copy)]
pub(crate) struct LoraRef<'a> {
    pub a: &'a Array2<f64>,
    pub b: &'a Array2<f64>,
    pub scale: f64,
    pub index: usize,
}

impl LoraRef<'_> {
    fn delta(&self, x: &ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.a.t()).dot(&self.b.t()) * self.scale
    }
}

pub(crate) fn lora_ref(adaptor: Option<&LoraAdaptor>, layer: usize, projection: Projection) -> Option<LoraRef<'_>> {
    let adaptor = adaptor?;
    let index = adaptor.pair_index(layer, projection)?;
    let pair = &adaptor.pairs[index];
    Some(LoraRef {
        a: &pair.a,
        b: &pair.b,
        scale: adaptor.scale(),
        index,
    })
}

pub(crate) struct LayerCache {
    x_in: Array2<f64>,
    attn_inv: Vec<f64>,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    o: Array2<f64>,
    x_mid: Array2<f64>,
    mlp_inv: Vec<f64>,
    b: Array2<f64>,
    u: Array2<f64>,
    h: Array2<f64>,
}

pub(crate) struct ForwardCache {
    layers: Vec<LayerCache>,
    x_final: Array2<f64>,
    final_inv: Vec<f64>,
    rope: Rope,
}

/// Causal softmax attention over full (non-incremental) sequences.
fn attention(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>, n_heads: usize) -> (Array2<f64>, Vec<Array2<f64>>) {
    let n = q.nrows();
    let d = q.ncols();
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut o = Array2::zeros((n, d));
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = s![.., h * hd..(h + 1) * hd];
        let qh = q.slice(cols);
        let kh = k.slice(cols);
        let vh = v.slice(cols);
        let mut p = qh.dot(&kh.t());
        for (i, mut row) in p.rows_mut().into_iter().enumerate() {
            let mut max = f64::NEG_INFINITY;
            for j in 0..=i {
                row[j] *= scale;
                max = max.max(row[j]);
            }
            let mut sum = 0.0;
            for j in 0..=i {
                row[j] = (row[j] - max).exp();
                sum += row[j];
            }
            for j in 0..=i {
                row[j] /= sum;
            }
            for j in i + 1..n {
                row[j] = 0.0;
            }
        }
        o.slice_mut(cols).assign(&p.dot(&vh));
        probs.push(p);
    }
    (o, probs)
}

impl ModelWeights {
    /// Embedding rows for `tokens`.
    pub fn embed_tokens(&self, tokens: &[TokenId]) -> Result<Array2<f64>> {
        let v = self.config.vocab_size;
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= v) {
            return Err(Error::OutOfRange {
                index: bad as usize,
                len: v,
            });
        }
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        Ok(self.embed.select(Axis(0), &ids))
    }

    /// `[prefix rows; embed(tokens)]`, checked against the window.
    pub fn assemble_input(&self, prefix: &EmbeddingSequence, tokens: &[TokenId]) -> Result<Array2<f64>> {
        let d = self.config.d_model;
        if !prefix.is_empty() && prefix.dim() != d {
            return Err(Error::ShapeMismatch(format!(
                "prefix rows are {} wide, model width is {d}",
                prefix.dim()
            )));
        }
        self.config.check_len(prefix.len() + tokens.len())?;
        let tok = self.embed_tokens(tokens)?;
        if prefix.is_empty() {
            return Ok(tok);
        }
        Ok(ndarray::concatenate(Axis(0), &[prefix.rows().view(), tok.view()]).expect("widths checked"))
    }

    /// Full causal forward over `[prefix; tokens]`, optionally through an adaptor.
    pub fn forward(
        &self,
        prefix: &EmbeddingSequence,
        tokens: &[TokenId],
        adaptor: Option<&LoraAdaptor>,
    ) -> Result<DecoderOutput> {
        let input = self.assemble_input(prefix, tokens)?;
        self.forward_embeddings(&input, adaptor)
    }

    /// Forward over raw input embedding rows (positions `0..n`).
    pub fn forward_embeddings(&self, input: &Array2<f64>, adaptor: Option<&LoraAdaptor>) -> Result<DecoderOutput> {
        self.check_input(input, adaptor)?;
        let (hidden, cache) = self.forward_cached(input, adaptor);
        drop(cache);
        let logits = hidden.dot(&self.embed.t());
        Ok(DecoderOutput {
            logits,
            final_hidden: hidden,
        })
    }

    /// Final hidden states only, skipping the output head.
    pub fn forward_hidden(&self, input: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(input, None)?;
        Ok(self.forward_cached(input, None).0)
    }

    pub(crate) fn check_input(&self, input: &Array2<f64>, adaptor: Option<&LoraAdaptor>) -> Result<()> {
        if input.ncols() != self.config.d_model {
            return Err(Error::ShapeMismatch(format!(
                "input rows are {} wide, model width is {}",
                input.ncols(),
                self.config.d_model
            )));
        }
        self.config.check_len(input.nrows())?;
        if let Some(a) = adaptor {
            a.check_compatible(&self.config)?;
        }
        Ok(())
    }

    fn layer_forward(
        &self,
        index: usize,
        x: Array2<f64>,
        rope: &Rope,
        adaptor: Option<&LoraAdaptor>,
    ) -> (Array2<f64>, LayerCache) {
        let lw = &self.layers[index];
        let n_heads = self.config.n_heads;
        let (a, attn_inv) = rms_norm(&x, &lw.attn_norm);
        let mut q = a.dot(&lw.wq);
        if let Some(l) = lora_ref(adaptor, index, Projection::Query) {
            q += &l.delta(&a.view());
        }
        let mut k = a.dot(&lw.wk);
        let mut v = a.dot(&lw.wv);
        if let Some(l) = lora_ref(adaptor, index, Projection::Value) {
            v += &l.delta(&a.view());
        }
        rope.apply(&mut q, n_heads, false);
        rope.apply(&mut k, n_heads, false);
        let (o, probs) = attention(&q, &k, &v, n_heads);
        let x_mid = &x + &o.dot(&lw.wo);
        let (b, mlp_inv) = rms_norm(&x_mid, &lw.mlp_norm);
        let u = b.dot(&lw.w_up);
        let h = u.mapv(gelu);
        let x_out = &x_mid + &h.dot(&lw.w_down);
        (
            x_out,
            LayerCache {
                x_in: x,
                attn_inv,
                a,
                q,
                k,
                v,
                probs,
                o,
                x_mid,
                mlp_inv,
                b,
                u,
                h,
            },
        )
    }

    /// Forward keeping every activation needed by [`ModelWeights::backward`].
    /// Returns the final-normed hidden states. Input must be pre-checked.
    pub(crate) fn forward_cached(&self, input: &Array2<f64>, adaptor: Option<&LoraAdaptor>) -> (Array2<f64>, ForwardCache) {
        let rope = Rope::new(&self.config, 0, input.nrows());
        let mut x = input.clone();
        let mut layers = Vec::with_capacity(self.layers.len());
        for i in 0..self.layers.len() {
            let (next, cache) = self.layer_forward(i, x, &rope, adaptor);
            layers.push(cache);
            x = next;
        }
        let (hidden, final_inv) = rms_norm(&x, &self.final_norm);
        (
            hidden,
            ForwardCache {
                layers,
                x_final: x,
                final_inv,
                rope,
            },
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_backward(
        &self,
        index: usize,
        c: &LayerCache,
        dx: Array2<f64>,
        rope: &Rope,
        adaptor: Option<&LoraAdaptor>,
        mut gw: Option<&mut LayerWeights>,
        mut lg: Option<&mut LoraGrads>,
    ) -> Array2<f64> {
        let lw = &self.layers[index];
        let n_heads = self.config.n_heads;

        // MLP branch.
        let dh = dx.dot(&lw.w_down.t());
        if let Some(g) = gw.as_deref_mut() {
            g.w_down += &c.h.t().dot(&dx);
        }
        let mut du = dh;
        Zip::from(&mut du).and(&c.u).for_each(|d, &u| *d *= gelu_grad(u));
        if let Some(g) = gw.as_deref_mut() {
            g.w_up += &c.b.t().dot(&du);
        }
        let db = du.dot(&lw.w_up.t());
        let dx_mid = dx
            + rms_norm_backward(
                &c.x_mid,
                &lw.mlp_norm,
                &c.mlp_inv,
                &db,
                gw.as_deref_mut().map(|g| &mut g.mlp_norm),
            );

        // Attention branch.
        let d_o = dx_mid.dot(&lw.wo.t());
        if let Some(g) = gw.as_deref_mut() {
            g.wo += &c.o.t().dot(&dx_mid);
        }
        let n = c.q.nrows();
        let d = c.q.ncols();
        let hd = d / n_heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut dq = Array2::zeros((n, d));
        let mut dk = Array2::zeros((n, d));
        let mut dv = Array2::zeros((n, d));
        for h in 0..n_heads {
            let cols = s![.., h * hd..(h + 1) * hd];
            let p = &c.probs[h];
            let doh = d_o.slice(cols);
            dv.slice_mut(cols).assign(&p.t().dot(&doh));
            let mut ds = doh.dot(&c.v.slice(cols).t());
            for (i, (mut dsr, pr)) in ds.rows_mut().into_iter().zip(p.rows()).enumerate() {
                let mut dot = 0.0;
                for j in 0..=i {
                    dot += dsr[j] * pr[j];
                }
                for j in 0..=i {
                    dsr[j] = pr[j] * (dsr[j] - dot) * scale;
                }
                for j in i + 1..n {
                    dsr[j] = 0.0;
                }
            }
            dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
        }
        rope.apply(&mut dq, n_heads, true);
        rope.apply(&mut dk, n_heads, true);

        let mut da = dq.dot(&lw.wq.t()) + dk.dot(&lw.wk.t()) + dv.dot(&lw.wv.t());
        if let Some(g) = gw.as_deref_mut() {
            g.wq += &c.a.t().dot(&dq);
            g.wk += &c.a.t().dot(&dk);
            g.wv += &c.a.t().dot(&dv);
        }
        for (projection, dproj) in [(Projection::Query, &dq), (Projection::Value, &dv)] {
            if let Some(l) = lora_ref(adaptor, index, projection) {
                let u = dproj.dot(l.b); // n × r
                da.scaled_add(l.scale, &u.dot(l.a));
                if let Some(lg) = lg.as_deref_mut() {
                    let t = c.a.dot(&l.a.t()); // n × r
                    let (ga, gb) = &mut lg.pairs[l.index];
                    gb.scaled_add(l.scale, &dproj.t().dot(&t));
                    ga.scaled_add(l.scale, &u.t().dot(&c.a));
                }
            }
        }
        dx_mid
            + rms_norm_backward(
                &c.x_in,
                &lw.attn_norm,
                &c.attn_inv,
                &da,
                gw.map(|g| &mut g.attn_norm),
            )
    }

    /// Backpropagates a gradient on the final hidden states to the input
    /// rows, accumulating parameter gradients into `base` and/or `lora`.
    pub(crate) fn backward(
        &self,
        cache: &ForwardCache,
        d_hidden: &Array2<f64>,
        adaptor: Option<&LoraAdaptor>,
        mut base: Option<&mut ModelGrads>,
        mut lora: Option<&mut LoraGrads>,
    ) -> Array2<f64> {
        let mut dx = rms_norm_backward(
            &cache.x_final,
            &self.final_norm,
            &cache.final_inv,
            d_hidden,
            base.as_deref_mut().map(|g| &mut g.final_norm),
        );
        for i in (0..self.layers.len()).rev() {
            dx = self.layer_backward(
                i,
                &cache.layers[i],
                dx,
                &cache.rope,
                adaptor,
                base.as_deref_mut().map(|g| &mut g.layers[i]),
                lora.as_deref_mut(),
            );
        }
        dx
    }
}

/// Parameter gradients share the weight layout.
pub(crate) type ModelGrads = ModelWeights;

/// `(dA, dB)` per adaptor pair, in pair order.
#[derive(Debug, Clone)]
pub(crate) struct LoraGrads {
    pub pairs: Vec<(Array2<f64>, Array2<f64>)>,
}

impl LoraGrads {
    pub(crate) fn zeros_like(adaptor: &LoraAdaptor) -> Self {
        Self {
            pairs: adaptor
                .pairs
                .iter()
                .map(|p| (Array2::zeros(p.a.raw_dim()), Array2::zeros(p.b.raw_dim())))
                .collect(),
        }
    }
}

/// Mean cross-entropy over `targets` (`(row, next token)` pairs), computing
/// logits only on the rows that carry a target. Returns the loss and its
/// gradient with respect to the final hidden states; the tied-head gradient
/// is accumulated into `dembed` when given.
pub(crate) fn cross_entropy(
    weights: &ModelWeights,
    hidden: &Array2<f64>,
    targets: &[(usize, TokenId)],
    dembed: Option<&mut Array2<f64>>,
) -> (f64, Array2<f64>) {
    let mut d_hidden = Array2::zeros(hidden.raw_dim());
    if targets.is_empty() {
        return (0.0, d_hidden);
    }
    let rows: Vec<usize> = targets.iter().map(|t| t.0).collect();
    let h = hidden.select(Axis(0), &rows);
    let mut logits = h.dot(&weights.embed.t());
    let count = targets.len() as f64;
    let mut loss = 0.0;
    for (mut row, &(_, tok)) in logits.rows_mut().into_iter().zip(targets) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let p_tok = row[tok as usize] / sum;
        loss -= p_tok.ln();
        for v in row.iter_mut() {
            *v /= sum * count;
        }
        row[tok as usize] -= 1.0 / count;
    }
    // `logits` now holds dL/dlogits for the selected rows.
    let dh = head_backward(weights, &h, &logits, dembed);
    for (i, &r) in rows.iter().enumerate() {
        let mut dst = d_hidden.row_mut(r);
        dst += &dh.row(i);
    }
    (loss / count, d_hidden)
}

/// Backward through the tied output head for the given hidden rows.
pub(crate) fn head_backward(
    weights: &ModelWeights,
    hidden_rows: &Array2<f64>,
    dlogits: &Array2<f64>,
    dembed: Option<&mut Array2<f64>>,
) -> Array2<f64> {
    if let Some(de) = dembed {
        *de += &dlogits.t().dot(hidden_rows);
    }
    dlogits.dot(&weights.embed)
}
