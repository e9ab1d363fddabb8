//! Causal multi-head self-attention encoder (SASRec style).
//!
//! Each layer: stacked per-head Q/K/V projections, scaled dot-product
//! attention with a left-to-right mask (normalizer √d′, d′ = d/H), heads
//! concatenated, residual + layer norm, then a ReLU feed-forward block with
//! dropout, residual and a second layer norm. No output projection.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    apply_mask, causal_softmax, causal_softmax_backward, cross_entropy_from_logits, dot,
    dropout, layer_norm_rows, layer_norm_rows_backward, mm, mm_nt, mm_tn, relu, relu_backward,
    HasParams, LayerNormCache, Matrix, Param, Rng, LN_EPS,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub ln_eps: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            d: 64,
            heads: 2,
            layers: 2,
            max_len: 50,
            dropout: 0.2,
            ln_eps: LN_EPS,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d = {} is not divisible by H = {}",
                self.d, self.heads
            )));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if self.ln_eps <= 0.0 {
            return Err(Error::Config("ln_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayer {
    /// `d × d`, head `h` owns columns `h·d′ .. (h+1)·d′`.
    pub wq: Param,
    pub wk: Param,
    pub wv: Param,
    pub ln1_gain: Param,
    pub ln1_bias: Param,
    pub w1: Param,
    pub b1: Param,
    pub w2: Param,
    pub b2: Param,
    pub ln2_gain: Param,
    pub ln2_bias: Param,
}

impl AttentionLayer {
    pub fn init(d: usize, rng: &mut Rng) -> Self {
        AttentionLayer {
            wq: Param::new(rng.xavier(d, d)),
            wk: Param::new(rng.xavier(d, d)),
            wv: Param::new(rng.xavier(d, d)),
            ln1_gain: Param::new(Matrix::filled(1, d, 1.0)),
            ln1_bias: Param::zeros(1, d),
            w1: Param::new(rng.xavier(d, d)),
            b1: Param::zeros(1, d),
            w2: Param::new(rng.xavier(d, d)),
            b2: Param::zeros(1, d),
            ln2_gain: Param::new(Matrix::filled(1, d, 1.0)),
            ln2_bias: Param::zeros(1, d),
        }
    }

    fn params(&self) -> [&Param; 11] {
        [
            &self.wq, &self.wk, &self.wv, &self.ln1_gain, &self.ln1_bias, &self.w1, &self.b1,
            &self.w2, &self.b2, &self.ln2_gain, &self.ln2_bias,
        ]
    }

    fn params_mut(&mut self) -> [&mut Param; 11] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
        ]
    }
}

/// Output and attention weights of one causal head.
pub(crate) fn causal_head(q: &Matrix, k: &Matrix, v: &Matrix, scale: f64) -> (Matrix, Matrix) {
    let mut scores = mm_nt(q, k);
    scores.scale_assign(scale);
    let probs = causal_softmax(&scores);
    (mm(&probs, v), probs)
}

/// Returns `(dq, dk, dv)`.
pub(crate) fn causal_head_backward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    probs: &Matrix,
    dout: &Matrix,
    scale: f64,
) -> (Matrix, Matrix, Matrix) {
    let dprobs = mm_nt(dout, v);
    let dv = mm_tn(probs, dout);
    let mut ds = causal_softmax_backward(probs, &dprobs);
    ds.scale_assign(scale);
    let dq = mm(&ds, k);
    let dk = mm_tn(&ds, q);
    (dq, dk, dv)
}

#[derive(Clone, Debug)]
pub(crate) struct LayerTrace {
    x: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    probs: Vec<Matrix>,
    ln1: LayerNormCache,
    y: Matrix,
    pre: Matrix,
    hidden: Matrix,
    mask: Option<Matrix>,
    ln2: LayerNormCache,
}

/// Per-head attention outputs `f_i^(h)` (each `t × d′`) of one layer.
pub fn head_attention_outputs(layer: &AttentionLayer, x: &Matrix, heads: usize) -> Vec<Matrix> {
    let d = x.cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = mm(x, &layer.wq.value);
    let k = mm(x, &layer.wk.value);
    let v = mm(x, &layer.wv.value);
    (0..heads)
        .map(|h| {
            causal_head(
                &q.col_slice(h * dh, dh),
                &k.col_slice(h * dh, dh),
                &v.col_slice(h * dh, dh),
                scale,
            )
            .0
        })
        .collect()
}

/// One full attention layer in eval mode (no dropout).
pub fn causal_attention_layer(
    x: &Matrix,
    layer: &AttentionLayer,
    heads: usize,
    ln_eps: f64,
) -> Result<Matrix> {
    if x.cols() != layer.wq.value.rows() || !x.cols().is_multiple_of(heads) {
        return Err(Error::Dimension {
            op: "causal_attention_layer",
            left: x.shape(),
            right: layer.wq.shape(),
        });
    }
    Ok(layer_forward(layer, x, heads, 0.0, ln_eps, None)?.0)
}

fn layer_forward(
    layer: &AttentionLayer,
    x: &Matrix,
    heads: usize,
    p: f64,
    eps: f64,
    rng: Option<&mut Rng>,
) -> Result<(Matrix, LayerTrace)> {
    let (t, d) = x.shape();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = mm(x, &layer.wq.value);
    let k = mm(x, &layer.wk.value);
    let v = mm(x, &layer.wv.value);
    let mut sum1 = x.clone();
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (o, pr) = causal_head(
            &q.col_slice(h * dh, dh),
            &k.col_slice(h * dh, dh),
            &v.col_slice(h * dh, dh),
            scale,
        );
        sum1.add_col_block(h * dh, &o);
        probs.push(pr);
    }
    let (y, ln1) = layer_norm_rows(&sum1, &layer.ln1_gain.value, &layer.ln1_bias.value, eps);
    let mut pre = mm(&y, &layer.w1.value);
    pre.add_row_broadcast(&layer.b1.value);
    let hidden = relu(&pre);
    let mut ffn = mm(&hidden, &layer.w2.value);
    ffn.add_row_broadcast(&layer.b2.value);
    let (ffn, mask) = dropout(&ffn, p, rng)?;
    let mut sum2 = y.clone();
    sum2.add_assign(&ffn);
    let (z, ln2) = layer_norm_rows(&sum2, &layer.ln2_gain.value, &layer.ln2_bias.value, eps);
    debug_assert_eq!(z.shape(), (t, d));
    Ok((
        z,
        LayerTrace {
            x: x.clone(),
            q,
            k,
            v,
            probs,
            ln1,
            y,
            pre,
            hidden,
            mask,
            ln2,
        },
    ))
}

/// Accumulates parameter gradients and returns `dL/dx`.
fn layer_backward(layer: &mut AttentionLayer, tr: &LayerTrace, heads: usize, dz: &Matrix) -> Matrix {
    let d = dz.cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let dsum2 = layer_norm_rows_backward(
        &tr.ln2,
        &layer.ln2_gain.value,
        dz,
        &mut layer.ln2_gain.grad,
        &mut layer.ln2_bias.grad,
    );
    let mut dy = dsum2.clone();
    let mut dffn = dsum2;
    apply_mask(&mut dffn, &tr.mask);
    layer.w2.grad.add_assign(&mm_tn(&tr.hidden, &dffn));
    layer.b2.grad.add_assign(&dffn.col_sums());
    let mut dhidden = mm_nt(&dffn, &layer.w2.value);
    relu_backward(&tr.pre, &mut dhidden);
    layer.w1.grad.add_assign(&mm_tn(&tr.y, &dhidden));
    layer.b1.grad.add_assign(&dhidden.col_sums());
    dy.add_assign(&mm_nt(&dhidden, &layer.w1.value));

    let dsum1 = layer_norm_rows_backward(
        &tr.ln1,
        &layer.ln1_gain.value,
        &dy,
        &mut layer.ln1_gain.grad,
        &mut layer.ln1_bias.grad,
    );
    let mut dx = dsum1.clone();
    let (t, _) = dz.shape();
    let mut dq = Matrix::zeros(t, d);
    let mut dk = Matrix::zeros(t, d);
    let mut dv = Matrix::zeros(t, d);
    for h in 0..heads {
        let (gq, gk, gv) = causal_head_backward(
            &tr.q.col_slice(h * dh, dh),
            &tr.k.col_slice(h * dh, dh),
            &tr.v.col_slice(h * dh, dh),
            &tr.probs[h],
            &dsum1.col_slice(h * dh, dh),
            scale,
        );
        dq.add_col_block(h * dh, &gq);
        dk.add_col_block(h * dh, &gk);
        dv.add_col_block(h * dh, &gv);
    }
    layer.wq.grad.add_assign(&mm_tn(&tr.x, &dq));
    layer.wk.grad.add_assign(&mm_tn(&tr.x, &dk));
    layer.wv.grad.add_assign(&mm_tn(&tr.x, &dv));
    dx.add_assign(&mm_nt(&dq, &layer.wq.value));
    dx.add_assign(&mm_nt(&dk, &layer.wk.value));
    dx.add_assign(&mm_nt(&dv, &layer.wv.value));
    dx
}

/// Where item vectors come from.
#[derive(Clone, Debug, PartialEq)]
pub enum ItemEmbedding {
    /// Free `|V| × d` table (random or text-initialized).
    Table(Param),
    /// Frozen text features mapped to `d` by a trainable affine layer.
    Projected {
        text: Matrix,
        weight: Param,
        bias: Param,
    },
}

impl ItemEmbedding {
    pub fn num_items(&self) -> usize {
        match self {
            ItemEmbedding::Table(p) => p.value.rows(),
            ItemEmbedding::Projected { text, .. } => text.rows(),
        }
    }

    /// The current `|V| × d` item matrix.
    pub fn matrix(&self) -> Cow<'_, Matrix> {
        match self {
            ItemEmbedding::Table(p) => Cow::Borrowed(&p.value),
            ItemEmbedding::Projected { text, weight, bias } => {
                let mut m = mm(text, &weight.value);
                m.add_row_broadcast(&bias.value);
                Cow::Owned(m)
            }
        }
    }

    pub fn backward(&mut self, d_items: &Matrix) {
        match self {
            ItemEmbedding::Table(p) => p.grad.add_assign(d_items),
            ItemEmbedding::Projected { text, weight, bias } => {
                weight.grad.add_assign(&mm_tn(text, d_items));
                bias.grad.add_assign(&d_items.col_sums());
            }
        }
    }

    fn params(&self) -> Vec<&Param> {
        match self {
            ItemEmbedding::Table(p) => vec![p],
            ItemEmbedding::Projected { weight, bias, .. } => vec![weight, bias],
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            ItemEmbedding::Table(p) => vec![p],
            ItemEmbedding::Projected { weight, bias, .. } => vec![weight, bias],
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct EncoderTrace {
    emb_mask: Option<Matrix>,
    layers: Vec<LayerTrace>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub items: ItemEmbedding,
    pub pos_table: Param,
    pub layers: Vec<AttentionLayer>,
}

pub const EMBED_INIT_STD: f64 = 0.02;

impl Backbone {
    /// Random init: embedding tables ~ N(0, 0.02²), projections Xavier,
    /// biases 0, layer-norm gains 1.
    pub fn new(config: BackboneConfig, num_items: usize, rng: &mut Rng) -> Result<Self> {
        let table = Param::new(rng.normal_matrix(num_items, config.d, EMBED_INIT_STD));
        Backbone::with_items(config, ItemEmbedding::Table(table), rng)
    }

    pub fn with_items(config: BackboneConfig, items: ItemEmbedding, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let width = items.matrix().cols();
        if width != config.d {
            return Err(Error::Config(format!(
                "item embeddings are {width}-dimensional, model expects d = {}",
                config.d
            )));
        }
        let pos_table = Param::new(rng.normal_matrix(config.max_len, config.d, EMBED_INIT_STD));
        let layers = (0..config.layers)
            .map(|_| AttentionLayer::init(config.d, rng))
            .collect();
        Ok(Backbone {
            config,
            items,
            pos_table,
            layers,
        })
    }

    pub fn num_items(&self) -> usize {
        self.items.num_items()
    }

    fn check_sequence(&self, seq: &[usize]) -> Result<()> {
        if seq.is_empty() {
            return Err(Error::Input("empty item sequence".into()));
        }
        if seq.len() > self.config.max_len {
            return Err(Error::Index {
                index: seq.len(),
                len: self.config.max_len,
            });
        }
        let n = self.num_items();
        if let Some(&bad) = seq.iter().find(|&&i| i >= n) {
            return Err(Error::Index { index: bad, len: n });
        }
        Ok(())
    }

    /// Row `i` = item embedding + position `i` embedding, then dropout.
    pub fn embed_sequence(&self, seq: &[usize], rng: Option<&mut Rng>) -> Result<Matrix> {
        self.check_sequence(seq)?;
        let items = self.items.matrix();
        Ok(self.embed_with(&items, seq, rng)?.0)
    }

    fn embed_with(
        &self,
        items: &Matrix,
        seq: &[usize],
        rng: Option<&mut Rng>,
    ) -> Result<(Matrix, Option<Matrix>)> {
        let mut x = Matrix::zeros(seq.len(), self.config.d);
        for (i, &item) in seq.iter().enumerate() {
            let row = x.row_mut(i);
            for ((o, a), b) in row.iter_mut().zip(items.row(item)).zip(self.pos_table.value.row(i)) {
                *o = a + b;
            }
        }
        dropout(&x, self.config.dropout, rng)
    }

    /// Embedding followed by the first `depth` layers. Training mode iff
    /// `rng` is given.
    pub(crate) fn encode(
        &self,
        items: &Matrix,
        seq: &[usize],
        depth: usize,
        mut rng: Option<&mut Rng>,
    ) -> Result<(Matrix, EncoderTrace)> {
        self.check_sequence(seq)?;
        let (mut x, emb_mask) = self.embed_with(items, seq, rng.as_deref_mut())?;
        let mut traces = Vec::with_capacity(depth);
        for layer in &self.layers[..depth] {
            let (z, tr) = layer_forward(
                layer,
                &x,
                self.config.heads,
                self.config.dropout,
                self.config.ln_eps,
                rng.as_deref_mut(),
            )?;
            traces.push(tr);
            x = z;
        }
        Ok((
            x,
            EncoderTrace {
                emb_mask,
                layers: traces,
            },
        ))
    }

    /// Backward through `encode`; item-row gradients go to `d_items`.
    pub(crate) fn encode_backward(
        &mut self,
        seq: &[usize],
        trace: &EncoderTrace,
        dz: Matrix,
        d_items: &mut Matrix,
    ) {
        let heads = self.config.heads;
        let mut dx = dz;
        for (layer, tr) in self.layers.iter_mut().zip(&trace.layers).rev() {
            dx = layer_backward(layer, tr, heads, &dx);
        }
        apply_mask(&mut dx, &trace.emb_mask);
        for (i, &item) in seq.iter().enumerate() {
            let g = dx.row(i);
            for (a, b) in d_items.row_mut(item).iter_mut().zip(g) {
                *a += b;
            }
            for (a, b) in self.pos_table.grad.row_mut(i).iter_mut().zip(g) {
                *a += b;
            }
        }
    }

    /// All position outputs of the full stack in eval mode (`t × d`).
    pub fn forward(&self, seq: &[usize]) -> Result<Matrix> {
        let items = self.items.matrix();
        Ok(self.encode(&items, seq, self.layers.len(), None)?.0)
    }

    /// Input to layer `depth` (0 = embeddings), eval mode.
    pub fn hidden_before_layer(&self, seq: &[usize], depth: usize) -> Result<Matrix> {
        let items = self.items.matrix();
        Ok(self.encode(&items, seq, depth, None)?.0)
    }

    /// `F_t`: final-position output of the last layer.
    pub fn sequence_representation(&self, seq: &[usize]) -> Result<Vec<f64>> {
        let z = self.forward(seq)?;
        Ok(z.row(z.rows() - 1).to_vec())
    }

    /// Next-item logits over the whole catalog for `prefix` (last `max_len`
    /// items are used).
    pub fn scores(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let start = prefix.len().saturating_sub(self.config.max_len);
        let f = self.sequence_representation(&prefix[start..])?;
        Ok(sasrec_scores(&f, &self.items.matrix()))
    }

    /// Mean cross-entropy over positions, eval mode.
    pub fn loss(&self, input: &[usize], targets: &[usize]) -> Result<f64> {
        let items = self.items.matrix();
        let (z, _) = self.encode(&items, input, self.layers.len(), None)?;
        let logits = mm_nt(&z, &items);
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            total += cross_entropy_from_logits(logits.row(i), t)?.0;
        }
        Ok(total / targets.len() as f64)
    }

    /// Forward + backward for one sequence where position `i` predicts
    /// `targets[i]`. Gradients are scaled by `weight` and accumulated;
    /// returns the unscaled summed loss.
    pub fn accumulate_gradients(
        &mut self,
        input: &[usize],
        targets: &[usize],
        rng: Option<&mut Rng>,
        weight: f64,
    ) -> Result<f64> {
        if input.len() != targets.len() {
            return Err(Error::Dimension {
                op: "accumulate_gradients",
                left: (input.len(), 1),
                right: (targets.len(), 1),
            });
        }
        let items = self.items.matrix().into_owned();
        let (z, trace) = self.encode(&items, input, self.layers.len(), rng)?;
        let logits = mm_nt(&z, &items);
        let mut dlogits = Matrix::zeros(logits.rows(), logits.cols());
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let (l, g) = cross_entropy_from_logits(logits.row(i), t)?;
            total += l;
            for (o, v) in dlogits.row_mut(i).iter_mut().zip(g) {
                *o = v * weight;
            }
        }
        let dz = mm(&dlogits, &items);
        let mut d_items = mm_tn(&dlogits, &z);
        self.encode_backward(input, &trace, dz, &mut d_items);
        self.items.backward(&d_items);
        Ok(total)
    }
}

/// `logit_v = x_vᵀ F_t` for every row of `items`.
pub fn sasrec_scores(f: &[f64], items: &Matrix) -> Vec<f64> {
    (0..items.rows()).map(|v| dot(items.row(v), f)).collect()
}

impl HasParams for Backbone {
    fn params(&self) -> Vec<&Param> {
        let mut out = self.items.params();
        out.push(&self.pos_table);
        for l in &self.layers {
            out.extend(l.params());
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.items.params_mut();
        out.push(&mut self.pos_table);
        for l in &mut self.layers {
            out.extend(l.params_mut());
        }
        out
    }
}
