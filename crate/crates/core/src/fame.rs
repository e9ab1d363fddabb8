//! The facet-aware final layer.
//!
//! Per head `h`, every expert `n` has its own query projection; all experts
//! share the head's key/value projections. Expert outputs are mixed by a
//! per-head router, passed through a feed-forward block shared by all heads,
//! and scored against per-head item sub-embeddings. A gate over the
//! concatenated head outputs fuses the per-head logits.

use serde::{Deserialize, Serialize};

use crate::backbone::{causal_head, causal_head_backward, Backbone};
use crate::error::{Error, Result};
use crate::numerics::{
    apply_mask, cross_entropy_from_logits, dot, dropout, layer_norm_rows,
    layer_norm_rows_backward, mm, mm_nt, mm_tn, relu, relu_backward, softmax, softmax_backward,
    softmax_rows, HasParams, LayerNormCache, Matrix, Param, Rng, LN_EPS,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpertInit {
    /// Pretrained query slice plus Gaussian noise.
    Pretrained,
    /// Xavier-uniform, ignoring the pretrained query.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FameConfig {
    pub d: usize,
    pub heads: usize,
    pub experts: usize,
    pub dropout: f64,
    pub ln_eps: f64,
    pub expert_noise: f64,
    pub expert_init: ExpertInit,
}

impl Default for FameConfig {
    fn default() -> Self {
        FameConfig {
            d: 64,
            heads: 2,
            experts: 2,
            dropout: 0.2,
            ln_eps: LN_EPS,
            expert_noise: 0.01,
            expert_init: ExpertInit::Pretrained,
        }
    }
}

impl FameConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d = {} is not divisible by H = {}",
                self.d, self.heads
            )));
        }
        if self.experts == 0 {
            return Err(Error::Config("N must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if self.expert_noise < 0.0 {
            return Err(Error::Config("expert_noise must be non-negative".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FameHead {
    /// `N` query projections, each `d × d′`.
    pub experts: Vec<Param>,
    pub key: Param,
    pub value: Param,
    /// Sub-embedding projection `W_f`, `d × d′`.
    pub sub_proj: Param,
    /// Router `(N·d′) × N`.
    pub router: Param,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FameLayer {
    pub config: FameConfig,
    pub heads: Vec<FameHead>,
    pub ffn_w1: Param,
    pub ffn_b1: Param,
    pub ffn_w2: Param,
    pub ffn_b2: Param,
    pub ln_gain: Param,
    pub ln_bias: Param,
    /// `d × H`
    pub gate_w: Param,
    /// `1 × H`
    pub gate_b: Param,
}

#[derive(Clone, Debug)]
struct HeadTrace {
    k: Matrix,
    v: Matrix,
    queries: Vec<Matrix>,
    probs: Vec<Matrix>,
    expert_out: Vec<Matrix>,
    concat: Matrix,
    beta: Matrix,
    f: Matrix,
    pre: Matrix,
    hidden: Matrix,
    mask: Option<Matrix>,
    ln: LayerNormCache,
    out: Matrix,
    sub: Matrix,
    logits: Matrix,
}

#[derive(Clone, Debug)]
pub(crate) struct FameTrace {
    x: Matrix,
    heads: Vec<HeadTrace>,
    fcat: Matrix,
    gate: Matrix,
    fused: Matrix,
}

/// Everything the final layer computes at one position, for inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct FameOutput {
    pub fused: Vec<f64>,
    pub head_logits: Vec<Vec<f64>>,
    pub gate: Vec<f64>,
    /// Router weights per head.
    pub betas: Vec<Vec<f64>>,
}

impl FameLayer {
    /// Fresh random layer (experts Xavier-initialized).
    pub fn random(config: FameConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (d, dh, n) = (config.d, config.head_dim(), config.experts);
        let heads = (0..config.heads)
            .map(|_| FameHead {
                experts: (0..n).map(|_| Param::new(rng.xavier(d, dh))).collect(),
                key: Param::new(rng.xavier(d, dh)),
                value: Param::new(rng.xavier(d, dh)),
                sub_proj: Param::new(rng.xavier(d, dh)),
                router: Param::new(rng.xavier(n * dh, n)),
            })
            .collect();
        Ok(FameLayer {
            heads,
            ffn_w1: Param::new(rng.xavier(dh, dh)),
            ffn_b1: Param::zeros(1, dh),
            ffn_w2: Param::new(rng.xavier(dh, dh)),
            ffn_b2: Param::zeros(1, dh),
            ln_gain: Param::new(Matrix::filled(1, dh, 1.0)),
            ln_bias: Param::zeros(1, dh),
            gate_w: Param::new(rng.xavier(d, config.heads)),
            gate_b: Param::zeros(1, config.heads),
            config,
        })
    }

    /// `q_{i(n)}^{(h)} = x_iᵀ W_{Q(n)}^{(h)}` for every expert.
    pub fn expert_queries(&self, x: &[f64], head: usize) -> Vec<Vec<f64>> {
        let row = Matrix::row_vector(x);
        self.heads[head]
            .experts
            .iter()
            .map(|w| mm(&row, &w.value).into_vec())
            .collect()
    }

    /// Per-expert attention outputs `f_{i(n)}^{(h)}`, each `t × d′`.
    pub fn moe_head_attention(&self, x: &Matrix, head: usize) -> Result<Vec<Matrix>> {
        if x.rows() == 0 {
            return Err(Error::Input("empty sequence".into()));
        }
        let hd = &self.heads[head];
        let scale = 1.0 / (self.config.head_dim() as f64).sqrt();
        let k = mm(x, &hd.key.value);
        let v = mm(x, &hd.value.value);
        Ok(hd
            .experts
            .iter()
            .map(|wq| causal_head(&mm(x, &wq.value), &k, &v, scale).0)
            .collect())
    }

    /// Causal attention weights of every expert in `head`, each `t × t`.
    pub fn expert_attention_weights(&self, x: &Matrix, head: usize) -> Result<Vec<Matrix>> {
        if x.rows() == 0 {
            return Err(Error::Input("empty sequence".into()));
        }
        let hd = &self.heads[head];
        let scale = 1.0 / (self.config.head_dim() as f64).sqrt();
        let k = mm(x, &hd.key.value);
        Ok(hd
            .experts
            .iter()
            .map(|wq| causal_head(&mm(x, &wq.value), &k, &k, scale).1)
            .collect())
    }

    /// Router weights β and the integrated representation for one position.
    pub fn route_experts(&self, expert_vectors: &[Vec<f64>], head: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.config.experts;
        let dh = self.config.head_dim();
        if expert_vectors.len() != n || expert_vectors.iter().any(|v| v.len() != dh) {
            return Err(Error::Dimension {
                op: "route_experts",
                left: (expert_vectors.len(), expert_vectors.first().map_or(0, Vec::len)),
                right: (n, dh),
            });
        }
        let concat: Vec<f64> = expert_vectors.iter().flatten().copied().collect();
        let logits = mm(&Matrix::row_vector(&concat), &self.heads[head].router.value);
        let beta = softmax(logits.data());
        let mut f = vec![0.0; dh];
        for (b, e) in beta.iter().zip(expert_vectors) {
            for (o, v) in f.iter_mut().zip(e) {
                *o += b * v;
            }
        }
        Ok((beta, f))
    }

    /// Shared reduced-dimension FFN with residual and layer norm (eval mode).
    pub fn head_ffn(&self, f: &[f64]) -> Vec<f64> {
        let x = Matrix::row_vector(f);
        let (out, ..) = self.ffn_forward(&x, None).expect("eval-mode dropout cannot fail");
        out.into_vec()
    }

    fn ffn_forward(
        &self,
        f: &Matrix,
        rng: Option<&mut Rng>,
    ) -> Result<(Matrix, Matrix, Matrix, Option<Matrix>, LayerNormCache)> {
        let mut pre = mm(f, &self.ffn_w1.value);
        pre.add_row_broadcast(&self.ffn_b1.value);
        let hidden = relu(&pre);
        let mut ffn = mm(&hidden, &self.ffn_w2.value);
        ffn.add_row_broadcast(&self.ffn_b2.value);
        let (ffn, mask) = dropout(&ffn, self.config.dropout, rng)?;
        let mut sum = f.clone();
        sum.add_assign(&ffn);
        let (out, ln) = layer_norm_rows(&sum, &self.ln_gain.value, &self.ln_bias.value, self.config.ln_eps);
        Ok((out, pre, hidden, mask, ln))
    }

    /// `x_v^{(h)} = x_vᵀ W_f^{(h)}` for every head, each `|V| × d′`.
    pub fn facet_subembeddings(&self, items: &Matrix) -> Vec<Matrix> {
        self.heads.iter().map(|h| mm(items, &h.sub_proj.value)).collect()
    }

    /// `g̃ = softmax([F⁽¹⁾|…|F⁽ᴴ⁾]ᵀ W_g + b_g)`.
    pub fn gate_heads(&self, head_outputs: &[Vec<f64>]) -> Result<Vec<f64>> {
        let concat: Vec<f64> = head_outputs.iter().flatten().copied().collect();
        if concat.len() != self.config.d || head_outputs.len() != self.config.heads {
            return Err(Error::Dimension {
                op: "gate_heads",
                left: (head_outputs.len(), concat.len()),
                right: (self.config.heads, self.config.d),
            });
        }
        let mut g = mm(&Matrix::row_vector(&concat), &self.gate_w.value);
        g.add_assign(&self.gate_b.value);
        Ok(softmax(g.data()))
    }

    fn forward(&self, x: &Matrix, items: &Matrix, mut rng: Option<&mut Rng>) -> Result<FameTrace> {
        let cfg = &self.config;
        let (t, d) = x.shape();
        let dh = cfg.head_dim();
        let n = cfg.experts;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(cfg.heads);
        let mut fcat = Matrix::zeros(t, d);
        for (h, hd) in self.heads.iter().enumerate() {
            let k = mm(x, &hd.key.value);
            let v = mm(x, &hd.value.value);
            let mut queries = Vec::with_capacity(n);
            let mut probs = Vec::with_capacity(n);
            let mut expert_out = Vec::with_capacity(n);
            let mut concat = Matrix::zeros(t, n * dh);
            for (e, wq) in hd.experts.iter().enumerate() {
                let q = mm(x, &wq.value);
                let (o, p) = causal_head(&q, &k, &v, scale);
                concat.add_col_block(e * dh, &o);
                queries.push(q);
                probs.push(p);
                expert_out.push(o);
            }
            let beta = softmax_rows(&mm(&concat, &hd.router.value));
            let mut f = Matrix::zeros(t, dh);
            for i in 0..t {
                for (e, o) in expert_out.iter().enumerate() {
                    let b = beta.get(i, e);
                    for (a, v) in f.row_mut(i).iter_mut().zip(o.row(i)) {
                        *a += b * v;
                    }
                }
            }
            let (out, pre, hidden, mask, ln) = self.ffn_forward(&f, rng.as_deref_mut())?;
            fcat.add_col_block(h * dh, &out);
            let sub = mm(items, &hd.sub_proj.value);
            let logits = mm_nt(&out, &sub);
            heads.push(HeadTrace {
                k,
                v,
                queries,
                probs,
                expert_out,
                concat,
                beta,
                f,
                pre,
                hidden,
                mask,
                ln,
                out,
                sub,
                logits,
            });
        }
        let mut g = mm(&fcat, &self.gate_w.value);
        g.add_row_broadcast(&self.gate_b.value);
        let gate = softmax_rows(&g);
        let mut fused = Matrix::zeros(t, items.rows());
        for (h, ht) in heads.iter().enumerate() {
            for i in 0..t {
                let w = gate.get(i, h);
                for (a, l) in fused.row_mut(i).iter_mut().zip(ht.logits.row(i)) {
                    *a += w * l;
                }
            }
        }
        Ok(FameTrace {
            x: x.clone(),
            heads,
            fcat,
            gate,
            fused,
        })
    }

    /// Accumulates parameter grads; returns `dL/dx` and adds item-row grads
    /// into `d_items`.
    fn backward(&mut self, tr: &FameTrace, items: &Matrix, dfused: &Matrix, d_items: &mut Matrix) -> Matrix {
        let (t, d) = tr.x.shape();
        let dh = self.config.head_dim();
        let nh = self.config.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        // Fusion and gate.
        let mut dgate = Matrix::zeros(t, nh);
        for (h, ht) in tr.heads.iter().enumerate() {
            for i in 0..t {
                dgate.set(i, h, dot(ht.logits.row(i), dfused.row(i)));
            }
        }
        let mut dg = Matrix::zeros(t, nh);
        for i in 0..t {
            dg.row_mut(i)
                .copy_from_slice(&softmax_backward(tr.gate.row(i), dgate.row(i)));
        }
        self.gate_w.grad.add_assign(&mm_tn(&tr.fcat, &dg));
        self.gate_b.grad.add_assign(&dg.col_sums());
        let dfcat = mm_nt(&dg, &self.gate_w.value);

        let mut dx = Matrix::zeros(t, d);
        for (h, ht) in tr.heads.iter().enumerate() {
            // Per-head logits.
            let mut dlogits = dfused.clone();
            for i in 0..t {
                let w = tr.gate.get(i, h);
                dlogits.row_mut(i).iter_mut().for_each(|v| *v *= w);
            }
            let mut dout = mm(&dlogits, &ht.sub);
            dout.add_assign(&dfcat.col_slice(h * dh, dh));
            let dsub = mm_tn(&dlogits, &ht.out);
            let hd = &mut self.heads[h];
            hd.sub_proj.grad.add_assign(&mm_tn(items, &dsub));
            d_items.add_assign(&mm_nt(&dsub, &hd.sub_proj.value));

            // Shared FFN′.
            let dsum = layer_norm_rows_backward(
                &ht.ln,
                &self.ln_gain.value,
                &dout,
                &mut self.ln_gain.grad,
                &mut self.ln_bias.grad,
            );
            let mut df = dsum.clone();
            let mut dffn = dsum;
            apply_mask(&mut dffn, &ht.mask);
            self.ffn_w2.grad.add_assign(&mm_tn(&ht.hidden, &dffn));
            self.ffn_b2.grad.add_assign(&dffn.col_sums());
            let mut dhidden = mm_nt(&dffn, &self.ffn_w2.value);
            relu_backward(&ht.pre, &mut dhidden);
            self.ffn_w1.grad.add_assign(&mm_tn(&ht.f, &dhidden));
            self.ffn_b1.grad.add_assign(&dhidden.col_sums());
            df.add_assign(&mm_nt(&dhidden, &self.ffn_w1.value));

            // Router mixture.
            let n = ht.expert_out.len();
            let mut dexpert: Vec<Matrix> = ht
                .expert_out
                .iter()
                .map(|_| Matrix::zeros(t, dh))
                .collect();
            let mut dbeta = Matrix::zeros(t, n);
            for i in 0..t {
                for e in 0..n {
                    dbeta.set(i, e, dot(ht.expert_out[e].row(i), df.row(i)));
                    let b = ht.beta.get(i, e);
                    for (a, g) in dexpert[e].row_mut(i).iter_mut().zip(df.row(i)) {
                        *a += b * g;
                    }
                }
            }
            let mut drouter = Matrix::zeros(t, n);
            for i in 0..t {
                drouter
                    .row_mut(i)
                    .copy_from_slice(&softmax_backward(ht.beta.row(i), dbeta.row(i)));
            }
            let hd = &mut self.heads[h];
            hd.router.grad.add_assign(&mm_tn(&ht.concat, &drouter));
            let dconcat = mm_nt(&drouter, &hd.router.value);

            // Expert attention.
            let mut dk = Matrix::zeros(t, dh);
            let mut dv = Matrix::zeros(t, dh);
            for e in 0..n {
                dexpert[e].add_assign(&dconcat.col_slice(e * dh, dh));
                let (dq, gk, gv) = causal_head_backward(
                    &ht.queries[e],
                    &ht.k,
                    &ht.v,
                    &ht.probs[e],
                    &dexpert[e],
                    scale,
                );
                dk.add_assign(&gk);
                dv.add_assign(&gv);
                hd.experts[e].grad.add_assign(&mm_tn(&tr.x, &dq));
                dx.add_assign(&mm_nt(&dq, &hd.experts[e].value));
            }
            hd.key.grad.add_assign(&mm_tn(&tr.x, &dk));
            hd.value.grad.add_assign(&mm_tn(&tr.x, &dv));
            dx.add_assign(&mm_nt(&dk, &hd.key.value));
            dx.add_assign(&mm_nt(&dv, &hd.value.value));
        }
        dx
    }
}

impl HasParams for FameLayer {
    fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for h in &self.heads {
            out.extend(h.experts.iter());
            out.extend([&h.key, &h.value, &h.sub_proj, &h.router]);
        }
        out.extend([
            &self.ffn_w1,
            &self.ffn_b1,
            &self.ffn_w2,
            &self.ffn_b2,
            &self.ln_gain,
            &self.ln_bias,
            &self.gate_w,
            &self.gate_b,
        ]);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for h in &mut self.heads {
            out.extend(h.experts.iter_mut());
            out.push(&mut h.key);
            out.push(&mut h.value);
            out.push(&mut h.sub_proj);
            out.push(&mut h.router);
        }
        out.push(&mut self.ffn_w1);
        out.push(&mut self.ffn_b1);
        out.push(&mut self.ffn_w2);
        out.push(&mut self.ffn_b2);
        out.push(&mut self.ln_gain);
        out.push(&mut self.ln_bias);
        out.push(&mut self.gate_w);
        out.push(&mut self.gate_b);
        out
    }
}

/// `P_v^{(h)} = x_v^{(h)ᵀ} F_t^{(h)}` for every item.
pub fn head_scores(head_output: &[f64], sub_embeddings: &Matrix) -> Vec<f64> {
    (0..sub_embeddings.rows())
        .map(|v| dot(sub_embeddings.row(v), head_output))
        .collect()
}

/// Backbone layers `1..L−1` followed by the facet-aware final layer.
#[derive(Clone, Debug, PartialEq)]
pub struct FameModel {
    /// Holds the first `L − 1` pretrained layers only.
    pub backbone: Backbone,
    pub layer: FameLayer,
}

impl FameModel {
    /// Replaces the final backbone layer: keys and values are copied from its
    /// head slices, expert queries start from its query slice (plus noise, or
    /// fresh when `expert_init = random`), everything else is random.
    pub fn init_from_backbone(backbone: &Backbone, config: FameConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        if backbone.config.d != config.d || backbone.config.heads != config.heads {
            return Err(Error::Config(format!(
                "backbone has d = {}, H = {}; FAME layer wants d = {}, H = {}",
                backbone.config.d, backbone.config.heads, config.d, config.heads
            )));
        }
        let last = backbone
            .layers
            .last()
            .ok_or_else(|| Error::Config("backbone has no layers to replace".into()))?;
        let dh = config.head_dim();
        let mut layer = FameLayer::random(config.clone(), rng)?;
        for (h, head) in layer.heads.iter_mut().enumerate() {
            head.key = Param::new(last.wk.value.col_slice(h * dh, dh));
            head.value = Param::new(last.wv.value.col_slice(h * dh, dh));
            if config.expert_init == ExpertInit::Pretrained {
                let q = last.wq.value.col_slice(h * dh, dh);
                for e in head.experts.iter_mut() {
                    let mut w = q.clone();
                    if config.expert_noise > 0.0 {
                        w.add_assign(&rng.normal_matrix(config.d, dh, config.expert_noise));
                    }
                    *e = Param::new(w);
                }
            }
        }
        let mut trunk = backbone.clone();
        trunk.layers.pop();
        trunk.config.layers = trunk.layers.len();
        for p in trunk.params_mut() {
            *p = Param::new(p.value.clone());
        }
        Ok(FameModel {
            backbone: trunk,
            layer,
        })
    }

    pub fn num_items(&self) -> usize {
        self.backbone.num_items()
    }

    /// Input to the final layer for `seq`, eval mode.
    pub fn final_layer_input(&self, seq: &[usize]) -> Result<Matrix> {
        let items = self.backbone.items.matrix();
        Ok(self
            .backbone
            .encode(&items, seq, self.backbone.layers.len(), None)?
            .0)
    }

    fn trace(&self, items: &Matrix, seq: &[usize], mut rng: Option<&mut Rng>) -> Result<(crate::backbone::EncoderTrace, FameTrace)> {
        let (x, enc) = self
            .backbone
            .encode(items, seq, self.backbone.layers.len(), rng.as_deref_mut())?;
        let tr = self.layer.forward(&x, items, rng)?;
        Ok((enc, tr))
    }

    /// Full per-position breakdown at the last position of `prefix`.
    pub fn inspect(&self, prefix: &[usize]) -> Result<FameOutput> {
        let start = prefix.len().saturating_sub(self.backbone.config.max_len);
        let items = self.backbone.items.matrix();
        let (_, tr) = self.trace(&items, &prefix[start..], None)?;
        let last = tr.fused.rows() - 1;
        Ok(FameOutput {
            fused: tr.fused.row(last).to_vec(),
            head_logits: tr.heads.iter().map(|h| h.logits.row(last).to_vec()).collect(),
            gate: tr.gate.row(last).to_vec(),
            betas: tr.heads.iter().map(|h| h.beta.row(last).to_vec()).collect(),
        })
    }

    /// Fused next-item logits and the gate weights.
    pub fn fame_scores(&self, prefix: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
        let out = self.inspect(prefix)?;
        Ok((out.fused, out.gate))
    }

    pub fn scores(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        Ok(self.fame_scores(prefix)?.0)
    }

    /// Per-head final-layer outputs `F^{(h)}` at every position (`t × d′` each).
    pub fn head_outputs(&self, seq: &[usize]) -> Result<Vec<Matrix>> {
        let items = self.backbone.items.matrix();
        let (_, tr) = self.trace(&items, seq, None)?;
        Ok(tr.heads.into_iter().map(|h| h.out).collect())
    }

    /// Integrated per-head attention outputs `f^{(h)}` (before FFN′).
    pub fn head_attention_outputs(&self, seq: &[usize]) -> Result<Vec<Matrix>> {
        let items = self.backbone.items.matrix();
        let (_, tr) = self.trace(&items, seq, None)?;
        Ok(tr.heads.into_iter().map(|h| h.f).collect())
    }

    pub fn loss(&self, input: &[usize], targets: &[usize]) -> Result<f64> {
        let items = self.backbone.items.matrix();
        let (_, tr) = self.trace(&items, input, None)?;
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            total += cross_entropy_from_logits(tr.fused.row(i), t)?.0;
        }
        Ok(total / targets.len() as f64)
    }

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
        let items = self.backbone.items.matrix().into_owned();
        let (enc, tr) = self.trace(&items, input, rng)?;
        let mut dfused = Matrix::zeros(tr.fused.rows(), tr.fused.cols());
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let (l, g) = cross_entropy_from_logits(tr.fused.row(i), t)?;
            total += l;
            for (o, v) in dfused.row_mut(i).iter_mut().zip(g) {
                *o = v * weight;
            }
        }
        let mut d_items = Matrix::zeros(items.rows(), items.cols());
        let dx = self.layer.backward(&tr, &items, &dfused, &mut d_items);
        self.backbone.encode_backward(input, &enc, dx, &mut d_items);
        self.backbone.items.backward(&d_items);
        Ok(total)
    }
}

impl HasParams for FameModel {
    fn params(&self) -> Vec<&Param> {
        let mut out = self.backbone.params();
        out.extend(self.layer.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.backbone.params_mut();
        out.extend(self.layer.params_mut());
        out
    }
}
