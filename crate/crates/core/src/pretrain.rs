//! Facet-aware pre-training of item embeddings from frozen text vectors.
//!
//! A shared ReLU layer feeds one affine head per facet; each head's output is
//! L2-normalized onto the unit sphere and trained with a supervised
//! contrastive loss whose labels are that facet's classes. Heads take turns
//! step by step, and the final item embedding is the concatenation of all
//! head outputs.

use serde::{Deserialize, Serialize};

use crate::data::{FacetTable, SENTINEL_CLASS};
use crate::error::{Error, Result};
use crate::numerics::{
    dot, mm, mm_nt, mm_tn, relu, relu_backward, AdamConfig, HasParams, Matrix, Param, Rng,
};

/// Added to the norm before dividing.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct FacetHead {
    pub weight: Param,
    pub bias: Param,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectorParams {
    pub shared_w: Param,
    pub shared_b: Param,
    pub heads: Vec<FacetHead>,
}

impl ProjectorParams {
    /// Xavier weights, zero biases. Each head emits `out_dim / heads` values.
    pub fn new(text_dim: usize, mid_dim: usize, out_dim: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || !out_dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "embedding size {out_dim} is not divisible by {heads} facet heads"
            )));
        }
        if text_dim == 0 || mid_dim == 0 {
            return Err(Error::Config("projector dimensions must be positive".into()));
        }
        let sub = out_dim / heads;
        Ok(ProjectorParams {
            shared_w: Param::new(rng.xavier(text_dim, mid_dim)),
            shared_b: Param::zeros(1, mid_dim),
            heads: (0..heads)
                .map(|_| FacetHead {
                    weight: Param::new(rng.xavier(mid_dim, sub)),
                    bias: Param::zeros(1, sub),
                })
                .collect(),
        })
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn text_dim(&self) -> usize {
        self.shared_w.value.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.heads[0].weight.value.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.head_dim() * self.num_heads()
    }
}

impl HasParams for ProjectorParams {
    fn params(&self) -> Vec<&Param> {
        let mut out = vec![&self.shared_w, &self.shared_b];
        for h in &self.heads {
            out.push(&h.weight);
            out.push(&h.bias);
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = vec![&mut self.shared_w, &mut self.shared_b];
        for h in &mut self.heads {
            out.push(&mut h.weight);
            out.push(&mut h.bias);
        }
        out
    }
}

/// One P×K batch for a single facet head.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SupConBatch {
    pub indices: Vec<usize>,
    pub head: usize,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub tau: f64,
    pub p: usize,
    pub k: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            tau: 0.1,
            p: 4,
            k: 8,
            epochs: 300,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau.is_nan() || self.tau <= 0.0 {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.p < 2 || self.k < 2 {
            return Err(Error::Config(format!(
                "P and K must both be at least 2 (got P = {}, K = {})",
                self.p, self.k
            )));
        }
        Ok(())
    }
}

/// `ReLU(E·W_shared + b)`.
pub fn encode_items(e: &Matrix, proj: &ProjectorParams) -> Result<Matrix> {
    if e.cols() != proj.text_dim() {
        return Err(Error::Dimension {
            op: "encode_items",
            left: e.shape(),
            right: proj.shared_w.value.shape(),
        });
    }
    let mut pre = mm(e, &proj.shared_w.value);
    pre.add_row_broadcast(&proj.shared_b.value);
    Ok(relu(&pre))
}

fn normalize(u: &[f64]) -> Vec<f64> {
    let n = dot(u, u).sqrt() + NORM_EPS;
    u.iter().map(|v| v / n).collect()
}

/// Head `head`'s affine map followed by L2 normalization.
pub fn project_facet(h: &[f64], proj: &ProjectorParams, head: usize) -> Result<Vec<f64>> {
    let fh = proj.heads.get(head).ok_or(Error::Index {
        index: head,
        len: proj.num_heads(),
    })?;
    if h.len() != fh.weight.value.rows() {
        return Err(Error::Dimension {
            op: "project_facet",
            left: (1, h.len()),
            right: fh.weight.value.shape(),
        });
    }
    let mut u = mm(&Matrix::row_vector(h), &fh.weight.value);
    u.add_assign(&fh.bias.value);
    Ok(normalize(u.data()))
}

/// `M[i][j] = 1` iff `labels[i] == labels[j]` and `i ≠ j`.
pub fn build_mask(labels: &[usize]) -> Matrix {
    let b = labels.len();
    let mut m = Matrix::zeros(b, b);
    for i in 0..b {
        for j in 0..b {
            if i != j && labels[i] == labels[j] {
                m.set(i, j, 1.0);
            }
        }
    }
    m
}

/// Supervised contrastive loss over the rows of `z`, averaged over anchors
/// that have at least one positive. Returns the loss and `∂loss/∂z`.
pub fn supcon_loss(z: &Matrix, labels: &[usize], tau: f64) -> Result<(f64, Matrix)> {
    let b = z.rows();
    if b < 2 {
        return Err(Error::Batch(format!("contrastive batch needs at least 2 rows, got {b}")));
    }
    if labels.len() != b {
        return Err(Error::Dimension {
            op: "supcon_loss",
            left: z.shape(),
            right: (labels.len(), 1),
        });
    }
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    let mask = build_mask(labels);
    let mut sim = mm_nt(z, z);
    sim.scale_assign(1.0 / tau);

    let mut dsim = Matrix::zeros(b, b);
    let mut total = 0.0;
    let mut anchors = 0usize;
    for i in 0..b {
        let positives = mask.row(i).iter().sum::<f64>();
        if positives == 0.0 {
            continue;
        }
        anchors += 1;
        let row = sim.row(i);
        let max = (0..b).filter(|&a| a != i).map(|a| row[a]).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..b).filter(|&a| a != i).map(|a| (row[a] - max).exp()).sum();
        let lse = max + denom.ln();
        let pos_sum: f64 = (0..b).map(|p| mask.get(i, p) * row[p]).sum();
        total += lse - pos_sum / positives;
        for j in (0..b).filter(|&j| j != i) {
            let q = (row[j] - lse).exp();
            dsim.set(i, j, q - mask.get(i, j) / positives);
        }
    }
    if anchors == 0 {
        return Ok((0.0, Matrix::zeros(b, z.cols())));
    }
    let scale = 1.0 / (anchors as f64 * tau);
    dsim.scale_assign(scale);
    // sim = Z·Zᵀ/τ, so dZ = (dS + dSᵀ)·Z / τ.
    let mut dz = mm(&dsim, z);
    dz.add_assign(&mm_tn(&dsim, z));
    Ok((total / anchors as f64, dz))
}

/// Classes of `labels` (sentinel excluded) with at least `k` members, each
/// with its member list, in ascending class order.
fn valid_classes(labels: &[usize], k: usize) -> Vec<(usize, Vec<usize>)> {
    let max = labels.iter().copied().max().unwrap_or(0);
    let mut members = vec![Vec::new(); max + 1];
    for (item, &c) in labels.iter().enumerate() {
        members[c].push(item);
    }
    members
        .into_iter()
        .enumerate()
        .filter(|(c, m)| *c != SENTINEL_CLASS && m.len() >= k)
        .collect()
}

/// One fair epoch of P×K batches for one facet.
///
/// The valid classes are shuffled into a cycle and consumed `p` at a time;
/// a short final group is topped up from a fresh shuffle with classes not
/// already in it. Members are drawn without replacement within a batch.
pub fn pk_sample(
    labels: &[usize],
    p: usize,
    k: usize,
    head: usize,
    facet: &str,
    rng: &mut Rng,
) -> Result<Vec<SupConBatch>> {
    let classes = valid_classes(labels, k);
    if classes.len() < p {
        return Err(Error::Sampler {
            facet: facet.to_string(),
            msg: format!(
                "{} classes have at least {k} labelled items, but P = {p} are needed",
                classes.len()
            ),
        });
    }
    let mut order: Vec<usize> = (0..classes.len()).collect();
    rng.shuffle(&mut order);
    let mut groups: Vec<Vec<usize>> = order.chunks(p).map(<[usize]>::to_vec).collect();
    if let Some(last) = groups.last_mut() {
        if last.len() < p {
            let mut extra: Vec<usize> = (0..classes.len()).collect();
            rng.shuffle(&mut extra);
            for c in extra {
                if last.len() == p {
                    break;
                }
                if !last.contains(&c) {
                    last.push(c);
                }
            }
        }
    }
    let mut batches = Vec::with_capacity(groups.len());
    for group in groups {
        let mut indices = Vec::with_capacity(p * k);
        let mut batch_labels = Vec::with_capacity(p * k);
        for c in group {
            let (class, members) = &classes[c];
            let mut pool = members.clone();
            for i in 0..k {
                let j = i + rng.below(pool.len() - i);
                pool.swap(i, j);
            }
            indices.extend_from_slice(&pool[..k]);
            batch_labels.extend(std::iter::repeat_n(*class, k));
        }
        batches.push(SupConBatch {
            indices,
            head,
            labels: batch_labels,
        });
    }
    Ok(batches)
}

struct BatchTrace {
    rows: Matrix,
    pre: Matrix,
    hidden: Matrix,
    u: Matrix,
    z: Matrix,
}

fn batch_forward(proj: &ProjectorParams, e: &Matrix, batch: &SupConBatch) -> Result<BatchTrace> {
    let fh = proj.heads.get(batch.head).ok_or(Error::Index {
        index: batch.head,
        len: proj.num_heads(),
    })?;
    if let Some(&bad) = batch.indices.iter().find(|&&i| i >= e.rows()) {
        return Err(Error::Index { index: bad, len: e.rows() });
    }
    let rows = e.select_rows(&batch.indices);
    let mut pre = mm(&rows, &proj.shared_w.value);
    pre.add_row_broadcast(&proj.shared_b.value);
    let hidden = relu(&pre);
    let mut u = mm(&hidden, &fh.weight.value);
    u.add_row_broadcast(&fh.bias.value);
    let mut z = Matrix::zeros(u.rows(), u.cols());
    for r in 0..u.rows() {
        z.row_mut(r).copy_from_slice(&normalize(u.row(r)));
    }
    Ok(BatchTrace { rows, pre, hidden, u, z })
}

/// Contrastive loss of `batch` under the batch's head.
pub fn batch_loss(proj: &ProjectorParams, e: &Matrix, batch: &SupConBatch, tau: f64) -> Result<f64> {
    let tr = batch_forward(proj, e, batch)?;
    Ok(supcon_loss(&tr.z, &batch.labels, tau)?.0)
}

/// Accumulates the gradient of `batch_loss` into the shared and active-head
/// parameters and returns the loss.
pub fn accumulate_batch_gradients(
    proj: &mut ProjectorParams,
    e: &Matrix,
    batch: &SupConBatch,
    tau: f64,
) -> Result<f64> {
    let tr = batch_forward(proj, e, batch)?;
    let (loss, dz) = supcon_loss(&tr.z, &batch.labels, tau)?;
    let mut du = Matrix::zeros(dz.rows(), dz.cols());
    for r in 0..dz.rows() {
        let u = tr.u.row(r);
        let n = dot(u, u).sqrt();
        let s = n + NORM_EPS;
        let g = dz.row(r);
        let proj_coef = if n > 0.0 { dot(u, g) / (s * s * n) } else { 0.0 };
        for ((o, gv), uv) in du.row_mut(r).iter_mut().zip(g).zip(u) {
            *o = gv / s - uv * proj_coef;
        }
    }
    let fh = &mut proj.heads[batch.head];
    fh.weight.grad.add_assign(&mm_tn(&tr.hidden, &du));
    fh.bias.grad.add_assign(&du.col_sums());
    let mut dhidden = mm_nt(&du, &fh.weight.value);
    relu_backward(&tr.pre, &mut dhidden);
    proj.shared_w.grad.add_assign(&mm_tn(&tr.rows, &dhidden));
    proj.shared_b.grad.add_assign(&dhidden.col_sums());
    Ok(loss)
}

/// One line of the pre-training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainLogEntry {
    pub epoch: usize,
    pub step: usize,
    pub head: usize,
    pub loss: f64,
}

/// Trains `proj` with per-step round-robin over facet heads.
///
/// Each epoch draws one fair epoch of batches per facet; steps cycle through
/// heads `0..H`, skipping any head whose batches for the epoch are used up.
/// A step updates the shared layer and the active head only.
pub fn alternating_pretrain(
    e: &Matrix,
    facets: &FacetTable,
    mut proj: ProjectorParams,
    cfg: &PretrainConfig,
    mut log: impl FnMut(&PretrainLogEntry),
) -> Result<ProjectorParams> {
    cfg.validate()?;
    if facets.facet_names.len() != proj.num_heads() {
        return Err(Error::Config(format!(
            "{} facets supplied for a projector with {} heads",
            facets.facet_names.len(),
            proj.num_heads()
        )));
    }
    if facets.num_items() != e.rows() {
        return Err(Error::Dimension {
            op: "alternating_pretrain",
            left: e.shape(),
            right: (facets.num_items(), facets.facet_names.len()),
        });
    }
    let mut rng = Rng::new(cfg.seed);
    let heads = proj.num_heads();
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        let plans = (0..heads)
            .map(|h| pk_sample(&facets.labels[h], cfg.p, cfg.k, h, &facets.facet_names[h], &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let rounds = plans.iter().map(Vec::len).max().unwrap_or(0);
        for r in 0..rounds {
            for plan in &plans {
                let Some(batch) = plan.get(r) else { continue };
                proj.zero_grads();
                let loss = accumulate_batch_gradients(&mut proj, e, batch, cfg.tau)?;
                proj.shared_w.adam_step(&cfg.adam);
                proj.shared_b.adam_step(&cfg.adam);
                let fh = &mut proj.heads[batch.head];
                fh.weight.adam_step(&cfg.adam);
                fh.bias.adam_step(&cfg.adam);
                step += 1;
                log(&PretrainLogEntry {
                    epoch,
                    step,
                    head: batch.head,
                    loss,
                });
            }
        }
    }
    Ok(proj)
}

/// Unit-normalized output of every head for every item (`|V| × D/H` each).
pub fn facet_embeddings(proj: &ProjectorParams, e: &Matrix) -> Result<Vec<Matrix>> {
    let hidden = encode_items(e, proj)?;
    Ok(proj
        .heads
        .iter()
        .map(|fh| {
            let mut u = mm(&hidden, &fh.weight.value);
            u.add_row_broadcast(&fh.bias.value);
            for r in 0..u.rows() {
                let z = normalize(u.row(r));
                u.row_mut(r).copy_from_slice(&z);
            }
            u
        })
        .collect())
}

/// Row `i` is the concatenation of item `i`'s head outputs.
pub fn export_item_embeddings(proj: &ProjectorParams, e: &Matrix) -> Result<Matrix> {
    let parts = facet_embeddings(proj, e)?;
    let sub = proj.head_dim();
    let mut out = Matrix::zeros(e.rows(), proj.out_dim());
    for (h, part) in parts.iter().enumerate() {
        out.add_col_block(h * sub, part);
    }
    Ok(out)
}

/// Mean cosine similarity between distinct same-class items and between
/// different-class items, ignoring sentinel-labelled rows.
pub fn cluster_separation(z: &Matrix, labels: &[usize]) -> (f64, f64) {
    let norms: Vec<f64> = (0..z.rows()).map(|r| dot(z.row(r), z.row(r)).sqrt()).collect();
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..z.rows() {
        if labels[i] == SENTINEL_CLASS {
            continue;
        }
        for j in (i + 1)..z.rows() {
            if labels[j] == SENTINEL_CLASS {
                continue;
            }
            let cos = dot(z.row(i), z.row(j)) / (norms[i] * norms[j]).max(NORM_EPS);
            if labels[i] == labels[j] {
                intra += cos;
                n_intra += 1;
            } else {
                inter += cos;
                n_inter += 1;
            }
        }
    }
    (intra / n_intra.max(1) as f64, inter / n_inter.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_gradient, max_relative_error};
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn unit_rows(rng: &mut Rng, b: usize, d: usize) -> Matrix {
        let mut z = rng.normal_matrix(b, d, 1.0);
        for r in 0..b {
            let n = normalize(z.row(r));
            z.row_mut(r).copy_from_slice(&n);
        }
        z
    }

    /// Straight double loop over anchors and positives.
    fn brute_force(z: &Matrix, labels: &[usize], tau: f64) -> f64 {
        let b = z.rows();
        let sim = |i: usize, j: usize| (0..z.cols()).map(|c| z.get(i, c) * z.get(j, c)).sum::<f64>() / tau;
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..b {
            let pos: Vec<usize> = (0..b).filter(|&p| p != i && labels[p] == labels[i]).collect();
            if pos.is_empty() {
                continue;
            }
            let denom: f64 = (0..b).filter(|&a| a != i).map(|a| sim(i, a).exp()).sum();
            let mut li = 0.0;
            for &p in &pos {
                li += (sim(i, p).exp() / denom).ln();
            }
            total += -li / pos.len() as f64;
            count += 1;
        }
        total / count as f64
    }

    #[test]
    fn encode_items_examples() {
        let mut rng = Rng::new(1);
        let mut proj = ProjectorParams::new(2, 3, 4, 2, &mut rng).unwrap();
        let e = Matrix::from_rows(&[&[0.5, -1.0]]);
        let w = proj.shared_w.value.clone();
        let h = encode_items(&e, &proj).unwrap();
        for c in 0..3 {
            let want = (0.5 * w.get(0, c) - w.get(1, c)).max(0.0);
            assert!((h.get(0, c) - want).abs() < 1e-15);
        }
        proj.shared_b.value = Matrix::row_vector(&[-100.0, -100.0, -100.0]);
        assert!(encode_items(&e, &proj).unwrap().data().iter().all(|v| *v == 0.0));
        proj.shared_w.value.fill(0.0);
        proj.shared_b.value.fill(0.0);
        assert!(encode_items(&e, &proj).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn project_facet_examples() {
        let mut rng = Rng::new(2);
        let mut proj = ProjectorParams::new(2, 2, 4, 2, &mut rng).unwrap();
        proj.heads[1].weight.value = Matrix::identity(2);
        let z = project_facet(&[3.0, 4.0], &proj, 1).unwrap();
        assert!((z[0] - 0.6).abs() < 1e-12 && (z[1] - 0.8).abs() < 1e-12);

        let h = [0.3, -1.7];
        let z = project_facet(&h, &proj, 0).unwrap();
        assert!((dot(&z, &z).sqrt() - 1.0).abs() < 1e-6);
        proj.heads[0].weight.value.scale_assign(5.0);
        let z5 = project_facet(&h, &proj, 0).unwrap();
        for (a, b) in z.iter().zip(&z5) {
            assert!((a - b).abs() < 1e-6);
        }

        proj.heads[0].weight.value.fill(0.0);
        let zero = project_facet(&h, &proj, 0).unwrap();
        assert!(zero.iter().all(|v| v.is_finite() && *v == 0.0));
        assert!(project_facet(&h, &proj, 2).is_err());
    }

    #[test]
    fn mask_examples() {
        let m = build_mask(&[1, 1, 2]);
        assert_eq!(m, Matrix::from_rows(&[&[0.0, 1.0, 0.0], &[1.0, 0.0, 0.0], &[0.0, 0.0, 0.0]]));
        assert!(build_mask(&[1, 2, 3, 4]).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identical_rows_give_ln_b_minus_one() {
        let z = Matrix::from_rows(&[&[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]]);
        let (loss, _) = supcon_loss(&z, &[3, 3, 3, 3], 1.0).unwrap();
        assert!((loss - 3f64.ln()).abs() <= 1e-5);
    }

    #[test]
    fn supcon_matches_brute_force() {
        let mut rng = Rng::new(3);
        let z = unit_rows(&mut rng, 4, 3);
        let labels = [1, 2, 1, 2];
        let (loss, _) = supcon_loss(&z, &labels, 0.5).unwrap();
        assert!((loss - brute_force(&z, &labels, 0.5)).abs() <= 1e-6);
    }

    #[test]
    fn supcon_rejects_bad_input() {
        let z = Matrix::from_rows(&[&[1.0, 0.0]]);
        assert!(matches!(supcon_loss(&z, &[1], 1.0), Err(Error::Batch(_))));
        let z = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(supcon_loss(&z, &[1, 1], 0.0).is_err());
    }

    #[test]
    fn anchors_without_positives_are_skipped() {
        let mut rng = Rng::new(4);
        let z = unit_rows(&mut rng, 5, 3);
        let labels = [1, 1, 2, 3, 4];
        let (loss, _) = supcon_loss(&z, &labels, 0.3).unwrap();
        assert!((loss - brute_force(&z, &labels, 0.3)).abs() <= 1e-9);
        let (loss, grad) = supcon_loss(&z, &[1, 2, 3, 4, 5], 0.3).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn supcon_gradient_matches_finite_differences() {
        let mut rng = Rng::new(5);
        let z = unit_rows(&mut rng, 6, 4);
        let labels = [0, 1, 0, 1, 2, 2];
        let (_, grad) = supcon_loss(&z, &labels, 0.5).unwrap();
        let h = 1e-5;
        let mut numeric = Matrix::zeros(6, 4);
        for k in 0..24 {
            let mut zp = z.clone();
            zp.data_mut()[k] += h;
            let mut zm = z.clone();
            zm.data_mut()[k] -= h;
            let lp = supcon_loss(&zp, &labels, 0.5).unwrap().0;
            let lm = supcon_loss(&zm, &labels, 0.5).unwrap().0;
            numeric.data_mut()[k] = (lp - lm) / (2.0 * h);
        }
        assert!(max_relative_error(&[grad], &[numeric], 1e-6) <= 1e-4);
    }

    #[test]
    fn projector_gradient_matches_finite_differences() {
        let mut rng = Rng::new(6);
        let mut proj = ProjectorParams::new(5, 6, 8, 2, &mut rng).unwrap();
        for p in proj.params_mut() {
            let (r, c) = p.shape();
            p.value.add_assign(&rng.normal_matrix(r, c, 0.2));
        }
        let e = rng.normal_matrix(7, 5, 1.0);
        let batch = SupConBatch {
            indices: vec![0, 3, 5, 6, 1, 2],
            head: 1,
            labels: vec![1, 1, 2, 2, 3, 3],
        };
        proj.zero_grads();
        accumulate_batch_gradients(&mut proj, &e, &batch, 0.2).unwrap();
        let analytic: Vec<Matrix> = proj.params().iter().map(|p| p.grad.clone()).collect();
        let numeric = finite_difference_gradient(&mut proj, |p| batch_loss(p, &e, &batch, 0.2).unwrap(), 1e-4);
        let err = max_relative_error(&analytic, &numeric, 1e-6);
        assert!(err <= 1e-4, "rel err {err}");
        assert!(analytic[2].data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn sampler_batches_are_p_by_k() {
        // 6 classes of 9, one of 7, some sentinel items.
        let mut labels = Vec::new();
        for c in 1..=6 {
            labels.extend(std::iter::repeat_n(c, 9));
        }
        labels.extend(std::iter::repeat_n(7, 7));
        labels.extend(std::iter::repeat_n(SENTINEL_CLASS, 10));
        let mut rng = Rng::new(7);
        let batches = pk_sample(&labels, 4, 8, 0, "genre", &mut rng).unwrap();
        assert_eq!(batches.len(), 2);
        let mut seen = std::collections::BTreeSet::new();
        for b in &batches {
            assert_eq!(b.indices.len(), 32);
            let mut distinct: Vec<usize> = b.labels.clone();
            distinct.dedup();
            assert_eq!(distinct.len(), 4);
            for (&i, &l) in b.indices.iter().zip(&b.labels) {
                assert_eq!(labels[i], l);
                assert_ne!(l, 7);
                assert_ne!(l, SENTINEL_CLASS);
            }
            let mut idx = b.indices.clone();
            idx.sort_unstable();
            idx.dedup();
            assert_eq!(idx.len(), 32);
            seen.extend(b.labels.iter().copied());
        }
        assert_eq!(seen, (1..=6).collect());
    }

    #[test]
    fn sampler_rejects_too_few_classes() {
        let labels: Vec<usize> = (0..30).map(|i| 1 + i % 3).collect();
        let err = pk_sample(&labels, 4, 8, 1, "brand", &mut Rng::new(8)).unwrap_err();
        match err {
            Error::Sampler { facet, .. } => assert_eq!(facet, "brand"),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn planted(items: usize, classes: usize, seed: u64) -> (Matrix, FacetTable) {
        // Two facets; text vectors are the sum of a class direction per facet
        // plus noise.
        let mut rng = Rng::new(seed);
        let dim = 16;
        let dirs0 = rng.normal_matrix(classes, dim, 1.0);
        let dirs1 = rng.normal_matrix(classes, dim, 1.0);
        let mut e = Matrix::zeros(items, dim);
        let mut raw = Vec::new();
        for i in 0..items {
            let (a, b) = (i % classes, (i / classes) % classes);
            for c in 0..dim {
                e.set(i, c, dirs0.get(a, c) + dirs1.get(b, c) + rng.normal(0.0, 0.3));
            }
            raw.push(vec![Some(format!("a{a}")), Some(format!("b{b}"))]);
        }
        (e, FacetTable::from_raw(&["genre", "director"], &raw))
    }

    fn small_cfg(epochs: usize) -> PretrainConfig {
        PretrainConfig {
            tau: 0.1,
            p: 2,
            k: 4,
            epochs,
            adam: AdamConfig::default(),
            seed: 11,
        }
    }

    #[test]
    fn alternating_step_freezes_other_heads() {
        let (e, facets) = planted(36, 3, 9);
        let proj = ProjectorParams::new(16, 16, 8, 2, &mut Rng::new(10)).unwrap();
        let before = proj.clone();
        let mut cfg = small_cfg(1);
        cfg.p = 2;
        // A single-facet schedule touches only head 0.
        let solo = facets.select(&[0]).unwrap();
        let mut one = proj.clone();
        one.heads.truncate(1);
        let trained = alternating_pretrain(&e, &solo, one, &cfg, |_| {}).unwrap();
        assert_ne!(trained.heads[0].weight.value, before.heads[0].weight.value);

        let mut p = proj.clone();
        let batch = &pk_sample(&facets.labels[0], 2, 4, 0, "genre", &mut Rng::new(1)).unwrap()[0];
        p.zero_grads();
        accumulate_batch_gradients(&mut p, &e, batch, 0.1).unwrap();
        p.shared_w.adam_step(&cfg.adam);
        p.shared_b.adam_step(&cfg.adam);
        p.heads[0].weight.adam_step(&cfg.adam);
        p.heads[0].bias.adam_step(&cfg.adam);
        assert_eq!(p.heads[1], before.heads[1]);
        assert_ne!(p.shared_w.value, before.shared_w.value);
    }

    #[test]
    fn alternating_schedule_round_robins_heads() {
        let (e, facets) = planted(36, 3, 12);
        let proj = ProjectorParams::new(16, 16, 8, 2, &mut Rng::new(13)).unwrap();
        let mut heads = Vec::new();
        alternating_pretrain(&e, &facets, proj, &small_cfg(2), |l| heads.push(l.head)).unwrap();
        assert!(!heads.is_empty());
        for w in heads.chunks(2) {
            assert_eq!(w, &[0, 1][..w.len()]);
        }
    }

    #[test]
    fn pretraining_lowers_probe_loss_and_clusters() {
        let (e, facets) = planted(48, 4, 14);
        let proj = ProjectorParams::new(16, 16, 8, 2, &mut Rng::new(15)).unwrap();
        let probes: Vec<SupConBatch> = (0..2)
            .map(|h| pk_sample(&facets.labels[h], 2, 4, h, "f", &mut Rng::new(99)).unwrap()[0].clone())
            .collect();
        let before: Vec<f64> = probes.iter().map(|b| batch_loss(&proj, &e, b, 0.1).unwrap()).collect();
        let cfg = small_cfg(40);
        let a = alternating_pretrain(&e, &facets, proj.clone(), &cfg, |_| {}).unwrap();
        let b = alternating_pretrain(&e, &facets, proj, &cfg, |_| {}).unwrap();
        assert_eq!(a, b);
        for (h, probe) in probes.iter().enumerate() {
            assert!(batch_loss(&a, &e, probe, 0.1).unwrap() < before[h]);
        }
        let z = facet_embeddings(&a, &e).unwrap();
        for h in 0..2 {
            let (intra, inter) = cluster_separation(&z[h], &facets.labels[h]);
            assert!(intra > inter, "head {h}: {intra} vs {inter}");
        }
    }

    #[test]
    fn pretrain_rejects_facet_head_mismatch() {
        let (e, facets) = planted(36, 3, 16);
        let proj = ProjectorParams::new(16, 16, 9, 3, &mut Rng::new(17)).unwrap();
        assert!(alternating_pretrain(&e, &facets, proj, &small_cfg(1), |_| {}).is_err());
    }

    #[test]
    fn export_examples() {
        let mut rng = Rng::new(18);
        let mut proj = ProjectorParams::new(3, 4, 4, 2, &mut rng).unwrap();
        proj.shared_b.value.fill(5.0);
        let e = rng.normal_matrix(5, 3, 1.0);
        let out = export_item_embeddings(&proj, &e).unwrap();
        let hidden = encode_items(&e, &proj).unwrap();
        for r in 0..5 {
            let row = out.row(r);
            assert!((dot(row, row).sqrt() - 2f64.sqrt()).abs() <= 1e-5);
            for h in 0..2 {
                let part = &row[2 * h..2 * h + 2];
                assert!((dot(part, part).sqrt() - 1.0).abs() <= 1e-5);
                assert_eq!(part, &project_facet(hidden.row(r), &proj, h).unwrap()[..]);
            }
        }
    }

    proptest! {
        #[test]
        fn supcon_oracle_and_invariances(seed in 0u64..1000, b in 2usize..=8, tau in 0.05f64..2.0) {
            let mut rng = Rng::new(seed);
            let z = unit_rows(&mut rng, b, 3);
            let labels: Vec<usize> = (0..b).map(|_| rng.below(3)).collect();
            let (loss, _) = supcon_loss(&z, &labels, tau).unwrap();
            if labels.iter().enumerate().any(|(i, l)| labels.iter().enumerate().any(|(j, m)| i != j && l == m)) {
                prop_assert!((loss - brute_force(&z, &labels, tau)).abs() <= 1e-6);
            }
            // A random rotation: orthonormalize a Gaussian 3×3.
            let g = rng.normal_matrix(3, 3, 1.0);
            let mut q: Vec<Vec<f64>> = Vec::new();
            for r in 0..3 {
                let mut v = g.row(r).to_vec();
                for u in &q {
                    let p = dot(&v, u);
                    v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
                }
                q.push(normalize(&v));
            }
            let qm = Matrix::from_rows(&[&q[0], &q[1], &q[2]]);
            let rotated = z.matmul(&qm).unwrap();
            prop_assert!((supcon_loss(&rotated, &labels, tau).unwrap().0 - loss).abs() <= 1e-6);

            let m = build_mask(&labels);
            for i in 0..b {
                prop_assert_eq!(m.get(i, i), 0.0);
                for j in 0..b {
                    prop_assert_eq!(m.get(i, j), m.get(j, i));
                }
            }
        }

        #[test]
        fn fair_epoch_covers_all_valid_classes(seed in 0u64..500, classes in 4usize..12, extra in 0usize..4) {
            let mut labels = Vec::new();
            for c in 1..=classes {
                labels.extend(std::iter::repeat_n(c, 4 + (c % (extra + 1))));
            }
            labels.extend(std::iter::repeat_n(classes + 1, 3));
            let batches = pk_sample(&labels, 3, 4, 0, "f", &mut Rng::new(seed)).unwrap();
            let mut seen = std::collections::BTreeSet::new();
            for b in &batches {
                prop_assert_eq!(b.indices.len(), 12);
                seen.extend(b.labels.iter().copied());
            }
            prop_assert_eq!(seen, (1..=classes).collect());
            prop_assert_eq!(batches.len(), classes.div_ceil(3));
        }
    }
}
