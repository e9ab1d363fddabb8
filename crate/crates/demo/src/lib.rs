//! Browser bindings: contrastive loss on 2-D points, per-expert attention of
//! a small trained model, and gate-weighted fusion of per-head rankings.
//!
//! Every exported function returns plain numbers or JSON strings, so the
//! crate also builds and tests natively.

use fame_core::backbone::BackboneConfig;
use fame_core::config::Config;
use fame_core::eval::{top_k, RankedItem};
use fame_core::fame::{FameConfig, FameModel};
use fame_core::numerics::Matrix;
use fame_core::pipeline::{prepare, Bundle, PrepareOptions};
use fame_core::pretrain::supcon_loss;
use fame_core::synth::{generate, SynthConfig};
use fame_core::trainer::{finetune_fame, train_backbone, TrainConfig};
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn unit_points(xy: &[f64]) -> Result<Matrix, String> {
    if !xy.len().is_multiple_of(2) {
        return Err("expected x, y pairs".into());
    }
    let n = xy.len() / 2;
    let mut m = Matrix::from_vec(n, 2, xy.to_vec()).map_err(|e| e.to_string())?;
    for r in 0..n {
        let norm = m.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(format!("point {r} is at the origin"));
        }
        m.row_mut(r).iter_mut().for_each(|v| *v /= norm);
    }
    Ok(m)
}

/// Contrastive loss of 2-D points (projected onto the unit circle).
#[wasm_bindgen]
pub fn supcon_loss_2d(xy: &[f64], labels: &[u32], tau: f64) -> Result<f64, String> {
    let z = unit_points(xy)?;
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    supcon_loss(&z, &labels, tau).map(|(l, _)| l).map_err(|e| e.to_string())
}

/// The loss at each temperature in `taus`.
#[wasm_bindgen]
pub fn supcon_tau_curve(xy: &[f64], labels: &[u32], taus: &[f64]) -> Result<Vec<f64>, String> {
    taus.iter().map(|&t| supcon_loss_2d(xy, labels, t)).collect()
}

#[derive(Serialize)]
struct ItemInfo<'a> {
    index: usize,
    id: &'a str,
    text: &'a str,
}

#[derive(Serialize)]
struct HeadAttention {
    /// `experts[n][i][j]`: weight position `i` puts on position `j`.
    experts: Vec<Vec<Vec<f64>>>,
    router: Vec<f64>,
}

#[derive(Serialize)]
struct AttentionView {
    heads: Vec<HeadAttention>,
    gate: Vec<f64>,
}

#[derive(Serialize)]
struct RankingView {
    learned_gate: Vec<f64>,
    used_gate: Vec<f64>,
    heads: Vec<Vec<RankedItem>>,
    fused: Vec<RankedItem>,
}

/// A FAME model trained in place on a small planted-facet dataset.
#[wasm_bindgen]
pub struct Playground {
    bundle: Bundle,
    model: FameModel,
}

fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

#[wasm_bindgen]
impl Playground {
    /// Generates data from `seed` and trains for a few epochs (H = 2, N = 3).
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<Playground, String> {
        Self::build(seed as u64).map_err(|e| e.to_string())
    }

    fn build(seed: u64) -> fame_core::Result<Playground> {
        let synth = SynthConfig {
            users: 120,
            items: 24,
            classes: 6,
            seed,
            ..SynthConfig::default()
        };
        let data = generate(&synth)?;
        let mut cfg = Config::default();
        cfg.set("scheme", "movielens")?;
        cfg.set("max_len", "20")?;
        let bundle = prepare(&data.interactions, &data.metadata, &PrepareOptions::from_config(&cfg)?)?;
        let d = 16;
        let bcfg = BackboneConfig {
            d,
            heads: 2,
            layers: 2,
            max_len: 20,
            dropout: 0.1,
            ln_eps: fame_core::numerics::LN_EPS,
        };
        let tc = TrainConfig {
            batch_size: 16,
            backbone_epochs: 12,
            finetune_epochs: 12,
            seed,
            ..TrainConfig::default()
        };
        let (backbone, _) = train_backbone(&bundle.dataset, &bcfg, &tc, None, |_| {})?;
        let fcfg = FameConfig {
            d,
            heads: 2,
            experts: 3,
            dropout: 0.1,
            ..FameConfig::default()
        };
        let (model, _) = finetune_fame(&backbone, &bundle.dataset, &fcfg, &tc, |_| {})?;
        Ok(Playground { bundle, model })
    }

    /// JSON list of `{index, id, text}`.
    pub fn items(&self) -> String {
        let c = &self.bundle.catalog;
        let items: Vec<ItemInfo> = (0..c.len())
            .map(|i| ItemInfo {
                index: i,
                id: &c.item_ids[i],
                text: &c.texts[i],
            })
            .collect();
        serde_json::to_string(&items).unwrap_or_default()
    }

    /// A training sequence from the dataset, for a starting point.
    pub fn sample_sequence(&self, user: u32) -> Vec<u32> {
        let seqs = &self.bundle.dataset.sequences;
        let seq = &seqs[user as usize % seqs.len()];
        seq[..seq.len() - 1].iter().map(|&i| i as u32).collect()
    }

    fn check(&self, seq: &[u32]) -> Result<Vec<usize>, String> {
        let n = self.model.num_items();
        if seq.is_empty() {
            return Err("sequence is empty".into());
        }
        seq.iter()
            .map(|&i| {
                let i = i as usize;
                (i < n).then_some(i).ok_or_else(|| format!("item {i} out of range"))
            })
            .collect()
    }

    /// Per-expert attention maps and router weights for every head, as JSON.
    pub fn attention(&self, seq: &[u32]) -> Result<String, String> {
        let seq = self.check(seq)?;
        let max = self.model.backbone.config.max_len;
        let seq = &seq[seq.len().saturating_sub(max)..];
        let x = self.model.final_layer_input(seq).map_err(|e| e.to_string())?;
        let out = self.model.inspect(seq).map_err(|e| e.to_string())?;
        let mut heads = Vec::new();
        for (h, router) in out.betas.into_iter().enumerate() {
            let maps = self
                .model
                .layer
                .expert_attention_weights(&x, h)
                .map_err(|e| e.to_string())?;
            heads.push(HeadAttention {
                experts: maps.iter().map(to_rows).collect(),
                router,
            });
        }
        let view = AttentionView { heads, gate: out.gate };
        serde_json::to_string(&view).map_err(|e| e.to_string())
    }

    /// Top-`k` per head and fused with gate `[w, 1 − w]`; a negative `w`
    /// keeps the learned gate.
    pub fn rank(&self, seq: &[u32], w: f64, k: u32) -> Result<String, String> {
        let seq = self.check(seq)?;
        let out = self.model.inspect(&seq).map_err(|e| e.to_string())?;
        let used = if w < 0.0 {
            out.gate.clone()
        } else {
            let w = w.min(1.0);
            vec![w, 1.0 - w]
        };
        let n = self.model.num_items();
        let fused: Vec<f64> = (0..n)
            .map(|v| used.iter().zip(&out.head_logits).map(|(g, p)| g * p[v]).sum())
            .collect();
        let catalog = Some(&self.bundle.catalog);
        let view = RankingView {
            heads: out
                .head_logits
                .iter()
                .map(|p| top_k(p, k as usize, catalog))
                .collect(),
            fused: top_k(&fused, k as usize, catalog),
            learned_gate: out.gate,
            used_gate: used,
        };
        serde_json::to_string(&view).map_err(|e| e.to_string())
    }
}
