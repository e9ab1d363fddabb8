//! Two-stage training: the attention backbone first, then the facet-aware
//! final layer fine-tuned end to end.

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, ItemEmbedding};
use crate::data::{leave_one_out_split, SequenceDataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, MetricsReport, Scorer, SplitKind};
use crate::fame::{FameConfig, FameModel};
use crate::numerics::{AdamConfig, HasParams, Matrix, Param, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Item table drawn at random.
    Random,
    /// Frozen text vectors mapped to `d` by a trained affine layer.
    TextRaw,
    /// Item table loaded from facet-aware pretrained embeddings.
    TextFacet,
}

impl InitMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(InitMode::Random),
            "text_raw" => Ok(InitMode::TextRaw),
            "text_facet" => Ok(InitMode::TextFacet),
            other => Err(Error::Config(format!(
                "unknown init_mode {other:?}; expected random, text_raw or text_facet"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            InitMode::Random => "random",
            InitMode::TextRaw => "text_raw",
            InitMode::TextFacet => "text_facet",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    /// Users per mini-batch.
    pub batch_size: usize,
    pub backbone_epochs: usize,
    pub finetune_epochs: usize,
    pub seed: u64,
    pub init_mode: InitMode,
    /// Multiplier applied to pretrained item rows in `text_facet` mode.
    pub item_scale: f64,
    /// Validate every this many epochs; 0 disables.
    pub eval_every: usize,
    /// Stop after this many validations without a better NDCG@10.
    pub patience: Option<usize>,
    pub eval: EvalOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            batch_size: 256,
            backbone_epochs: 200,
            finetune_epochs: 100,
            seed: 42,
            init_mode: InitMode::Random,
            item_scale: 1.0,
            eval_every: 0,
            patience: None,
            eval: EvalOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.backbone_epochs == 0 || self.finetune_epochs == 0 {
            return Err(Error::Config("epoch counts must be positive".into()));
        }
        if self.adam.lr.is_nan() || self.adam.lr <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.patience.is_some() && self.eval_every == 0 {
            return Err(Error::Config("early stopping needs eval_every > 0".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: String,
    /// 0 is the state before any update.
    pub epoch: usize,
    pub loss: f64,
    pub valid: Option<MetricsReport>,
}

impl EpochLog {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("log entries serialize")
    }
}

/// Common interface of the two trainable models.
pub trait SequenceModel: HasParams + Scorer + Clone {
    fn max_len(&self) -> usize;
    fn loss(&self, input: &[usize], targets: &[usize]) -> Result<f64>;
    fn accumulate_gradients(
        &mut self,
        input: &[usize],
        targets: &[usize],
        rng: Option<&mut Rng>,
        weight: f64,
    ) -> Result<f64>;
}

impl SequenceModel for Backbone {
    fn max_len(&self) -> usize {
        self.config.max_len
    }
    fn loss(&self, input: &[usize], targets: &[usize]) -> Result<f64> {
        Backbone::loss(self, input, targets)
    }
    fn accumulate_gradients(&mut self, input: &[usize], targets: &[usize], rng: Option<&mut Rng>, weight: f64) -> Result<f64> {
        Backbone::accumulate_gradients(self, input, targets, rng, weight)
    }
}

impl SequenceModel for FameModel {
    fn max_len(&self) -> usize {
        self.backbone.config.max_len
    }
    fn loss(&self, input: &[usize], targets: &[usize]) -> Result<f64> {
        FameModel::loss(self, input, targets)
    }
    fn accumulate_gradients(&mut self, input: &[usize], targets: &[usize], rng: Option<&mut Rng>, weight: f64) -> Result<f64> {
        FameModel::accumulate_gradients(self, input, targets, rng, weight)
    }
}

/// `(input, targets)` per user from the training part of each sequence,
/// keeping the last `max_len` positions. Users with a single training item
/// have no pairs and are skipped.
pub fn training_sequences(dataset: &SequenceDataset, max_len: usize) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    let mut out = Vec::with_capacity(dataset.sequences.len());
    for seq in &dataset.sequences {
        let train = leave_one_out_split(seq)?.train;
        if train.len() < 2 {
            continue;
        }
        let input = &train[..train.len() - 1];
        let targets = &train[1..];
        let start = input.len().saturating_sub(max_len);
        out.push((input[start..].to_vec(), targets[start..].to_vec()));
    }
    Ok(out)
}

/// Mean per-pair loss over all training pairs, eval mode.
pub fn dataset_loss<M: SequenceModel>(model: &M, pairs: &[(Vec<usize>, Vec<usize>)]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (input, targets) in pairs {
        total += model.loss(input, targets)? * targets.len() as f64;
        count += targets.len();
    }
    Ok(total / count.max(1) as f64)
}

fn fit<M: SequenceModel>(
    model: &mut M,
    dataset: &SequenceDataset,
    cfg: &TrainConfig,
    stage: &str,
    epochs: usize,
    mut rng: Rng,
    log: &mut dyn FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    let pairs = training_sequences(dataset, model.max_len())?;
    if pairs.is_empty() {
        return Err(Error::Input("no user has a training pair".into()));
    }
    let validate = |m: &M, epoch: usize| -> Result<Option<MetricsReport>> {
        if cfg.eval_every > 0 && epoch.is_multiple_of(cfg.eval_every) {
            Ok(Some(evaluate(m, dataset, SplitKind::Valid, &cfg.eval)?))
        } else {
            Ok(None)
        }
    };
    let mut history = Vec::with_capacity(epochs + 1);
    let first = EpochLog {
        stage: stage.to_string(),
        epoch: 0,
        loss: dataset_loss(model, &pairs)?,
        valid: validate(model, 0)?,
    };
    log(&first);
    let mut best: Option<(f64, M)> = None;
    let mut stale = 0usize;
    let mut track = |entry: &EpochLog, m: &M| -> bool {
        let (Some(patience), Some(report)) = (cfg.patience, &entry.valid) else {
            return false;
        };
        let score = report.ndcg(10).unwrap_or(report.rows[0].ndcg);
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, m.clone()));
            stale = 0;
        } else {
            stale += 1;
        }
        stale >= patience
    };
    track(&first, model);
    history.push(first);

    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 1..=epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let n: usize = chunk.iter().map(|&u| pairs[u].1.len()).sum();
            let weight = 1.0 / n as f64;
            model.zero_grads();
            for &u in chunk {
                let (input, targets) = &pairs[u];
                total += model.accumulate_gradients(input, targets, Some(&mut rng), weight)?;
            }
            count += n;
            model.adam_step_all(&cfg.adam);
        }
        let entry = EpochLog {
            stage: stage.to_string(),
            epoch,
            loss: total / count as f64,
            valid: validate(model, epoch)?,
        };
        log(&entry);
        let stop = track(&entry, model);
        history.push(entry);
        if stop {
            break;
        }
    }
    if let Some((_, m)) = best {
        *model = m;
    }
    Ok(history)
}

/// Builds the initial backbone for `cfg.init_mode`. `text` is the raw text
/// matrix for `text_raw` or the pretrained embeddings for `text_facet`.
pub fn init_backbone(
    config: &BackboneConfig,
    num_items: usize,
    cfg: &TrainConfig,
    text: Option<&Matrix>,
    rng: &mut Rng,
) -> Result<Backbone> {
    let need_text = |mode: InitMode| {
        text.ok_or_else(|| Error::Config(format!("init_mode {} needs an embedding file", mode.name())))
    };
    let check_rows = |m: &Matrix| -> Result<()> {
        if m.rows() != num_items {
            return Err(Error::Config(format!(
                "embedding file has {} rows for {num_items} items",
                m.rows()
            )));
        }
        Ok(())
    };
    match cfg.init_mode {
        InitMode::Random => Backbone::new(config.clone(), num_items, rng),
        InitMode::TextRaw => {
            let t = need_text(InitMode::TextRaw)?;
            check_rows(t)?;
            let items = ItemEmbedding::Projected {
                text: t.clone(),
                weight: Param::new(rng.xavier(t.cols(), config.d)),
                bias: Param::zeros(1, config.d),
            };
            Backbone::with_items(config.clone(), items, rng)
        }
        InitMode::TextFacet => {
            let t = need_text(InitMode::TextFacet)?;
            check_rows(t)?;
            let mut table = t.clone();
            table.scale_assign(cfg.item_scale);
            Backbone::with_items(config.clone(), ItemEmbedding::Table(Param::new(table)), rng)
        }
    }
}

/// Stage one: trains the backbone on next-item cross-entropy.
pub fn train_backbone(
    dataset: &SequenceDataset,
    config: &BackboneConfig,
    cfg: &TrainConfig,
    text: Option<&Matrix>,
    mut log: impl FnMut(&EpochLog),
) -> Result<(Backbone, Vec<EpochLog>)> {
    cfg.validate()?;
    if dataset.sequences.is_empty() {
        return Err(Error::Input("dataset has no users".into()));
    }
    let root = Rng::new(cfg.seed);
    let mut model = init_backbone(config, dataset.num_items, cfg, text, &mut root.fork(1))?;
    let history = fit(&mut model, dataset, cfg, "backbone", cfg.backbone_epochs, root.fork(2), &mut log)?;
    Ok((model, history))
}

/// Stage two: swaps in the facet-aware final layer and fine-tunes
/// everything.
pub fn finetune_fame(
    backbone: &Backbone,
    dataset: &SequenceDataset,
    fame: &FameConfig,
    cfg: &TrainConfig,
    mut log: impl FnMut(&EpochLog),
) -> Result<(FameModel, Vec<EpochLog>)> {
    cfg.validate()?;
    if backbone.num_items() != dataset.num_items {
        return Err(Error::Config(format!(
            "backbone scores {} items but the dataset has {}",
            backbone.num_items(),
            dataset.num_items
        )));
    }
    let root = Rng::new(cfg.seed);
    let mut model = FameModel::init_from_backbone(backbone, fame.clone(), &mut root.fork(3))?;
    let history = fit(&mut model, dataset, cfg, "finetune", cfg.finetune_epochs, root.fork(4), &mut log)?;
    Ok((model, history))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub heads: usize,
    pub experts: usize,
    pub report: MetricsReport,
}

pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let mut out = String::from("H,N,HR@20,NDCG@20\n");
    for c in cells {
        out.push_str(&format!(
            "{},{},{:.6},{:.6}\n",
            c.heads,
            c.experts,
            c.report.hr(20).unwrap_or(f64::NAN),
            c.report.ndcg(20).unwrap_or(f64::NAN)
        ));
    }
    out
}

/// For each `H`, trains a backbone with `H` heads; for each `N`, fine-tunes
/// from it and records validation metrics. Every cell uses `cfg.seed`.
pub fn grid_sweep(
    dataset: &SequenceDataset,
    backbone: &BackboneConfig,
    fame: &FameConfig,
    heads: &[usize],
    experts: &[usize],
    cfg: &TrainConfig,
    text: Option<&Matrix>,
    mut log: impl FnMut(&EpochLog),
) -> Result<Vec<SweepCell>> {
    let mut eval = cfg.eval.clone();
    if !eval.ks.contains(&20) {
        eval.ks.push(20);
    }
    let mut cells = Vec::with_capacity(heads.len() * experts.len());
    for &h in heads {
        let bcfg = BackboneConfig {
            heads: h,
            ..backbone.clone()
        };
        let (b, _) = train_backbone(dataset, &bcfg, cfg, text, &mut log)?;
        for &n in experts {
            let fcfg = FameConfig {
                heads: h,
                experts: n,
                ..fame.clone()
            };
            let (m, _) = finetune_fame(&b, dataset, &fcfg, cfg, &mut log)?;
            cells.push(SweepCell {
                heads: h,
                experts: n,
                report: evaluate(&m, dataset, SplitKind::Valid, &eval)?,
            });
        }
    }
    Ok(cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::{encode_backbone, encode_fame};
    use crate::fame::ExpertInit;

    /// Each user repeats a short cycle drawn from one of a few groups.
    fn cyclic(users: usize, items: usize, seed: u64) -> SequenceDataset {
        let mut rng = Rng::new(seed);
        let groups = 5;
        let per = items / groups;
        let sequences = (0..users)
            .map(|_| {
                let g = rng.below(groups);
                let len = 6 + rng.below(6);
                let off = rng.below(per);
                (0..len).map(|i| g * per + (off + i) % per).collect()
            })
            .collect();
        SequenceDataset {
            user_ids: (0..users).map(|u| u.to_string()).collect(),
            sequences,
            num_items: items,
            max_len: 12,
        }
    }

    fn bcfg(heads: usize) -> BackboneConfig {
        BackboneConfig {
            d: 16,
            heads,
            layers: 2,
            max_len: 12,
            dropout: 0.1,
            ln_eps: 1e-5,
        }
    }

    fn tcfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 16,
            backbone_epochs: epochs,
            finetune_epochs: epochs,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    fn fcfg(heads: usize, experts: usize) -> FameConfig {
        FameConfig {
            d: 16,
            heads,
            experts,
            dropout: 0.1,
            ln_eps: 1e-5,
            expert_noise: 0.01,
            expert_init: ExpertInit::Pretrained,
        }
    }

    #[test]
    fn initial_loss_is_log_catalog_size() {
        let ds = cyclic(40, 50, 1);
        let (_, hist) = train_backbone(&ds, &bcfg(2), &tcfg(1), None, |_| {}).unwrap();
        let ln = 50f64.ln();
        assert!((hist[0].loss - ln).abs() <= 0.05 * ln, "{}", hist[0].loss);
        assert_eq!(hist.len(), 2);
    }

    #[test]
    fn backbone_training_is_deterministic_and_learns() {
        let ds = cyclic(60, 50, 2);
        let mut cfg = tcfg(50);
        cfg.batch_size = 4;
        let (a, hist) = train_backbone(&ds, &bcfg(2), &cfg, None, |_| {}).unwrap();
        let (b, _) = train_backbone(&ds, &bcfg(2), &cfg, None, |_| {}).unwrap();
        assert_eq!(encode_backbone(&a).unwrap(), encode_backbone(&b).unwrap());
        let last = hist.last().unwrap().loss;
        assert!(last < 0.25 * hist[0].loss, "{} -> {}", hist[0].loss, last);
    }

    #[test]
    fn text_modes_need_embeddings() {
        let ds = cyclic(10, 20, 3);
        let mut cfg = tcfg(1);
        cfg.init_mode = InitMode::TextRaw;
        assert!(matches!(train_backbone(&ds, &bcfg(2), &cfg, None, |_| {}), Err(Error::Config(_))));
        cfg.init_mode = InitMode::TextFacet;
        assert!(matches!(train_backbone(&ds, &bcfg(2), &cfg, None, |_| {}), Err(Error::Config(_))));
        let wrong = Matrix::zeros(20, 8);
        assert!(train_backbone(&ds, &bcfg(2), &cfg, Some(&wrong), |_| {}).is_err());
    }

    #[test]
    fn text_modes_initialize_items() {
        let ds = cyclic(10, 20, 4);
        let mut rng = Rng::new(5);
        let mut cfg = tcfg(1);
        cfg.init_mode = InitMode::TextRaw;
        let raw = rng.normal_matrix(20, 7, 1.0);
        let b = init_backbone(&bcfg(2), 20, &cfg, Some(&raw), &mut rng).unwrap();
        assert!(matches!(&b.items, ItemEmbedding::Projected { text, .. } if *text == raw));
        assert!(train_backbone(&ds, &bcfg(2), &cfg, Some(&raw), |_| {}).is_ok());

        cfg.init_mode = InitMode::TextFacet;
        cfg.item_scale = 0.5;
        let e = rng.normal_matrix(20, 16, 1.0);
        let b = init_backbone(&bcfg(2), 20, &cfg, Some(&e), &mut rng).unwrap();
        let mut want = e.clone();
        want.scale_assign(0.5);
        assert_eq!(*b.items.matrix(), want);
    }

    #[test]
    fn finetune_is_deterministic_and_loss_falls() {
        let ds = cyclic(60, 50, 6);
        let cfg = tcfg(10);
        let (b, _) = train_backbone(&ds, &bcfg(2), &cfg, None, |_| {}).unwrap();
        let mut fine = cfg.clone();
        fine.finetune_epochs = 5;
        let (m1, hist) = finetune_fame(&b, &ds, &fcfg(2, 2), &fine, |_| {}).unwrap();
        let (m2, _) = finetune_fame(&b, &ds, &fcfg(2, 2), &fine, |_| {}).unwrap();
        assert_eq!(encode_fame(&m1).unwrap(), encode_fame(&m2).unwrap());
        for w in hist[1..].windows(2) {
            assert!(w[1].loss <= w[0].loss + 1e-6, "{} -> {}", w[0].loss, w[1].loss);
        }
        assert!(finetune_fame(&b, &ds, &fcfg(4, 2), &fine, |_| {}).is_err());
    }

    #[test]
    fn logs_are_json_lines_with_validation() {
        let ds = cyclic(20, 25, 7);
        let mut cfg = tcfg(2);
        cfg.eval_every = 1;
        let mut lines = Vec::new();
        train_backbone(&ds, &bcfg(2), &cfg, None, |l| lines.push(l.to_json_line())).unwrap();
        assert_eq!(lines.len(), 3);
        let parsed: EpochLog = serde_json::from_str(&lines[2]).unwrap();
        assert_eq!(parsed.epoch, 2);
        assert_eq!(parsed.stage, "backbone");
        assert!(parsed.valid.is_some());
    }

    #[test]
    fn early_stopping_halts_and_keeps_best() {
        let ds = cyclic(20, 25, 8);
        let mut cfg = tcfg(60);
        cfg.eval_every = 1;
        cfg.patience = Some(2);
        cfg.adam.lr = 0.5;
        let (_, hist) = train_backbone(&ds, &bcfg(2), &cfg, None, |_| {}).unwrap();
        assert!(hist.len() < 61);
        cfg.eval_every = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn sweep_cells_match_single_runs() {
        let ds = cyclic(30, 25, 9);
        let cfg = tcfg(2);
        let cells = grid_sweep(&ds, &bcfg(2), &fcfg(2, 2), &[1, 2], &[1], &cfg, None, |_| {}).unwrap();
        assert_eq!(cells.len(), 2);
        assert_eq!(sweep_csv(&cells).lines().count(), 3);
        for cell in &cells {
            let b = BackboneConfig {
                heads: cell.heads,
                ..bcfg(2)
            };
            let (bk, _) = train_backbone(&ds, &b, &cfg, None, |_| {}).unwrap();
            let (m, _) = finetune_fame(&bk, &ds, &fcfg(cell.heads, 1), &cfg, |_| {}).unwrap();
            let mut eval = cfg.eval.clone();
            eval.ks.push(20);
            eval.ks.dedup();
            let single = evaluate(&m, &ds, SplitKind::Valid, &eval).unwrap();
            assert_eq!(single, cell.report);
        }
    }
}
