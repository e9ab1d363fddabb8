//! Full-ranking leave-one-out evaluation and gate explanations.

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::data::{leave_one_out_split, Catalog, SequenceDataset};
use crate::error::{Error, Result};
use crate::fame::FameModel;

/// 1-based rank of `target`; ties go to the lower item index.
pub fn rank_of_target(scores: &[f64], target: usize) -> usize {
    let st = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > st || (s == st && j < target))
        .count()
}

pub fn hr_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Valid,
    Test,
}

impl SplitKind {
    pub fn name(self) -> &'static str {
        match self {
            SplitKind::Valid => "valid",
            SplitKind::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "valid" => Ok(SplitKind::Valid),
            "test" => Ok(SplitKind::Test),
            other => Err(Error::Config(format!("unknown split {other:?}; expected valid or test"))),
        }
    }

    /// `(prefix, target)` for this split of a full user sequence.
    pub fn instance(self, seq: &[usize]) -> Result<(&[usize], usize)> {
        let s = leave_one_out_split(seq)?;
        Ok(match self {
            SplitKind::Valid => (s.valid_prefix, s.valid_target),
            SplitKind::Test => (s.test_prefix, s.test_target),
        })
    }
}

/// Anything that maps a history prefix to one score per catalog item.
pub trait Scorer: Sync {
    fn score(&self, prefix: &[usize]) -> Result<Vec<f64>>;
}

impl Scorer for Backbone {
    fn score(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        self.scores(prefix)
    }
}

impl Scorer for FameModel {
    fn score(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        self.scores(prefix)
    }
}

/// Adapts a closure to [`Scorer`].
pub struct FnScorer<F>(pub F);

impl<F> Scorer for FnScorer<F>
where
    F: Fn(&[usize]) -> Vec<f64> + Sync,
{
    fn score(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        Ok((self.0)(prefix))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    /// Exclude items already in the prefix from the candidate set.
    pub filter_history: bool,
    /// Worker threads; `None` uses the global pool.
    pub threads: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            ks: vec![5, 10, 20],
            filter_history: false,
            threads: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub k: usize,
    pub hr: f64,
    pub ndcg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub users: usize,
    pub rows: Vec<MetricRow>,
}

impl MetricsReport {
    pub fn from_ranks(split: SplitKind, ranks: &[usize], ks: &[usize]) -> Self {
        let n = ranks.len().max(1) as f64;
        let rows = ks
            .iter()
            .map(|&k| {
                let (mut hr, mut ndcg) = (0.0, 0.0);
                for &r in ranks {
                    hr += hr_at_k(r, k);
                    ndcg += ndcg_at_k(r, k);
                }
                MetricRow {
                    k,
                    hr: hr / n,
                    ndcg: ndcg / n,
                }
            })
            .collect();
        MetricsReport {
            split: split.name().to_string(),
            users: ranks.len(),
            rows,
        }
    }

    fn row(&self, k: usize) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.k == k)
    }

    pub fn hr(&self, k: usize) -> Option<f64> {
        self.row(k).map(|r| r.hr)
    }

    pub fn ndcg(&self, k: usize) -> Option<f64> {
        self.row(k).map(|r| r.ndcg)
    }

    pub fn csv_header() -> &'static str {
        "split,k,HR,NDCG,users"
    }

    /// CSV body without the header line.
    pub fn csv_rows(&self) -> String {
        self.rows
            .iter()
            .map(|r| format!("{},{},{:.6},{:.6},{}\n", self.split, r.k, r.hr, r.ndcg, self.users))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}", Self::csv_header(), self.csv_rows())
    }

    pub fn to_pretty(&self) -> String {
        let mut out = format!("{} ({} users)\n", self.split, self.users);
        out.push_str("    k        HR      NDCG\n");
        for r in &self.rows {
            out.push_str(&format!("{:>5}  {:>8.4}  {:>8.4}\n", r.k, r.hr, r.ndcg));
        }
        out
    }
}

fn rank_user<S: Scorer + ?Sized>(scorer: &S, seq: &[usize], split: SplitKind, filter: bool) -> Result<usize> {
    let (prefix, target) = split.instance(seq)?;
    let mut scores = scorer.score(prefix)?;
    if target >= scores.len() {
        return Err(Error::Index {
            index: target,
            len: scores.len(),
        });
    }
    if filter {
        for &i in prefix {
            if i != target {
                scores[i] = f64::NEG_INFINITY;
            }
        }
    }
    Ok(rank_of_target(&scores, target))
}

/// Rank of each user's split target, in user order.
pub fn user_ranks<S: Scorer + ?Sized>(
    scorer: &S,
    dataset: &SequenceDataset,
    split: SplitKind,
    opts: &EvalOptions,
) -> Result<Vec<usize>> {
    let run = || -> Result<Vec<usize>> {
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            dataset
                .sequences
                .par_iter()
                .map(|s| rank_user(scorer, s, split, opts.filter_history))
                .collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            dataset
                .sequences
                .iter()
                .map(|s| rank_user(scorer, s, split, opts.filter_history))
                .collect()
        }
    };
    #[cfg(feature = "parallel")]
    if let Some(n) = opts.threads {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        return pool.install(run);
    }
    run()
}

/// Mean HR@k and NDCG@k over all users of `dataset`.
pub fn evaluate<S: Scorer + ?Sized>(
    scorer: &S,
    dataset: &SequenceDataset,
    split: SplitKind,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    let ranks = user_ranks(scorer, dataset, split, opts)?;
    Ok(MetricsReport::from_ranks(split, &ranks, &opts.ks))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedItem {
    pub index: usize,
    pub item_id: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainReport {
    pub user: String,
    pub split: String,
    pub target: RankedItem,
    pub gate: Vec<f64>,
    pub router: Vec<Vec<f64>>,
    pub heads: Vec<Vec<RankedItem>>,
    pub fused: Vec<RankedItem>,
}

/// Top `k` items by score with the same tie rule as [`rank_of_target`].
pub fn top_k(scores: &[f64], k: usize, catalog: Option<&Catalog>) -> Vec<RankedItem> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .take(k)
        .map(|i| ranked(i, scores[i], catalog))
        .collect()
}

fn ranked(index: usize, score: f64, catalog: Option<&Catalog>) -> RankedItem {
    RankedItem {
        index,
        item_id: catalog
            .and_then(|c| c.item_ids.get(index).cloned())
            .unwrap_or_else(|| index.to_string()),
        score,
    }
}

/// Gate weights, router weights and per-head and fused top-`k` lists for
/// user `user` at the given split.
pub fn explain_user(
    model: &FameModel,
    dataset: &SequenceDataset,
    catalog: Option<&Catalog>,
    user: usize,
    split: SplitKind,
    k: usize,
) -> Result<ExplainReport> {
    let seq = dataset.sequences.get(user).ok_or(Error::Index {
        index: user,
        len: dataset.sequences.len(),
    })?;
    let (prefix, target) = split.instance(seq)?;
    let out = model.inspect(prefix)?;
    Ok(ExplainReport {
        user: dataset.user_ids.get(user).cloned().unwrap_or_else(|| user.to_string()),
        split: split.name().to_string(),
        target: ranked(target, out.fused[target], catalog),
        gate: out.gate,
        router: out.betas,
        heads: out.head_logits.iter().map(|s| top_k(s, k, catalog)).collect(),
        fused: top_k(&out.fused, k, catalog),
    })
}
