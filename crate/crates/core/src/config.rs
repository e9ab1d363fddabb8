//! Flat `key = value` run configuration.
//!
//! Every tunable has a default. A config file may override any subset and
//! command-line flags override the file. Unknown keys are rejected, and all
//! values are parsed and cross-checked by [`Config::validate`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::data::{PriceBins, Scheme};
use crate::error::{Error, Result};
use crate::eval::EvalOptions;
use crate::fame::{ExpertInit, FameConfig};
use crate::numerics::{AdamConfig, LN_EPS};
use crate::pretrain::PretrainConfig;
use crate::trainer::{InitMode, TrainConfig};

/// `(key, default, description)`
pub const KEYS: &[(&str, &str, &str)] = &[
    ("scheme", "amazon", "metadata scheme: amazon or movielens"),
    ("k_core", "5", "minimum interactions per user and per item"),
    ("max_len", "50", "maximum sequence length"),
    ("price_edges", "0,50,100,150,200,250,300,350,400,450", "lower edges of the price bins"),
    ("d", "64", "embedding dimension"),
    ("heads", "2", "attention heads H"),
    ("layers", "2", "backbone layers L"),
    ("dropout", "0.2", "dropout rate"),
    ("experts", "2", "query experts per head N"),
    ("expert_noise", "0.01", "std of the noise added to copied expert queries"),
    ("expert_init", "pretrained", "expert query init: pretrained or random"),
    ("lr", "0.001", "Adam learning rate"),
    ("beta1", "0.9", "Adam beta1"),
    ("beta2", "0.999", "Adam beta2"),
    ("adam_eps", "1e-8", "Adam epsilon"),
    ("batch_size", "256", "users per mini-batch"),
    ("backbone_epochs", "200", "backbone training epochs"),
    ("finetune_epochs", "100", "fine-tuning epochs"),
    ("seed", "42", "random seed"),
    ("init_mode", "random", "item table init: random, text_raw or text_facet"),
    ("item_scale", "1.0", "scale applied to pretrained item rows"),
    ("eval_every", "0", "validate every n epochs (0 = never)"),
    ("patience", "0", "early-stopping patience in validations (0 = off)"),
    ("ks", "5,10,20", "cutoffs for HR and NDCG"),
    ("filter_history", "false", "drop history items from the candidates"),
    ("tau", "0.1", "contrastive temperature"),
    ("p", "4", "classes per contrastive batch"),
    ("k", "8", "samples per class"),
    ("pretrain_epochs", "300", "facet pre-training epochs"),
    ("pretrain_heads", "2", "facet heads of the projector"),
    ("pretrain_dim", "64", "output size of the projector (sum over heads)"),
    ("pretrain_mid", "0", "hidden size of the projector (0 = pretrain_dim)"),
    ("facets", "1,2", "1-based facet indices used for pre-training"),
    ("embed_dim", "64", "pseudo text-embedding dimension"),
    ("embed_seed", "7", "pseudo text-embedding seed"),
    ("threads", "0", "evaluation threads (0 = all cores)"),
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            values: KEYS
                .iter()
                .map(|(k, v, _)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

fn parse_list<T: FromStr>(key: &str, raw: &str) -> Result<Vec<T>> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {s:?} in {raw:?}")))
        })
        .collect()
}

impl Config {
    /// Overrides one key. Values are checked later by `validate`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.trim().to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown config key {key:?}"))),
        }
    }

    /// Applies `key = value` lines. `#` starts a comment; blank lines are
    /// ignored.
    pub fn apply_text(&mut self, text: &str, source: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: source.to_string(),
                line: n + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            self.set(k.trim(), v).map_err(|e| Error::Parse {
                path: source.to_string(),
                line: n + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    /// Defaults, then the optional file, then `overrides` in order.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Config::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            cfg.apply_text(&text, &path.display().to_string())?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("config key {key:?} is not declared"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|_| Error::Config(format!("{key}: cannot parse {raw:?}")))
    }

    /// Sorted `key = value` lines.
    pub fn canonical_text(&self) -> String {
        self.values.iter().fold(String::new(), |mut out, (k, v)| {
            let _ = writeln!(out, "{k} = {v}");
            out
        })
    }

    /// SHA-256 of the canonical text, lowercase hex.
    pub fn hash(&self) -> String {
        sha256_hex(self.canonical_text().as_bytes())
    }

    pub fn scheme(&self) -> Result<Scheme> {
        Scheme::parse(self.raw("scheme"))
    }

    pub fn price_bins(&self) -> Result<PriceBins> {
        let edges: Vec<f64> = parse_list("price_edges", self.raw("price_edges"))?;
        if edges.is_empty() || edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("price_edges must be strictly increasing".into()));
        }
        Ok(PriceBins { edges })
    }

    pub fn backbone(&self) -> Result<BackboneConfig> {
        let c = BackboneConfig {
            d: self.get("d")?,
            heads: self.get("heads")?,
            layers: self.get("layers")?,
            max_len: self.get("max_len")?,
            dropout: self.get("dropout")?,
            ln_eps: LN_EPS,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn fame(&self) -> Result<FameConfig> {
        let expert_init = match self.raw("expert_init") {
            "pretrained" => ExpertInit::Pretrained,
            "random" => ExpertInit::Random,
            other => {
                return Err(Error::Config(format!(
                    "expert_init: expected pretrained or random, got {other:?}"
                )))
            }
        };
        let c = FameConfig {
            d: self.get("d")?,
            heads: self.get("heads")?,
            experts: self.get("experts")?,
            dropout: self.get("dropout")?,
            ln_eps: LN_EPS,
            expert_noise: self.get("expert_noise")?,
            expert_init,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn adam(&self) -> Result<AdamConfig> {
        Ok(AdamConfig {
            lr: self.get("lr")?,
            beta1: self.get("beta1")?,
            beta2: self.get("beta2")?,
            eps: self.get("adam_eps")?,
        })
    }

    pub fn eval_options(&self) -> Result<EvalOptions> {
        let ks: Vec<usize> = parse_list("ks", self.raw("ks"))?;
        if ks.is_empty() || ks.contains(&0) {
            return Err(Error::Config("ks must list positive cutoffs".into()));
        }
        let threads: usize = self.get("threads")?;
        Ok(EvalOptions {
            ks,
            filter_history: self.get("filter_history")?,
            threads: (threads > 0).then_some(threads),
        })
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let patience: usize = self.get("patience")?;
        let c = TrainConfig {
            adam: self.adam()?,
            batch_size: self.get("batch_size")?,
            backbone_epochs: self.get("backbone_epochs")?,
            finetune_epochs: self.get("finetune_epochs")?,
            seed: self.get("seed")?,
            init_mode: InitMode::parse(self.raw("init_mode"))?,
            item_scale: self.get("item_scale")?,
            eval_every: self.get("eval_every")?,
            patience: (patience > 0).then_some(patience),
            eval: self.eval_options()?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn pretrain(&self) -> Result<PretrainConfig> {
        let c = PretrainConfig {
            tau: self.get("tau")?,
            p: self.get("p")?,
            k: self.get("k")?,
            epochs: self.get("pretrain_epochs")?,
            adam: self.adam()?,
            seed: self.get("seed")?,
        };
        c.validate()?;
        Ok(c)
    }

    /// Zero-based facet indices.
    pub fn facets(&self) -> Result<Vec<usize>> {
        let one_based: Vec<usize> = parse_list("facets", self.raw("facets"))?;
        if one_based.is_empty() || one_based.contains(&0) {
            return Err(Error::Config("facets are 1-based and must not be empty".into()));
        }
        Ok(one_based.into_iter().map(|f| f - 1).collect())
    }

    /// Parses every value and checks cross-key constraints.
    pub fn validate(&self) -> Result<()> {
        self.scheme()?;
        self.price_bins()?;
        self.backbone()?;
        self.fame()?;
        self.train()?;
        self.pretrain()?;
        let k_core: usize = self.get("k_core")?;
        if k_core == 0 {
            return Err(Error::Config("k_core must be at least 1".into()));
        }
        let heads: usize = self.get("pretrain_heads")?;
        let dim: usize = self.get("pretrain_dim")?;
        let _: usize = self.get("pretrain_mid")?;
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "pretrain_dim = {dim} is not divisible by pretrain_heads = {heads}"
            )));
        }
        if self.facets()?.len() != heads {
            return Err(Error::Config(format!(
                "{} facets listed for {heads} pretrain heads",
                self.facets()?.len()
            )));
        }
        let embed_dim: usize = self.get("embed_dim")?;
        if embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        let _: u64 = self.get("embed_seed")?;
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}
