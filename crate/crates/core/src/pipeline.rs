//! Dataset bundles and the stage glue shared by the command line and tests.
//!
//! A bundle directory holds:
//!
//! | file | content |
//! |---|---|
//! | `manifest.json` | counts, scheme, facet names and a content hash |
//! | `interactions.tsv` | interactions that survived the k-core filter |
//! | `items.txt` | item ids in catalog order |
//! | `sequences.tsv` | `user_id<TAB>space-separated item indices` |
//! | `facets.csv` | `item_id,facet_name,class_label` |
//! | `texts.tsv` | `item_id<TAB>templated text` |
//! | `config.txt` | the run configuration, when written by the CLI |
//!
//! The hash covers every file except the manifest and `config.txt`, so
//! preparing the same inputs twice yields the same manifest.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{sha256_hex, Config};
use crate::data::{
    build_sequences, build_text_string, extract_facets, k_core_filter, parse_interactions,
    pseudo_embed, Catalog, FacetTable, Interaction, MetadataRecord, PriceBins, Scheme,
    SequenceDataset,
};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};
use crate::pretrain::{alternating_pretrain, export_item_embeddings, PretrainLogEntry, ProjectorParams};

pub const BUNDLE_FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct PrepareOptions {
    pub scheme: Scheme,
    pub bins: PriceBins,
    pub k_core: usize,
    pub max_len: usize,
}

impl PrepareOptions {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        Ok(PrepareOptions {
            scheme: cfg.scheme()?,
            bins: cfg.price_bins()?,
            k_core: cfg.get("k_core")?,
            max_len: cfg.get("max_len")?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub scheme: String,
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub max_len: usize,
    pub facets: Vec<String>,
    pub hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bundle {
    pub manifest: Manifest,
    pub interactions: Vec<Interaction>,
    pub catalog: Catalog,
    pub dataset: SequenceDataset,
    pub facets: FacetTable,
}

fn one_line(s: &str) -> String {
    s.replace(['\t', '\n', '\r'], " ")
}

/// k-core filter, catalog, sequences, facet labels and item texts.
pub fn prepare(
    interactions: &[Interaction],
    metadata: &[MetadataRecord],
    opts: &PrepareOptions,
) -> Result<Bundle> {
    let kept = k_core_filter(interactions, opts.k_core);
    if kept.is_empty() {
        return Err(Error::Input(format!(
            "no interactions survive the {}-core filter",
            opts.k_core
        )));
    }
    let mut catalog = Catalog::from_interactions(&kept);
    let dataset = build_sequences(&kept, &catalog, opts.max_len)?;
    if dataset.sequences.is_empty() {
        return Err(Error::Input("no user has at least three interactions".into()));
    }
    let by_id: HashMap<&str, &MetadataRecord> =
        metadata.iter().map(|r| (r.item_id.as_str(), r)).collect();
    let mut raw = Vec::with_capacity(catalog.len());
    catalog.texts = catalog
        .item_ids
        .iter()
        .map(|id| {
            let fallback = MetadataRecord {
                item_id: id.clone(),
                ..MetadataRecord::default()
            };
            let rec = by_id.get(id.as_str()).copied().unwrap_or(&fallback);
            raw.push(extract_facets(rec, opts.scheme, &opts.bins));
            one_line(&build_text_string(rec, opts.scheme))
        })
        .collect();
    let facets = FacetTable::from_raw(&opts.scheme.facet_names(), &raw);
    let mut bundle = Bundle {
        manifest: Manifest {
            format: BUNDLE_FORMAT,
            scheme: opts.scheme.name().to_string(),
            users: dataset.sequences.len(),
            items: catalog.len(),
            interactions: kept.len(),
            max_len: opts.max_len,
            facets: facets.facet_names.clone(),
            hash: String::new(),
        },
        interactions: kept,
        catalog,
        dataset,
        facets,
    };
    bundle.manifest.hash = bundle.content_hash();
    Ok(bundle)
}

impl Bundle {
    fn file_contents(&self) -> Vec<(&'static str, String)> {
        let interactions = self
            .interactions
            .iter()
            .map(|x| format!("{}\t{}\t{}\n", x.user, x.item, x.timestamp))
            .collect();
        let items = self.catalog.item_ids.iter().map(|id| format!("{id}\n")).collect();
        let mut sequences = String::new();
        for (u, seq) in self.dataset.user_ids.iter().zip(&self.dataset.sequences) {
            let idx: Vec<String> = seq.iter().map(usize::to_string).collect();
            let _ = writeln!(sequences, "{u}\t{}", idx.join(" "));
        }
        let texts = self
            .catalog
            .item_ids
            .iter()
            .zip(&self.catalog.texts)
            .map(|(id, t)| format!("{id}\t{t}\n"))
            .collect();
        vec![
            ("interactions.tsv", interactions),
            ("items.txt", items),
            ("sequences.tsv", sequences),
            ("facets.csv", self.facets.to_csv(&self.catalog)),
            ("texts.tsv", texts),
        ]
    }

    fn content_hash(&self) -> String {
        let mut all = Vec::new();
        for (name, body) in self.file_contents() {
            all.extend_from_slice(name.as_bytes());
            all.push(0);
            all.extend_from_slice(body.as_bytes());
            all.push(0);
        }
        sha256_hex(&all)
    }

    /// Writes every bundle file; `config` goes to `config.txt` when given.
    pub fn write(&self, dir: &Path, config: Option<&Config>) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, body: &str| {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))
        };
        for (name, body) in self.file_contents() {
            put(name, &body)?;
        }
        put("manifest.json", &(serde_json::to_string_pretty(&self.manifest)? + "\n"))?;
        if let Some(cfg) = config {
            put("config.txt", &cfg.canonical_text())?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Bundle> {
        let read = |name: &str| {
            let p = dir.join(name);
            std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
        };
        let manifest: Manifest = serde_json::from_str(&read("manifest.json")?)?;
        if manifest.format != BUNDLE_FORMAT {
            return Err(Error::Format(format!("unsupported bundle format {}", manifest.format)));
        }
        let interactions = parse_interactions(&read("interactions.tsv")?, "interactions.tsv")?;
        let mut catalog = Catalog::from_ids(read("items.txt")?.lines().map(str::to_string));
        let texts: HashMap<String, String> = read("texts.tsv")?
            .lines()
            .filter_map(|l| l.split_once('\t'))
            .map(|(id, t)| (id.to_string(), t.to_string()))
            .collect();
        catalog.texts = catalog
            .item_ids
            .iter()
            .map(|id| texts.get(id).cloned().unwrap_or_default())
            .collect();
        let mut user_ids = Vec::new();
        let mut sequences = Vec::new();
        for (no, line) in read("sequences.tsv")?.lines().enumerate() {
            let bad = |msg: String| Error::Parse {
                path: "sequences.tsv".into(),
                line: no + 1,
                msg,
            };
            let (user, items) = line.split_once('\t').ok_or_else(|| bad("missing tab".into()))?;
            let seq = items
                .split_whitespace()
                .map(|s| match s.parse::<usize>() {
                    Ok(i) if i < catalog.len() => Ok(i),
                    _ => Err(bad(format!("bad item index {s:?}"))),
                })
                .collect::<Result<Vec<_>>>()?;
            user_ids.push(user.to_string());
            sequences.push(seq);
        }
        let facets = FacetTable::from_csv(&read("facets.csv")?, &catalog)?;
        let bundle = Bundle {
            dataset: SequenceDataset {
                user_ids,
                sequences,
                num_items: catalog.len(),
                max_len: manifest.max_len,
            },
            manifest,
            interactions,
            catalog,
            facets,
        };
        let hash = bundle.content_hash();
        if hash != bundle.manifest.hash {
            return Err(Error::Consistency(format!(
                "bundle content hash {hash} does not match manifest {}",
                bundle.manifest.hash
            )));
        }
        Ok(bundle)
    }
}

/// `pseudo_embed` of every catalog text, one row per item.
pub fn pseudo_text_matrix(catalog: &Catalog, dim: usize, seed: u64) -> Matrix {
    let mut m = Matrix::zeros(catalog.len(), dim);
    for (i, text) in catalog.texts.iter().enumerate() {
        m.row_mut(i).copy_from_slice(&pseudo_embed(text, dim, seed));
    }
    m
}

/// Facet pre-training with the configured facets, projector size and
/// schedule. Returns the exported item embeddings and the trained projector.
pub fn pretrain_facets(
    text: &Matrix,
    facets: &FacetTable,
    cfg: &Config,
    log: impl FnMut(&PretrainLogEntry),
) -> Result<(Matrix, ProjectorParams)> {
    let selected = facets.select(&cfg.facets()?)?;
    let heads: usize = cfg.get("pretrain_heads")?;
    let dim: usize = cfg.get("pretrain_dim")?;
    let mid = match cfg.get::<usize>("pretrain_mid")? {
        0 => dim,
        m => m,
    };
    let pcfg = cfg.pretrain()?;
    let proj = ProjectorParams::new(text.cols(), mid, dim, heads, &mut Rng::new(pcfg.seed).fork(5))?;
    let trained = alternating_pretrain(text, &selected, proj, &pcfg, log)?;
    Ok((export_item_embeddings(&trained, text)?, trained))
}
