//! Interaction ingest, k-core filtering, leave-one-out splits, facet labels,
//! item text templates and the FEMB embedding file format.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub timestamp: u64,
}

/// Reads a `user<TAB>item<TAB>timestamp` file. Blank lines are skipped.
pub fn load_interactions(path: impl AsRef<Path>) -> Result<Vec<Interaction>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_interactions(&text, &path.display().to_string())
}

pub fn parse_interactions(text: &str, source: &str) -> Result<Vec<Interaction>> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: source.to_string(),
            line: no + 1,
            msg,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(err(format!("expected 3 tab-separated fields, got {}", fields.len())));
        }
        let timestamp = fields[2]
            .trim()
            .parse::<u64>()
            .map_err(|_| err(format!("timestamp `{}` is not a non-negative integer", fields[2])))?;
        out.push(Interaction {
            user: fields[0].to_string(),
            item: fields[1].to_string(),
            timestamp,
        });
    }
    Ok(out)
}

/// Iteratively drops users and items with fewer than `k` interactions until
/// nothing changes. Input order is preserved among survivors.
pub fn k_core_filter(interactions: &[Interaction], k: usize) -> Vec<Interaction> {
    let mut alive: Vec<bool> = vec![true; interactions.len()];
    loop {
        let mut user_deg: HashMap<&str, usize> = HashMap::new();
        let mut item_deg: HashMap<&str, usize> = HashMap::new();
        for (x, _) in interactions.iter().zip(&alive).filter(|(_, a)| **a) {
            *user_deg.entry(&x.user).or_default() += 1;
            *item_deg.entry(&x.item).or_default() += 1;
        }
        let mut changed = false;
        for (x, a) in interactions.iter().zip(alive.iter_mut()) {
            if *a && (user_deg[x.user.as_str()] < k || item_deg[x.item.as_str()] < k) {
                *a = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    interactions
        .iter()
        .zip(&alive)
        .filter(|(_, a)| **a)
        .map(|(x, _)| x.clone())
        .collect()
}

/// Dense item index space. Ids are ordered by first appearance.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Catalog {
    pub item_ids: Vec<String>,
    pub index_of: HashMap<String, usize>,
    pub texts: Vec<String>,
}

impl Catalog {
    pub fn from_ids(ids: impl IntoIterator<Item = String>) -> Self {
        let mut cat = Catalog::default();
        for id in ids {
            if !cat.index_of.contains_key(&id) {
                cat.index_of.insert(id.clone(), cat.item_ids.len());
                cat.item_ids.push(id);
            }
        }
        cat.texts = vec![String::new(); cat.item_ids.len()];
        cat
    }

    pub fn from_interactions(interactions: &[Interaction]) -> Self {
        Catalog::from_ids(interactions.iter().map(|x| x.item.clone()))
    }

    pub fn len(&self) -> usize {
        self.item_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_ids.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceDataset {
    pub user_ids: Vec<String>,
    pub sequences: Vec<Vec<usize>>,
    pub num_items: usize,
    pub max_len: usize,
}

pub const MIN_SEQUENCE_LEN: usize = 3;

/// Groups by user (first-appearance order), stable-sorts by timestamp, keeps
/// the most recent `max_len` items and drops users with fewer than three.
pub fn build_sequences(
    interactions: &[Interaction],
    catalog: &Catalog,
    max_len: usize,
) -> Result<SequenceDataset> {
    let mut order: Vec<String> = Vec::new();
    let mut per_user: HashMap<&str, Vec<(u64, usize)>> = HashMap::new();
    for x in interactions {
        let idx = *catalog.index_of.get(&x.item).ok_or_else(|| {
            Error::Consistency(format!("item `{}` is not in the catalog", x.item))
        })?;
        let entry = per_user.entry(&x.user).or_insert_with(|| {
            order.push(x.user.clone());
            Vec::new()
        });
        entry.push((x.timestamp, idx));
    }
    let mut user_ids = Vec::new();
    let mut sequences = Vec::new();
    for user in order {
        let mut events = per_user.remove(user.as_str()).unwrap_or_default();
        events.sort_by_key(|(ts, _)| *ts);
        let start = events.len().saturating_sub(max_len);
        let seq: Vec<usize> = events[start..].iter().map(|(_, i)| *i).collect();
        if seq.len() >= MIN_SEQUENCE_LEN {
            user_ids.push(user);
            sequences.push(seq);
        }
    }
    Ok(SequenceDataset {
        user_ids,
        sequences,
        num_items: catalog.len(),
        max_len,
    })
}

/// Leave-one-out view of one user sequence `[x₁ … x_t]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Split<'a> {
    /// `x₁ … x_{t−2}`; every prefix of it predicts its successor.
    pub train: &'a [usize],
    pub valid_prefix: &'a [usize],
    pub valid_target: usize,
    pub test_prefix: &'a [usize],
    pub test_target: usize,
}

impl<'a> Split<'a> {
    /// `(prefix, target)` pairs over the training region.
    pub fn train_pairs(&self) -> impl Iterator<Item = (&'a [usize], usize)> + 'a {
        let train = self.train;
        (1..train.len()).map(move |i| (&train[..i], train[i]))
    }
}

pub fn leave_one_out_split(seq: &[usize]) -> Result<Split<'_>> {
    let t = seq.len();
    if t < MIN_SEQUENCE_LEN {
        return Err(Error::Split(t));
    }
    Ok(Split {
        train: &seq[..t - 2],
        valid_prefix: &seq[..t - 2],
        valid_target: seq[t - 2],
        test_prefix: &seq[..t - 1],
        test_target: seq[t - 1],
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Amazon,
    Movielens,
}

impl Scheme {
    pub fn facet_names(self) -> [&'static str; 3] {
        match self {
            Scheme::Amazon => ["category", "brand", "price"],
            Scheme::Movielens => ["genre", "director", "cast"],
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "amazon" => Ok(Scheme::Amazon),
            "movielens" | "ml" => Ok(Scheme::Movielens),
            other => Err(Error::Config(format!("unknown scheme `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Amazon => "amazon",
            Scheme::Movielens => "movielens",
        }
    }
}

/// One JSON-lines metadata object. Unused keys are ignored.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetadataRecord {
    #[serde(alias = "asin", alias = "movieId", alias = "id")]
    pub item_id: String,
    pub title: Option<String>,
    pub description: Option<String>,
    pub category: Vec<String>,
    pub brand: Option<String>,
    pub price: Option<f64>,
    pub genres: Vec<String>,
    pub directors: Vec<String>,
    pub cast: Vec<String>,
}

pub fn load_metadata(path: impl AsRef<Path>) -> Result<Vec<MetadataRecord>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (no, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MetadataRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: no + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Price discretization: bin `i` covers `[edges[i], edges[i+1])`, the last
/// bin is open-ended.
#[derive(Clone, Debug, PartialEq)]
pub struct PriceBins {
    pub edges: Vec<f64>,
}

impl Default for PriceBins {
    fn default() -> Self {
        PriceBins {
            edges: (0..10).map(|i| i as f64 * 50.0).collect(),
        }
    }
}

impl PriceBins {
    /// Equal-frequency edges over the observed prices.
    pub fn quantiles(prices: &[f64], bins: usize) -> Self {
        let mut sorted: Vec<f64> = prices.iter().copied().filter(|p| p.is_finite()).collect();
        sorted.sort_by(f64::total_cmp);
        if sorted.is_empty() || bins == 0 {
            return PriceBins::default();
        }
        let mut edges = vec![f64::NEG_INFINITY];
        for b in 1..bins {
            let e = sorted[(b * sorted.len() / bins).min(sorted.len() - 1)];
            if e > *edges.last().unwrap() {
                edges.push(e);
            }
        }
        PriceBins { edges }
    }

    pub fn bin(&self, price: f64) -> usize {
        self.edges
            .iter()
            .rposition(|&e| price >= e)
            .unwrap_or(0)
    }
}

/// Raw facet labels (`None` = missing) for one record, in scheme facet order.
pub fn extract_facets(rec: &MetadataRecord, scheme: Scheme, bins: &PriceBins) -> Vec<Option<String>> {
    let first = |v: &[String]| v.first().filter(|s| !s.is_empty()).cloned();
    match scheme {
        Scheme::Amazon => {
            let category = rec
                .category
                .get(1)
                .or_else(|| rec.category.first())
                .filter(|s| !s.is_empty())
                .cloned();
            let brand = rec.brand.clone().filter(|s| !s.trim().is_empty());
            let price = rec
                .price
                .filter(|p| p.is_finite())
                .map(|p| bins.bin(p).to_string());
            vec![category, brand, price]
        }
        Scheme::Movielens => vec![first(&rec.genres), first(&rec.directors), first(&rec.cast)],
    }
}

/// The linearized text fed to the frozen encoder.
pub fn build_text_string(rec: &MetadataRecord, scheme: Scheme) -> String {
    let title = rec.title.as_deref().unwrap_or("");
    let desc = rec.description.as_deref().unwrap_or("");
    match scheme {
        Scheme::Amazon => format!(
            "\"title\": {title}; \"description\": {desc}; \"category\": {}; \"brand\": {}",
            rec.category.join(", "),
            rec.brand.as_deref().unwrap_or("")
        ),
        Scheme::Movielens => format!(
            "\"title\": {title}; \"description\": {desc}; \"genres\": {}; \"directors\": {}; \"cast\": {}",
            rec.genres.join(", "),
            rec.directors.join(", "),
            rec.cast.join(", ")
        ),
    }
}

/// Per-item class labels for each facet; class 0 means "missing".
#[derive(Clone, Debug, PartialEq)]
pub struct FacetTable {
    pub facet_names: Vec<String>,
    /// `labels[f][item]`
    pub labels: Vec<Vec<usize>>,
    /// `class_names[f][c]`; index 0 is the empty sentinel.
    pub class_names: Vec<Vec<String>>,
}

pub const SENTINEL_CLASS: usize = 0;

impl FacetTable {
    /// Builds dense class indices from raw labels given in catalog order
    /// (`raw[item][facet]`). Classes are numbered by first appearance.
    pub fn from_raw(facet_names: &[&str], raw: &[Vec<Option<String>>]) -> Self {
        let nf = facet_names.len();
        let mut labels = vec![Vec::with_capacity(raw.len()); nf];
        let mut class_names = vec![vec![String::new()]; nf];
        let mut lookup: Vec<HashMap<String, usize>> = vec![HashMap::new(); nf];
        for item in raw {
            for f in 0..nf {
                let class = match item.get(f).and_then(|o| o.as_ref()) {
                    None => SENTINEL_CLASS,
                    Some(name) => *lookup[f].entry(name.clone()).or_insert_with(|| {
                        class_names[f].push(name.clone());
                        class_names[f].len() - 1
                    }),
                };
                labels[f].push(class);
            }
        }
        FacetTable {
            facet_names: facet_names.iter().map(|s| s.to_string()).collect(),
            labels,
            class_names,
        }
    }

    pub fn num_items(&self) -> usize {
        self.labels.first().map_or(0, Vec::len)
    }

    pub fn class_count(&self, facet: usize) -> usize {
        self.class_names[facet].len()
    }

    pub fn facet_index(&self, name: &str) -> Option<usize> {
        self.facet_names.iter().position(|n| n == name)
    }

    /// Restricts to the given facets, in the given order.
    pub fn select(&self, facets: &[usize]) -> Result<FacetTable> {
        for &f in facets {
            if f >= self.facet_names.len() {
                return Err(Error::Config(format!(
                    "facet {} requested but the table has {}",
                    f + 1,
                    self.facet_names.len()
                )));
            }
        }
        Ok(FacetTable {
            facet_names: facets.iter().map(|&f| self.facet_names[f].clone()).collect(),
            labels: facets.iter().map(|&f| self.labels[f].clone()).collect(),
            class_names: facets.iter().map(|&f| self.class_names[f].clone()).collect(),
        })
    }

    /// `item_id,facet_name,class_label` rows; missing labels are left empty.
    pub fn to_csv(&self, catalog: &Catalog) -> String {
        let mut out = String::from("item_id,facet_name,class_label\n");
        for (item, id) in catalog.item_ids.iter().enumerate() {
            for (f, name) in self.facet_names.iter().enumerate() {
                let class = self.labels[f][item];
                out.push_str(&format!(
                    "{},{},{}\n",
                    csv_field(id),
                    csv_field(name),
                    csv_field(&self.class_names[f][class])
                ));
            }
        }
        out
    }

    pub fn from_csv(text: &str, catalog: &Catalog) -> Result<FacetTable> {
        let mut facet_order: Vec<String> = Vec::new();
        let mut raw: Vec<HashMap<String, Option<String>>> = vec![HashMap::new(); catalog.len()];
        for (no, line) in text.lines().enumerate().skip(1) {
            if line.is_empty() {
                continue;
            }
            let fields = split_csv_line(line);
            if fields.len() != 3 {
                return Err(Error::Parse {
                    path: "facets.csv".into(),
                    line: no + 1,
                    msg: "expected 3 fields".into(),
                });
            }
            let item = *catalog.index_of.get(&fields[0]).ok_or_else(|| {
                Error::Consistency(format!("facet row for unknown item `{}`", fields[0]))
            })?;
            if !facet_order.contains(&fields[1]) {
                facet_order.push(fields[1].clone());
            }
            let label = Some(fields[2].clone()).filter(|s| !s.is_empty());
            raw[item].insert(fields[1].clone(), label);
        }
        let names: Vec<&str> = facet_order.iter().map(String::as_str).collect();
        let rows: Vec<Vec<Option<String>>> = raw
            .iter()
            .map(|m| names.iter().map(|n| m.get(*n).cloned().flatten()).collect())
            .collect();
        Ok(FacetTable::from_raw(&names, &rows))
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn split_csv_line(line: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match (c, quoted) {
            ('"', true) if chars.peek() == Some(&'"') => {
                cur.push('"');
                chars.next();
            }
            ('"', _) => quoted = !quoted,
            (',', false) => out.push(std::mem::take(&mut cur)),
            _ => cur.push(c),
        }
    }
    out.push(cur);
    out
}

pub const FEMB_MAGIC: &[u8; 4] = b"FEMB";
pub const FEMB_VERSION: u32 = 1;

/// Path of the id sidecar that accompanies a FEMB file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".ids");
    PathBuf::from(s)
}

pub fn encode_femb(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * m.data().len());
    out.extend_from_slice(FEMB_MAGIC);
    out.extend_from_slice(&FEMB_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for &v in m.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_femb(bytes: &[u8]) -> Result<Matrix> {
    if bytes.len() < 16 || &bytes[..4] != FEMB_MAGIC {
        return Err(Error::Format("missing FEMB magic".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != FEMB_VERSION {
        return Err(Error::Format(format!("unsupported FEMB version {version}")));
    }
    let (rows, cols) = (u32_at(8) as usize, u32_at(12) as usize);
    let expected = 16 + 4 * rows * cols;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "FEMB payload is {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Matrix::from_vec(rows, cols, data)
}

/// Writes `m` plus the id sidecar (one id per line, line i = row i).
pub fn write_femb(path: impl AsRef<Path>, m: &Matrix, ids: &[String]) -> Result<()> {
    let path = path.as_ref();
    if ids.len() != m.rows() {
        return Err(Error::Consistency(format!(
            "{} ids for a {}-row matrix",
            ids.len(),
            m.rows()
        )));
    }
    fs::write(path, encode_femb(m)).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let mut f = fs::File::create(&side).map_err(|e| Error::io(&side, e))?;
    for id in ids {
        writeln!(f, "{id}").map_err(|e| Error::io(&side, e))?;
    }
    Ok(())
}

/// Reads a FEMB file and its sidecar without any catalog alignment.
pub fn read_femb(path: impl AsRef<Path>) -> Result<(Matrix, Vec<String>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let m = decode_femb(&bytes)?;
    let side = sidecar_path(path);
    let ids_text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let ids: Vec<String> = ids_text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(str::to_string)
        .collect();
    if ids.len() != m.rows() {
        return Err(Error::Format(format!(
            "sidecar lists {} ids, matrix has {} rows",
            ids.len(),
            m.rows()
        )));
    }
    Ok((m, ids))
}

/// Loads a FEMB matrix and reorders its rows into catalog index order.
pub fn load_embedding_matrix(path: impl AsRef<Path>, catalog: &Catalog) -> Result<Matrix> {
    let (m, ids) = read_femb(path)?;
    align_to_catalog(&m, &ids, catalog)
}

pub fn align_to_catalog(m: &Matrix, ids: &[String], catalog: &Catalog) -> Result<Matrix> {
    if m.rows() != catalog.len() {
        return Err(Error::Format(format!(
            "embedding has {} rows, catalog has {} items",
            m.rows(),
            catalog.len()
        )));
    }
    let mut out = Matrix::zeros(catalog.len(), m.cols());
    let mut seen = HashSet::new();
    for (row, id) in ids.iter().enumerate() {
        let idx = *catalog
            .index_of
            .get(id)
            .ok_or_else(|| Error::Format(format!("embedding row for unknown item `{id}`")))?;
        if !seen.insert(idx) {
            return Err(Error::Format(format!("duplicate embedding row for `{id}`")));
        }
        out.row_mut(idx).copy_from_slice(m.row(row));
    }
    Ok(out)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic bag-of-tokens text embedding: each whitespace token maps to
/// a seeded Gaussian vector, the mean is L2-normalized. Empty text → zeros.
pub fn pseudo_embed(text: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    let mut n = 0usize;
    for token in text.split_whitespace() {
        let mut rng = Rng::new(fnv1a(token.as_bytes()) ^ seed.rotate_left(17));
        for a in acc.iter_mut() {
            *a += rng.normal(0.0, 1.0);
        }
        n += 1;
    }
    if n == 0 {
        return acc;
    }
    let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        acc.iter_mut().for_each(|v| *v /= norm);
    }
    acc
}
