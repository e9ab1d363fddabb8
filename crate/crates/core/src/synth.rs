//! Planted-facet synthetic data.
//!
//! Items get ground-truth class labels per facet. Each user has a dominant
//! facet and one or two preferred classes per facet; every next item comes
//! from a preferred class of the dominant facet with probability
//! `match_prob` and from the remaining items otherwise. Item texts are made
//! of label tokens, so text embeddings cluster by construction.

use crate::data::{Interaction, MetadataRecord, Scheme};
use crate::error::{Error, Result};
use crate::numerics::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub users: usize,
    pub items: usize,
    /// 1 to 3, in movielens facet order (genre, director, cast).
    pub facets: usize,
    pub classes: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub match_prob: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            users: 300,
            items: 60,
            facets: 2,
            classes: 12,
            min_len: 8,
            max_len: 20,
            match_prob: 0.9,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.facets) {
            return Err(Error::Config(format!("synth supports 1 to 3 facets, got {}", self.facets)));
        }
        if self.classes < 3 || self.items < 2 * self.classes {
            return Err(Error::Config(format!(
                "need at least 3 classes and 2 items per class (items = {}, classes = {})",
                self.items, self.classes
            )));
        }
        if self.users == 0 || self.min_len < 3 || self.max_len < self.min_len {
            return Err(Error::Config("need users > 0 and 3 <= min_len <= max_len".into()));
        }
        if !(0.0..=1.0).contains(&self.match_prob) {
            return Err(Error::Config("match_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserProfile {
    pub dominant: usize,
    /// `preferred[f]` holds one or two classes of facet `f`.
    pub preferred: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub interactions: Vec<Interaction>,
    pub metadata: Vec<MetadataRecord>,
    /// `labels[f][item]`, zero-based classes.
    pub labels: Vec<Vec<usize>>,
    pub profiles: Vec<UserProfile>,
}

pub const FACET_PREFIXES: [&str; 3] = ["genre", "director", "cast"];

pub fn item_id(i: usize) -> String {
    format!("i{i:04}")
}

pub fn user_id(u: usize) -> String {
    format!("u{u:05}")
}

/// Balanced labels: a random permutation of items dealt round-robin into
/// classes, independently per facet.
fn assign_labels(cfg: &SynthConfig, rng: &mut Rng) -> Vec<Vec<usize>> {
    (0..cfg.facets)
        .map(|_| {
            let mut perm: Vec<usize> = (0..cfg.items).collect();
            rng.shuffle(&mut perm);
            let mut labels = vec![0; cfg.items];
            for (slot, &item) in perm.iter().enumerate() {
                labels[item] = slot % cfg.classes;
            }
            labels
        })
        .collect()
}

fn sample_profile(cfg: &SynthConfig, rng: &mut Rng) -> UserProfile {
    let preferred = (0..cfg.facets)
        .map(|_| {
            let first = rng.below(cfg.classes);
            let mut p = vec![first];
            if rng.uniform() < 0.5 {
                let second = (first + 1 + rng.below(cfg.classes - 1)) % cfg.classes;
                p.push(second);
            }
            p
        })
        .collect();
    UserProfile {
        dominant: rng.below(cfg.facets),
        preferred,
    }
}

/// Draws the next item for `profile`; the flag says whether it came from a
/// preferred class of the dominant facet.
pub fn next_item(profile: &UserProfile, labels: &[Vec<usize>], match_prob: f64, rng: &mut Rng) -> (usize, bool) {
    let facet = &labels[profile.dominant];
    let wanted = &profile.preferred[profile.dominant];
    let matched = rng.uniform() < match_prob;
    let pool: Vec<usize> = (0..facet.len())
        .filter(|&i| wanted.contains(&facet[i]) == matched)
        .collect();
    (pool[rng.below(pool.len())], matched)
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let labels = assign_labels(cfg, &mut rng);
    let mut interactions = Vec::new();
    let mut profiles = Vec::with_capacity(cfg.users);
    for u in 0..cfg.users {
        let profile = sample_profile(cfg, &mut rng);
        let len = cfg.min_len + rng.below(cfg.max_len - cfg.min_len + 1);
        for t in 0..len {
            let (item, _) = next_item(&profile, &labels, cfg.match_prob, &mut rng);
            interactions.push(Interaction {
                user: user_id(u),
                item: item_id(item),
                timestamp: (t + 1) as u64,
            });
        }
        profiles.push(profile);
    }
    let metadata = (0..cfg.items)
        .map(|i| {
            let tag = |f: usize| -> Vec<String> {
                if f < cfg.facets {
                    vec![format!("{}_{}", FACET_PREFIXES[f], labels[f][i])]
                } else {
                    Vec::new()
                }
            };
            let tokens: Vec<String> = (0..cfg.facets).flat_map(tag).collect();
            MetadataRecord {
                item_id: item_id(i),
                title: Some(format!("item {i}")),
                description: Some(tokens.join(" ")),
                genres: tag(0),
                directors: tag(1),
                cast: tag(2),
                ..MetadataRecord::default()
            }
        })
        .collect();
    Ok(SynthData {
        interactions,
        metadata,
        labels,
        profiles,
    })
}

/// The scheme used by synthetic metadata.
pub const SCHEME: Scheme = Scheme::Movielens;

pub fn interactions_tsv(interactions: &[Interaction]) -> String {
    interactions
        .iter()
        .map(|x| format!("{}\t{}\t{}\n", x.user, x.item, x.timestamp))
        .collect()
}

pub fn metadata_jsonl(records: &[MetadataRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}
