use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ArticleRecord, CorpusRow};
use crate::error::{bail, Result};
use crate::text::Vocabulary;

/// Archive sections assumed to contain no protest coverage.
pub const NEGATIVE_CATEGORIES: [&str; 9] = [
    "entertainment",
    "book reviews",
    "business",
    "classified",
    "finance",
    "sports",
    "real estate",
    "leisure",
    "obituary",
];

fn canonical_category(c: &str) -> String {
    c.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct NegativeSample {
    pub articles: Vec<ArticleRecord>,
    /// Per-category `(available, drawn)`.
    pub allocation: BTreeMap<String, (usize, usize)>,
    pub warnings: Vec<String>,
}

/// Largest-remainder apportionment of `n` over `weights` (`n` ≤ sum).
/// Remainder ties go to the earlier entry.
fn apportion(n: usize, weights: &[usize]) -> Vec<usize> {
    let total: usize = weights.iter().sum();
    if total == 0 {
        return vec![0; weights.len()];
    }
    let mut alloc: Vec<usize> = weights.iter().map(|&w| n * w / total).collect();
    let mut rema: Vec<(usize, usize)> = weights.iter().enumerate().map(|(i, &w)| (n * w % total, i)).collect();
    rema.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = n - alloc.iter().sum::<usize>();
    for &(_, i) in rema.iter().take(short) {
        alloc[i] += 1;
    }
    alloc
}

/// Draws up to `n` negatives from allowlisted categories, apportioned by
/// category size. Articles in `exclude` (already used as positives or
/// otherwise linked to an event) and articles with empty text are skipped.
pub fn sample_negatives(archive: &[ArticleRecord], n: i64, seed: u64, exclude: &HashSet<String>) -> Result<NegativeSample> {
    if n <= 0 {
        bail!(Parameter, "negative sample size must be positive, got {n}");
    }
    let mut pools: BTreeMap<String, Vec<&ArticleRecord>> = BTreeMap::new();
    for a in archive {
        let cat = canonical_category(&a.category);
        if NEGATIVE_CATEGORIES.contains(&cat.as_str()) && !exclude.contains(&a.id) && !a.text.trim().is_empty() {
            pools.entry(cat).or_default().push(a);
        }
    }
    let mut out = NegativeSample::default();
    let available: usize = pools.values().map(Vec::len).sum();
    if available == 0 {
        out.warnings.push("no eligible negative articles in allowlisted categories".into());
        log::warn!("{}", out.warnings[0]);
        return Ok(out);
    }
    let want = (n as usize).min(available);
    if want < n as usize {
        out.warnings.push(format!("requested {n} negatives but only {available} are eligible"));
    }
    let sizes: Vec<usize> = pools.values().map(Vec::len).collect();
    let quotas = apportion(want, &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for ((cat, pool), quota) in pools.iter_mut().zip(quotas) {
        pool.sort_by(|a, b| a.id.cmp(&b.id));
        pool.shuffle(&mut rng);
        out.articles.extend(pool.iter().take(quota).map(|a| (*a).clone()));
        out.allocation.insert(cat.clone(), (pool.len(), quota));
    }
    out.articles.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios { train: 0.8, val: 0.1, test: 0.1 }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let r = [self.train, self.val, self.test];
        if r.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
            bail!(Parameter, "split ratios must all be positive, got {r:?}");
        }
        if (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            bail!(Parameter, "split ratios must sum to 1, got {r:?}");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SplitCorpus {
    pub train: Vec<CorpusRow>,
    pub val: Vec<CorpusRow>,
    pub test: Vec<CorpusRow>,
}

impl SplitCorpus {
    pub fn splits(&self) -> [(&'static str, &[CorpusRow]); 3] {
        [("train", &self.train), ("val", &self.val), ("test", &self.test)]
    }
}

/// Stratified split: each label's rows (id order, then seeded shuffle) are
/// apportioned over the three splits by largest remainder. Each split is
/// returned in id order.
pub fn split_dataset(rows: &[CorpusRow], ratios: SplitRatios, seed: u64) -> Result<SplitCorpus> {
    ratios.validate()?;
    let mut seen = HashSet::new();
    for r in rows {
        if !seen.insert(r.id.as_str()) {
            bail!(Parameter, "article id {} appears more than once", r.id);
        }
    }
    // weights in parts per billion so apportion stays integral
    let w: Vec<usize> = [ratios.train, ratios.val, ratios.test].iter().map(|r| (r * 1e9).round() as usize).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SplitCorpus::default();
    for label in [0u8, 1] {
        let mut class: Vec<&CorpusRow> = rows.iter().filter(|r| r.label == label).collect();
        if class.is_empty() {
            continue;
        }
        class.sort_by(|a, b| a.id.cmp(&b.id));
        class.shuffle(&mut rng);
        let counts = apportion(class.len(), &w);
        let names = ["train", "val", "test"];
        if let Some(i) = counts.iter().position(|&c| c == 0) {
            bail!(
                Stratification,
                "{} examples of label {label} leave the {} split empty of that class",
                class.len(),
                names[i]
            );
        }
        let mut it = class.into_iter().cloned();
        out.train.extend(it.by_ref().take(counts[0]));
        out.val.extend(it.by_ref().take(counts[1]));
        out.test.extend(it);
    }
    for split in [&mut out.train, &mut out.val, &mut out.test] {
        split.sort_by(|a, b| a.id.cmp(&b.id));
    }
    Ok(out)
}

/// Vocabulary from training rows only.
pub fn build_vocab(train: &[CorpusRow], size: usize) -> Result<Vocabulary> {
    if train.is_empty() {
        bail!(Parameter, "cannot build a vocabulary from an empty training split");
    }
    Vocabulary::build(train.iter().map(|r| r.text.as_str()), size)
}
