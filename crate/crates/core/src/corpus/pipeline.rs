use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::Serialize;

use super::matching::{filter_multi_event, match_records, Ambiguity, Drop, Match, MatchKind, DEFAULT_FUZZY_THRESHOLD};
use super::sampling::{build_vocab, sample_negatives, split_dataset, SplitCorpus, SplitRatios};
use super::{write_jsonl, ArticleRecord, CorpusRow, EventRecord, Source, EVENT_YEARS};
use crate::error::{Error, Result};
use crate::text::Vocabulary;
use crate::TOOL_VERSION;

#[derive(Debug, Clone, Serialize)]
pub struct CorpusOptions {
    pub fuzzy_threshold: f64,
    pub negatives: i64,
    pub seed: u64,
    pub ratios: SplitRatios,
    /// Build a vocabulary of this size from the training split.
    pub vocab_size: Option<usize>,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        CorpusOptions { fuzzy_threshold: DEFAULT_FUZZY_THRESHOLD, negatives: 27_000, seed: 13, ratios: SplitRatios::default(), vocab_size: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CorpusCounts {
    pub events: usize,
    pub articles: usize,
    pub archive: usize,
    pub exact_matches: usize,
    pub fuzzy_matches: usize,
    pub matches: usize,
    pub contested_events: usize,
    pub unmatched_events: usize,
    pub dropped: usize,
    pub empty_text: usize,
    pub positives: usize,
    pub negatives: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Everything needed to audit a corpus build. Contains no timestamps, so
/// reruns with the same inputs produce the same bytes.
#[derive(Debug, Clone, Serialize)]
pub struct CorpusManifest {
    pub tool_version: &'static str,
    pub options: CorpusOptions,
    pub counts: CorpusCounts,
    pub positives: Vec<Match>,
    pub drops: Vec<Drop>,
    pub contested: Vec<(String, String)>,
    pub unmatched_events: Vec<String>,
    pub ambiguities: Vec<Ambiguity>,
    pub empty_text: Vec<String>,
    pub out_of_range_years: Vec<String>,
    pub negative_allocation: std::collections::BTreeMap<String, (usize, usize)>,
    pub warnings: Vec<String>,
    pub split_positives: [usize; 3],
}

#[derive(Debug, Clone)]
pub struct CorpusBuild {
    pub corpus: SplitCorpus,
    pub manifest: CorpusManifest,
    pub vocab: Option<Vocabulary>,
}

/// Runs match → filter → negatives → split (→ vocabulary).
pub fn build_corpus(events: &[EventRecord], articles: &[ArticleRecord], archive: &[ArticleRecord], options: &CorpusOptions) -> Result<CorpusBuild> {
    let mut warnings = Vec::new();
    let out_of_range_years: Vec<String> = events
        .iter()
        .filter(|e| !EVENT_YEARS.contains(&e.year))
        .map(|e| e.event_id.clone())
        .collect();
    if !out_of_range_years.is_empty() {
        let w = format!("{} events fall outside {}-{}", out_of_range_years.len(), EVENT_YEARS.start(), EVENT_YEARS.end());
        log::warn!("{w}");
        warnings.push(w);
    }

    let outcome = match_records(events, articles, options.fuzzy_threshold);
    let (kept, drops) = filter_multi_event(&outcome, events);
    let by_id: HashMap<&str, &ArticleRecord> = articles.iter().map(|a| (a.id.as_str(), a)).collect();
    let mut positives = Vec::new();
    let mut rows = Vec::new();
    let mut empty_text = Vec::new();
    for m in kept {
        let art = by_id[m.article_id.as_str()];
        if art.text.trim().is_empty() {
            empty_text.push(m.article_id.clone());
            continue;
        }
        rows.push(CorpusRow { id: art.id.clone(), text: art.text.clone(), label: 1, source: Source::MatchedPositive });
        positives.push(m);
    }

    // anything an event pointed at is protest coverage, even if dropped
    let exclude: HashSet<String> = outcome
        .claimants
        .keys()
        .cloned()
        .chain(outcome.ambiguities.iter().flat_map(|a| a.shadowed.iter().cloned()))
        .collect();
    let negatives = sample_negatives(archive, options.negatives, options.seed, &exclude)?;
    warnings.extend(negatives.warnings.iter().cloned());
    let positive_ids: HashSet<&str> = rows.iter().map(|r| r.id.as_str()).collect();
    for a in &negatives.articles {
        if positive_ids.contains(a.id.as_str()) {
            return Err(Error::Integrity(format!("article {} drawn as a negative is also a positive", a.id)));
        }
    }
    rows.extend(negatives.articles.iter().map(|a| CorpusRow { id: a.id.clone(), text: a.text.clone(), label: 0, source: Source::SampledNegative }));

    let corpus = split_dataset(&rows, options.ratios, options.seed)?;
    let vocab = options.vocab_size.map(|k| build_vocab(&corpus.train, k)).transpose()?;
    let pos = |s: &[CorpusRow]| s.iter().filter(|r| r.label == 1).count();
    let counts = CorpusCounts {
        events: events.len(),
        articles: articles.len(),
        archive: archive.len(),
        exact_matches: outcome.count(MatchKind::Exact),
        fuzzy_matches: outcome.count(MatchKind::Fuzzy),
        matches: outcome.matches.len(),
        contested_events: outcome.contested.len(),
        unmatched_events: outcome.unmatched.len(),
        dropped: drops.len(),
        empty_text: empty_text.len(),
        positives: positives.len(),
        negatives: negatives.articles.len(),
        train: corpus.train.len(),
        val: corpus.val.len(),
        test: corpus.test.len(),
    };
    let manifest = CorpusManifest {
        tool_version: TOOL_VERSION,
        options: options.clone(),
        counts,
        positives,
        drops,
        contested: outcome.contested,
        unmatched_events: outcome.unmatched,
        ambiguities: outcome.ambiguities,
        empty_text,
        out_of_range_years,
        negative_allocation: negatives.allocation,
        warnings,
        split_positives: [pos(&corpus.train), pos(&corpus.val), pos(&corpus.test)],
    };
    Ok(CorpusBuild { corpus, manifest, vocab })
}

/// Writes `corpus.{train,val,test}.jsonl`, `manifest.json` and, when
/// built, `vocab.txt` into `dir`.
pub fn write_corpus(build: &CorpusBuild, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, rows) in build.corpus.splits() {
        write_jsonl(&dir.join(format!("corpus.{name}.jsonl")), rows)?;
    }
    let path = dir.join("manifest.json");
    let mut json = serde_json::to_vec_pretty(&build.manifest)?;
    json.push(b'\n');
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    if let Some(v) = &build.vocab {
        v.save(&dir.join("vocab.txt"))?;
    }
    Ok(())
}
