//! Training-data construction: link event records to article titles, drop
//! articles that cover several events, draw negatives from protest-free
//! categories, split, and build the vocabulary.

mod matching;
mod pipeline;
mod sampling;

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{bail, Error, Result};

pub use matching::{filter_multi_event, match_records, Ambiguity, Drop, DropReason, Match, MatchKind, MatchOutcome, DEFAULT_FUZZY_THRESHOLD};
pub use pipeline::{build_corpus, write_corpus, CorpusBuild, CorpusOptions};
pub use sampling::{build_vocab, sample_negatives, split_dataset, NegativeSample, SplitCorpus, SplitRatios, NEGATIVE_CATEGORIES};

/// Event years covered by the source event database; rows outside are
/// carried through with a warning.
pub const EVENT_YEARS: std::ops::RangeInclusive<i32> = 1960..=1995;

/// NFKC, lowercase, every non-alphanumeric character to a space, runs of
/// whitespace collapsed, trimmed.
pub fn normalize_title(title: &str) -> String {
    let mapped: String = title
        .nfkc()
        .flat_map(char::to_lowercase)
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    mapped.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// One coded event. Columns beyond the four required ones are carried in
/// `attributes` untouched.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EventRecord {
    pub event_id: String,
    pub article_title: String,
    pub year: i32,
    pub events_in_article: u32,
    pub attributes: IndexMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArticleRecord {
    pub id: String,
    pub title: String,
    pub year: i32,
    pub text: String,
    pub category: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    MatchedPositive,
    SampledNegative,
}

/// One row of the labelled corpus as written to disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRow {
    pub id: String,
    pub text: String,
    pub label: u8,
    pub source: Source,
}

const REQUIRED_EVENT_COLUMNS: [&str; 4] = ["event_id", "article_title", "year", "events_in_article"];

pub fn read_events(path: &Path) -> Result<Vec<EventRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(BufReader::new(file));
    let header = rdr.headers()?.clone();
    let mut cols = [0usize; 4];
    for (slot, name) in cols.iter_mut().zip(REQUIRED_EVENT_COLUMNS) {
        *slot = header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Decode(format!("{}: missing column `{name}`", path.display())))?;
    }
    let mut events = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = row + 2;
        let int = |col: usize, what: &str| -> Result<i64> {
            rec.get(col)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::Decode(format!("{}: line {line}: bad {what}", path.display())))
        };
        let year = int(cols[2], "year")?;
        let count = int(cols[3], "events_in_article")?;
        if count < 1 {
            bail!(Decode, "{}: line {line}: events_in_article must be at least 1", path.display());
        }
        let attributes = header
            .iter()
            .enumerate()
            .filter(|(i, _)| !cols.contains(i))
            .map(|(i, h)| (h.to_string(), rec.get(i).unwrap_or("").to_string()))
            .collect();
        events.push(EventRecord {
            event_id: rec[cols[0]].to_string(),
            article_title: rec[cols[1]].to_string(),
            year: year as i32,
            events_in_article: count as u32,
            attributes,
        });
    }
    Ok(events)
}

pub fn write_events(path: &Path, events: &[EventRecord]) -> Result<()> {
    let mut extra: Vec<&str> = Vec::new();
    for e in events {
        for k in e.attributes.keys() {
            if !extra.contains(&k.as_str()) {
                extra.push(k);
            }
        }
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Decode(format!("{other:?}")),
    })?;
    w.write_record(REQUIRED_EVENT_COLUMNS.iter().copied().chain(extra.iter().copied()))?;
    for e in events {
        let mut rec = vec![e.event_id.clone(), e.article_title.clone(), e.year.to_string(), e.events_in_article.to_string()];
        rec.extend(extra.iter().map(|k| e.attributes.get(*k).cloned().unwrap_or_default()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads one JSON object per non-blank line.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line)
            .map_err(|e| Error::Decode(format!("{}: line {}: {e}", path.display(), i + 1)))?;
        out.push(row);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut buf, row)?;
        buf.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_articles(path: &Path) -> Result<Vec<ArticleRecord>> {
    read_jsonl(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_title(""), "");
        assert_eq!(normalize_title("  Protest at CITY Hall!! "), "protest at city hall");
        assert_eq!(normalize_title("U.S.\u{2013}China  talks"), "u s china talks");
    }

    #[test]
    fn normalize_folds_compatibility_forms() {
        // fullwidth letters and the "ﬁ" ligature decompose under NFKC
        assert_eq!(normalize_title("\u{FF2D}arch \u{FB01}nal"), "march final");
    }

    #[test]
    fn events_roundtrip_with_extra_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.csv");
        let mut attributes = IndexMap::new();
        attributes.insert("size".to_string(), "200".to_string());
        let ev = EventRecord {
            event_id: "e1".into(),
            article_title: "Rally, at noon".into(),
            year: 1970,
            events_in_article: 1,
            attributes,
        };
        write_events(&path, std::slice::from_ref(&ev)).unwrap();
        assert_eq!(read_events(&path).unwrap(), vec![ev]);
    }

    #[test]
    fn zero_event_count_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.csv");
        fs::write(&path, "event_id,article_title,year,events_in_article\ne1,x,1970,0\n").unwrap();
        assert!(matches!(read_events(&path), Err(Error::Decode(_))));
    }
}
