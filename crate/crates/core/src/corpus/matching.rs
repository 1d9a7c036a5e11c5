use std::collections::{BTreeMap, HashMap, HashSet};

use serde::Serialize;

use super::{normalize_title, ArticleRecord, EventRecord};

/// Minimum normalized Levenshtein similarity for a fuzzy title match.
pub const DEFAULT_FUZZY_THRESHOLD: f64 = 0.90;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchKind {
    Exact,
    Fuzzy,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Match {
    pub event_id: String,
    pub article_id: String,
    pub kind: MatchKind,
    pub similarity: f64,
}

/// Several articles share a normalized title and year; `kept` is the one
/// eligible for matching.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ambiguity {
    pub title: String,
    pub year: i32,
    pub kept: String,
    pub shadowed: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MatchOutcome {
    pub matches: Vec<Match>,
    /// Events whose chosen article had already been taken by an earlier
    /// event.
    pub contested: Vec<(String, String)>,
    pub unmatched: Vec<String>,
    pub ambiguities: Vec<Ambiguity>,
    /// How many events selected each article, including losers of a
    /// contest.
    pub claimants: BTreeMap<String, usize>,
    pub threshold: f64,
}

impl MatchOutcome {
    pub fn count(&self, kind: MatchKind) -> usize {
        self.matches.iter().filter(|m| m.kind == kind).count()
    }
}

/// Links events to articles.
///
/// Events are visited in `event_id` order. Pass one matches on the exact
/// normalized title within the same year; pass two compares the remaining
/// events against still-unclaimed articles of that year and keeps the most
/// similar one at or above `threshold` (ties go to the smaller article id).
/// An article is matched at most once; later events that select an already
/// matched article are recorded as contested claimants instead.
pub fn match_records(events: &[EventRecord], articles: &[ArticleRecord], threshold: f64) -> MatchOutcome {
    let mut articles: Vec<&ArticleRecord> = articles.iter().collect();
    articles.sort_by(|a, b| a.id.cmp(&b.id));
    let mut events: Vec<&EventRecord> = events.iter().collect();
    events.sort_by(|a, b| a.event_id.cmp(&b.event_id));

    let mut out = MatchOutcome { threshold, ..Default::default() };
    let mut exact: BTreeMap<(String, i32), Vec<&ArticleRecord>> = BTreeMap::new();
    for a in &articles {
        exact.entry((normalize_title(&a.title), a.year)).or_default().push(a);
    }
    for ((title, year), group) in &exact {
        if group.len() > 1 {
            out.ambiguities.push(Ambiguity {
                title: title.clone(),
                year: *year,
                kept: group[0].id.clone(),
                shadowed: group[1..].iter().map(|a| a.id.clone()).collect(),
            });
        }
    }

    let mut taken: HashSet<String> = HashSet::new();
    let mut claim = |out: &mut MatchOutcome, ev: &EventRecord, art: &str, kind: MatchKind, sim: f64| {
        *out.claimants.entry(art.to_string()).or_default() += 1;
        if !taken.insert(art.to_string()) {
            out.contested.push((ev.event_id.clone(), art.to_string()));
        } else {
            out.matches.push(Match { event_id: ev.event_id.clone(), article_id: art.to_string(), kind, similarity: sim });
        }
    };

    let mut pending = Vec::new();
    for ev in &events {
        match exact.get(&(normalize_title(&ev.article_title), ev.year)) {
            Some(group) => claim(&mut out, ev, &group[0].id, MatchKind::Exact, 1.0),
            None => pending.push(*ev),
        }
    }

    // shadowed duplicates never become candidates
    let eligible: Vec<(&ArticleRecord, String)> = exact
        .values()
        .map(|g| (g[0], normalize_title(&g[0].title)))
        .collect();
    let mut by_year: BTreeMap<i32, Vec<(&ArticleRecord, &str)>> = BTreeMap::new();
    for (a, norm) in &eligible {
        by_year.entry(a.year).or_default().push((a, norm));
    }
    for list in by_year.values_mut() {
        list.sort_by(|a, b| a.0.id.cmp(&b.0.id));
    }
    let exact_taken: HashSet<String> = out.matches.iter().map(|m| m.article_id.clone()).collect();
    for ev in pending {
        let title = normalize_title(&ev.article_title);
        let mut best: Option<(&ArticleRecord, f64)> = None;
        for (a, norm) in by_year.get(&ev.year).map(Vec::as_slice).unwrap_or(&[]) {
            if exact_taken.contains(&a.id) {
                continue;
            }
            let sim = strsim::normalized_levenshtein(&title, norm);
            // strict comparison keeps the earliest (smallest id) on ties
            if sim >= threshold && best.is_none_or(|(_, s)| sim > s) {
                best = Some((a, sim));
            }
        }
        match best {
            Some((a, sim)) => claim(&mut out, ev, &a.id, MatchKind::Fuzzy, sim),
            None => out.unmatched.push(ev.event_id.clone()),
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    /// The event row says its article reports more than one event.
    MultiEvent,
    /// More than one event row selected the article.
    SharedArticle,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Drop {
    pub event_id: String,
    pub article_id: String,
    pub reasons: Vec<DropReason>,
}

/// Keeps only matches whose article reports a single event, judged both by
/// the event's own count field and by how many event rows selected the
/// article.
pub fn filter_multi_event(outcome: &MatchOutcome, events: &[EventRecord]) -> (Vec<Match>, Vec<Drop>) {
    let counts: HashMap<&str, u32> = events.iter().map(|e| (e.event_id.as_str(), e.events_in_article)).collect();
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for m in &outcome.matches {
        let mut reasons = Vec::new();
        if counts.get(m.event_id.as_str()).copied().unwrap_or(1) > 1 {
            reasons.push(DropReason::MultiEvent);
        }
        if outcome.claimants.get(&m.article_id).copied().unwrap_or(1) > 1 {
            reasons.push(DropReason::SharedArticle);
        }
        if reasons.is_empty() {
            kept.push(m.clone());
        } else {
            dropped.push(Drop { event_id: m.event_id.clone(), article_id: m.article_id.clone(), reasons });
        }
    }
    (kept, dropped)
}
