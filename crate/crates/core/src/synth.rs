//! Seeded synthetic data: a scaled corpus-construction fixture, a
//! planted-lexicon document corpus and blob-pattern images.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{write_events, write_jsonl, ArticleRecord, CorpusRow, EventRecord, Source};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vision::image::save_image;
use crate::vision::ImageExample;

/// Words whose presence marks protest coverage in generated documents.
pub const PROTEST_LEXICON: [&str; 16] = [
    "protest", "protesters", "demonstrators", "rally", "marchers", "picket", "boycott", "activists",
    "chanting", "placards", "sit", "petition", "organizers", "grievances", "coalition", "dissent",
];

const FILLER: [&str; 40] = [
    "the", "a", "on", "in", "of", "and", "to", "city", "officials", "said", "tuesday", "monday",
    "week", "near", "downtown", "after", "before", "local", "new", "york", "people", "group",
    "members", "yesterday", "county", "state", "several", "hundred", "about", "from", "with",
    "were", "at", "by", "their", "this", "that", "afternoon", "morning", "street",
];

const TOPICS: [(&str, [&str; 10]); 9] = [
    ("entertainment", ["film", "actor", "premiere", "theater", "audience", "director", "comedy", "studio", "musical", "stage"]),
    ("book reviews", ["novel", "author", "chapter", "memoir", "reader", "prose", "publisher", "fiction", "biography", "essay"]),
    ("business", ["company", "shares", "profits", "merger", "executive", "quarter", "sales", "retail", "investors", "firm"]),
    ("classified", ["apartment", "rent", "sale", "wanted", "call", "bedroom", "condition", "offer", "used", "furnished"]),
    ("finance", ["bonds", "rates", "treasury", "yield", "dollar", "index", "market", "trading", "credit", "banks"]),
    ("sports", ["game", "season", "coach", "inning", "score", "team", "league", "victory", "pitcher", "playoff"]),
    ("real estate", ["mortgage", "buyers", "listing", "broker", "property", "tenants", "acre", "zoning", "townhouse", "lease"]),
    ("leisure", ["travel", "garden", "recipe", "weekend", "hiking", "resort", "cruise", "museum", "wine", "beach"]),
    ("obituary", ["died", "survived", "born", "career", "funeral", "widow", "aged", "memorial", "retired", "daughter"]),
];

/// Words that appear in both classes so no single token is decisive.
const CONFOUNDERS: [&str; 6] = ["march", "strike", "police", "crowd", "union", "workers"];

fn pick<'a, R: Rng>(rng: &mut R, words: &[&'a str]) -> &'a str {
    words[rng.gen_range(0..words.len())]
}

fn document<R: Rng>(rng: &mut R, protest: bool, topic: usize) -> String {
    let len = rng.gen_range(24..80);
    let mut words: Vec<&str> = (0..len)
        .map(|_| if rng.gen_bool(0.25) { pick(rng, &TOPICS[topic].1) } else { pick(rng, &FILLER) })
        .collect();
    if rng.gen_bool(0.3) {
        let at = rng.gen_range(0..words.len());
        words[at] = pick(rng, &CONFOUNDERS);
    }
    // negatives occasionally mention one lexicon word; positives always
    // carry several
    let planted = if protest { rng.gen_range(2..5) } else { usize::from(rng.gen_bool(0.1)) };
    {
        for _ in 0..planted {
            let at = rng.gen_range(0..words.len());
            words[at] = pick(rng, &PROTEST_LEXICON);
        }
    }
    words.join(" ")
}

/// Labelled documents: positives carry several lexicon words planted into
/// otherwise topic-neutral text.
pub fn text_corpus(positives: usize, negatives: usize, seed: u64) -> Vec<CorpusRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<CorpusRow> = (0..positives + negatives)
        .map(|i| {
            let protest = i < positives;
            let topic = rng.gen_range(0..TOPICS.len());
            CorpusRow {
                id: format!("doc{i:05}"),
                text: document(&mut rng, protest, topic),
                label: u8::from(protest),
                source: if protest { Source::MatchedPositive } else { Source::SampledNegative },
            }
        })
        .collect();
    rows.shuffle(&mut rng);
    rows
}

/// Events, articles and archive shaped like the source data at 1/100
/// scale. Expected outcome of the default pipeline on it: 160 exact and 7
/// fuzzy matches (167), 48 dropped, 119 positives, and at least 270
/// eligible negatives.
#[derive(Debug, Clone)]
pub struct CorpusFixture {
    pub events: Vec<EventRecord>,
    pub articles: Vec<ArticleRecord>,
    pub archive: Vec<ArticleRecord>,
}

const SUBJECTS: [&str; 24] = [
    "Students", "Tenants", "Farmers", "Strikers", "Veterans", "Teachers", "Nurses", "Parents",
    "Clergy", "Dockworkers", "Residents", "Miners", "Women", "Pacifists", "Taxpayers", "Retirees",
    "Bus Drivers", "Merchants", "Scientists", "Artists", "Homeowners", "Commuters", "Welfare Mothers", "Youths",
];
const ACTIONS: [&str; 12] = [
    "March on", "Picket", "Rally at", "Stage Sit-In at", "Block Entrance to", "Protest at",
    "Hold Vigil Outside", "Occupy", "Boycott", "Demonstrate Near", "Petition", "Gather Outside",
];
const PLACES: [&str; 20] = [
    "City Hall", "the Pentagon", "Columbia", "the Capitol", "Shipyard Gates", "Federal Court",
    "State House", "the Armory", "Draft Board", "Con Edison", "Board of Education", "Harlem Hospital",
    "the U.N.", "Union Square", "Times Square", "Port Authority", "Gracie Mansion", "Albany",
    "Newark Plant", "the Museum",
];

fn fixture_title(i: usize) -> String {
    // mixed radix keeps every title distinct; the suffix varies word order
    let s = SUBJECTS[i % SUBJECTS.len()];
    let a = ACTIONS[(i / SUBJECTS.len()) % ACTIONS.len()];
    let p = PLACES[(i / (SUBJECTS.len() * ACTIONS.len())) % PLACES.len()];
    format!("{s} {a} {p}")
}

fn typo(title: &str, at: usize) -> String {
    let mut chars: Vec<char> = title.chars().collect();
    let letters: Vec<usize> = (0..chars.len()).filter(|&i| chars[i].is_ascii_lowercase()).collect();
    let i = letters[at % letters.len()];
    chars[i] = if chars[i] == 'x' { 'q' } else { 'x' };
    chars.into_iter().collect()
}

pub fn corpus_fixture(seed: u64) -> CorpusFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // stride through the title space so neighbouring titles differ in
    // several words
    let mut titles = (0..).map(|i| fixture_title(i * 7 + 3));
    let mut events = Vec::new();
    let mut articles = Vec::new();
    let mut ev_n = 0;
    let mut art_n = 0;
    let year = |rng: &mut ChaCha8Rng| rng.gen_range(1960..=1995);
    let mut push_article = |articles: &mut Vec<ArticleRecord>, title: &str, year: i32, rng: &mut ChaCha8Rng| {
        art_n += 1;
        let id = format!("pq{art_n:05}");
        let topic = rng.gen_range(0..TOPICS.len());
        articles.push(ArticleRecord { id: id.clone(), title: title.to_string(), year, text: document(rng, true, topic), category: "national".into() });
        id
    };
    let mut push_event = |events: &mut Vec<EventRecord>, title: &str, year: i32, n: u32, rng: &mut ChaCha8Rng| {
        ev_n += 1;
        let mut attributes = IndexMap::new();
        attributes.insert("size".to_string(), rng.gen_range(10..5000).to_string());
        attributes.insert("claims".to_string(), pick(rng, &["civil rights", "labor", "housing", "peace", "environment"]).to_string());
        events.push(EventRecord { event_id: format!("ev{ev_n:05}"), article_title: title.to_string(), year, events_in_article: n, attributes });
    };

    // single-event exact matches; two of them have a duplicate article
    for k in 0..112 {
        let (t, y) = (titles.next().unwrap(), year(&mut rng));
        push_article(&mut articles, &t, y, &mut rng);
        if k < 2 {
            push_article(&mut articles, &t.to_uppercase(), y, &mut rng);
        }
        push_event(&mut events, &t, y, 1, &mut rng);
    }
    // single-event fuzzy matches: one substituted letter
    for k in 0..7 {
        let (t, y) = (titles.next().unwrap(), year(&mut rng));
        push_article(&mut articles, &t, y, &mut rng);
        push_event(&mut events, &typo(&t, k * 3 + 1), y, 1, &mut rng);
    }
    // articles covering two events, both rows present
    for _ in 0..24 {
        let (t, y) = (titles.next().unwrap(), year(&mut rng));
        push_article(&mut articles, &t, y, &mut rng);
        push_event(&mut events, &t, y, 2, &mut rng);
        push_event(&mut events, &t, y, 2, &mut rng);
    }
    // multi-event articles whose sibling rows are missing
    for k in 0..16 {
        let (t, y) = (titles.next().unwrap(), year(&mut rng));
        push_article(&mut articles, &t, y, &mut rng);
        push_event(&mut events, &t, y, 2 + (k % 2) as u32, &mut rng);
    }
    // single-event rows that point at the same article
    for _ in 0..8 {
        let (t, y) = (titles.next().unwrap(), year(&mut rng));
        push_article(&mut articles, &t, y, &mut rng);
        push_event(&mut events, &t, y, 1, &mut rng);
        push_event(&mut events, &t, y, 1, &mut rng);
    }
    // misses: no article, article in another year, title too different
    for k in 0..10 {
        let t = titles.next().unwrap();
        let y = if k < 2 { 1958 } else { year(&mut rng) };
        push_event(&mut events, &t, y, 1, &mut rng);
    }
    for _ in 0..6 {
        let (t, y) = (titles.next().unwrap(), rng.gen_range(1960..1995));
        push_article(&mut articles, &t, y + 1, &mut rng);
        push_event(&mut events, &t, y, 1, &mut rng);
    }
    for _ in 0..3 {
        let (t, y) = (titles.next().unwrap(), year(&mut rng));
        push_article(&mut articles, &t, y, &mut rng);
        let reordered: Vec<&str> = t.split(' ').rev().collect();
        push_event(&mut events, &reordered.join(" "), y, 1, &mut rng);
    }
    // unrelated search hits nobody points at
    for _ in 0..30 {
        let (t, y) = (titles.next().unwrap(), year(&mut rng));
        push_article(&mut articles, &t, y, &mut rng);
    }
    // first entries are matched or shadowed search hits
    let linked: Vec<ArticleRecord> = articles[..3].to_vec();
    events.shuffle(&mut rng);
    articles.shuffle(&mut rng);

    let mut archive = Vec::new();
    let per_category = [60, 20, 50, 15, 45, 55, 25, 10, 20];
    let mut arch_n = 0;
    let mut push_archive = |archive: &mut Vec<ArticleRecord>, category: &str, topic: usize, rng: &mut ChaCha8Rng| {
        arch_n += 1;
        archive.push(ArticleRecord {
            id: format!("nyt{arch_n:05}"),
            title: format!("{} report {arch_n}", category),
            year: rng.gen_range(1960..=1995),
            text: document(rng, false, topic),
            category: category.to_string(),
        });
    };
    for (topic, &count) in per_category.iter().enumerate() {
        for _ in 0..count {
            push_archive(&mut archive, TOPICS[topic].0, topic, &mut rng);
        }
    }
    for (category, count) in [("politics", 40), ("world", 15), ("editorial", 10)] {
        for _ in 0..count {
            push_archive(&mut archive, category, 0, &mut rng);
        }
    }
    // search hits that also sit in an allowlisted section of the archive
    for a in &linked {
        archive.push(ArticleRecord { category: "business".into(), ..a.clone() });
    }
    archive.shuffle(&mut rng);
    CorpusFixture { events, articles, archive }
}

impl CorpusFixture {
    /// Writes `events.csv`, `articles.jsonl` and `archive.jsonl`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_events(&dir.join("events.csv"), &self.events)?;
        write_jsonl(&dir.join("articles.jsonl"), &self.articles)?;
        write_jsonl(&dir.join("archive.jsonl"), &self.archive)
    }
}

/// Attribute order of generated image labels.
pub const IMAGE_ATTRIBUTES: [&str; 4] = ["protest", "violence", "sign", "police"];

fn paint_disc(img: &mut [f32], size: usize, cx: f32, cy: f32, r: f32, rgb: [f32; 3]) {
    for y in 0..size {
        for x in 0..size {
            let d2 = (x as f32 + 0.5 - cx).powi(2) + (y as f32 + 0.5 - cy).powi(2);
            if d2 <= r * r {
                img[(y * size + x) * 3..][..3].copy_from_slice(&rgb);
            }
        }
    }
}

fn paint_rect(img: &mut [f32], size: usize, x0: usize, y0: usize, w: usize, h: usize, rgb: [f32; 3]) {
    for y in y0..(y0 + h).min(size) {
        for x in x0..(x0 + w).min(size) {
            img[(y * size + x) * 3..][..3].copy_from_slice(&rgb);
        }
    }
}

/// Square RGB images. Protest scenes contain a crowd of warm-coloured
/// blobs; other scenes contain at most a couple of cool-coloured ones.
/// Attribute labels exist only for protest scenes, as in crowd-annotated
/// image sets; they are `None` otherwise.
pub fn image_dataset(n: usize, size: usize, positive_rate: f64, seed: u64) -> Vec<ImageExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let protest = rng.gen_bool(positive_rate);
            let base = [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)];
            let tilt: f32 = rng.gen_range(-0.2..0.2);
            let mut img: Vec<f32> = (0..size * size * 3)
                .map(|k| {
                    let y = (k / 3 / size) as f32 / size as f32;
                    (base[k % 3] + tilt * y + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0)
                })
                .collect();
            let s = size as f32;
            let mut labels = vec![Some(f32::from(u8::from(protest))), None, None, None];
            if protest {
                for _ in 0..rng.gen_range(4..8) {
                    let rgb = [rng.gen_range(0.85..1.0), rng.gen_range(0.0..0.3), rng.gen_range(0.1..0.4)];
                    paint_disc(&mut img, size, rng.gen_range(0.1..0.9) * s, rng.gen_range(0.1..0.9) * s, s * rng.gen_range(0.05..0.1), rgb);
                }
                let sign = rng.gen_bool(0.5);
                if sign {
                    let (w, h) = (size / 4, size / 6);
                    paint_rect(&mut img, size, rng.gen_range(0..size - w), rng.gen_range(0..size - h), w, h, [1.0, 1.0, 1.0]);
                }
                let police = rng.gen_bool(0.3);
                if police {
                    let w = size / 8;
                    paint_rect(&mut img, size, rng.gen_range(0..size - w), size - size / 3, w, size / 3, [0.05, 0.05, 0.35]);
                }
                let violence = rng.gen_bool(0.2);
                if violence {
                    let r = s * 0.12;
                    paint_disc(&mut img, size, rng.gen_range(0.2..0.8) * s, rng.gen_range(0.2..0.8) * s, r, [1.0, 0.6, 0.0]);
                }
                labels[1] = Some(f32::from(u8::from(violence)));
                labels[2] = Some(f32::from(u8::from(sign)));
                labels[3] = Some(f32::from(u8::from(police)));
            } else {
                for _ in 0..rng.gen_range(0..3) {
                    let rgb = [rng.gen_range(0.0..0.3), rng.gen_range(0.4..0.9), rng.gen_range(0.6..1.0)];
                    paint_disc(&mut img, size, rng.gen_range(0.1..0.9) * s, rng.gen_range(0.1..0.9) * s, s * rng.gen_range(0.05..0.15), rgb);
                }
            }
            ImageExample {
                id: format!("img{i:05}"),
                pixels: Tensor::new(&[size, size, 3], img).expect("generated pixels are finite"),
                labels,
            }
        })
        .collect()
}

/// Writes each image as PPM plus a `manifest.csv` (`path,<attributes>`)
/// with blank cells for absent labels.
pub fn write_image_dataset(examples: &[ImageExample], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = dir.join("manifest.csv");
    let mut w = csv::Writer::from_path(&manifest)?;
    w.write_record(std::iter::once("path").chain(IMAGE_ATTRIBUTES))?;
    for ex in examples {
        let name = format!("{}.ppm", ex.id);
        save_image(&ex.pixels, &dir.join(&name))?;
        let cells = ex.labels.iter().map(|l| l.map(|v| v.to_string()).unwrap_or_default());
        w.write_record(std::iter::once(name).chain(cells))?;
    }
    w.flush().map_err(|e| Error::io(&manifest, e))
}
