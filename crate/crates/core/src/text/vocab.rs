use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{bail, Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;

/// Smallest accepted vocabulary budget.
pub const MIN_VOCAB_BUDGET: usize = 10;

/// Lowercases, turns every non-alphanumeric character into a separator and
/// splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Token ↔ id mapping. Ids 0, 1, 2 are PAD, UNK and CLS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Keeps the `budget` most frequent tokens of `texts`; equal counts are
    /// ordered lexicographically.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, budget: usize) -> Result<Self> {
        if budget < MIN_VOCAB_BUDGET {
            bail!(Parameter, "vocabulary size must be ≥ {MIN_VOCAB_BUDGET}, got {budget}");
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        let mut n_texts = 0usize;
        for text in texts {
            n_texts += 1;
            for tok in tokenize(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if n_texts == 0 {
            bail!(Parameter, "cannot build a vocabulary from an empty training split");
        }
        let mut ranked: Vec<(String, u64)> = counts
            .into_iter()
            .filter(|(t, _)| ![PAD, UNK, CLS].contains(&t.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(budget);
        Self::from_tokens(ranked.into_iter().map(|(t, _)| t))
    }

    /// Vocabulary with the reserved tokens followed by `tokens` in order.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let all = [PAD, UNK, CLS].map(str::to_owned).into_iter().chain(tokens);
        let mut vocab = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for tok in all {
            if vocab.index.contains_key(&tok) {
                bail!(Vocabulary, "duplicate token {tok:?}");
            }
            vocab.index.insert(tok.clone(), vocab.tokens.len() as u32);
            vocab.tokens.push(tok);
        }
        Ok(vocab)
    }

    /// Reads one token per line; line number is the id.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < 3 || lines[..3] != [PAD, UNK, CLS] {
            bail!(
                Vocabulary,
                "{}: first three lines must be {PAD}, {UNK}, {CLS}",
                path.display()
            );
        }
        Self::from_tokens(lines[3..].iter().map(|s| s.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Token ids of `text`, without CLS.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_strips_punctuation() {
        assert_eq!(tokenize("Hello, World!! It's"), ["hello", "world", "it", "s"]);
        assert!(tokenize(" ... ").is_empty());
    }

    #[test]
    fn frequency_order_with_specials_first() {
        let v = Vocabulary::build(["a a b"], 100).unwrap();
        assert_eq!(v.tokens(), [PAD, UNK, CLS, "a", "b"]);
    }

    #[test]
    fn ties_are_lexicographic_and_budget_truncates() {
        let v = Vocabulary::build(["y x z z"], 10).unwrap();
        assert_eq!(&v.tokens()[3..], ["z", "x", "y"]);
        let texts: Vec<String> = (0..20).map(|i| format!("t{i:02}")).collect();
        let v = Vocabulary::build(texts.iter().map(String::as_str), 10).unwrap();
        assert_eq!(v.len(), 13);
        assert_eq!(v.token(3), Some("t00"));
    }

    #[test]
    fn unseen_tokens_map_to_unk() {
        let v = Vocabulary::build(["train words only"], 10).unwrap();
        assert_eq!(v.encode("words valonly"), vec![v.id("words"), UNK_ID]);
    }

    #[test]
    fn budget_and_empty_errors() {
        assert!(matches!(Vocabulary::build(["a"], 9), Err(Error::Parameter(_))));
        assert!(matches!(Vocabulary::build([], 10), Err(Error::Parameter(_))));
    }

    #[test]
    fn file_roundtrip_and_header_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocabulary::build(["march rally march"], 10).unwrap();
        v.save(&path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "[PAD]\n[UNK]\n[CLS]\nmarch\nrally\n");
        assert_eq!(Vocabulary::load(&path).unwrap(), v);
        fs::write(&path, "a\nb\nc\n").unwrap();
        assert!(matches!(Vocabulary::load(&path), Err(Error::Vocabulary(_))));
    }
}
