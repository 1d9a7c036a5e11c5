//! Long-document classifier: token and position embeddings, pre-LayerNorm
//! layers of sliding-window attention with a global CLS token, and a
//! two-way protest / non-protest head read from the CLS representation.

mod attention;
mod model;
mod vocab;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

pub use attention::{sliding_window_attention, sliding_window_attention_var, BandPlan, TokenFlag};
pub use model::{TextClassifier, TextExample, TextNet, TextPrediction, TextLabel};
pub use vocab::{tokenize, Vocabulary, CLS, CLS_ID, MIN_VOCAB_BUDGET, PAD, PAD_ID, UNK, UNK_ID};

/// Architecture of the text classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextModelConfig {
    pub max_len: usize,
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// Even attention span; each token sees `window / 2` neighbours per side.
    pub window: usize,
    #[serde(default = "default_globals")]
    pub global_positions: Vec<usize>,
    #[serde(default)]
    pub dropout: f64,
}

fn default_globals() -> Vec<usize> {
    vec![0]
}

impl Default for TextModelConfig {
    fn default() -> Self {
        TextModelConfig {
            max_len: 512,
            vocab_size: 30_003,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            window: 64,
            global_positions: default_globals(),
            dropout: 0.1,
        }
    }
}

impl TextModelConfig {
    /// Full-size reference geometry (base-sized encoder over 4096 tokens).
    pub fn reference() -> Self {
        TextModelConfig {
            max_len: 4096,
            vocab_size: 50_265,
            d_model: 768,
            n_heads: 12,
            n_layers: 12,
            window: 512,
            global_positions: default_globals(),
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window < 2 || self.window % 2 != 0 || self.window >= self.max_len {
            bail!(
                Config,
                "window must be even with 2 ≤ window < max_len ({}), got {}",
                self.max_len,
                self.window
            );
        }
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            bail!(Config, "d_model {} not divisible by n_heads {}", self.d_model, self.n_heads);
        }
        if self.n_layers == 0 {
            bail!(Config, "n_layers must be ≥ 1");
        }
        if self.vocab_size <= CLS_ID as usize {
            bail!(Config, "vocab_size {} leaves no room for regular tokens", self.vocab_size);
        }
        if let Some(p) = self.global_positions.iter().find(|&&p| p >= self.max_len) {
            bail!(Config, "global position {p} outside [0, {})", self.max_len);
        }
        if !(0.0..1.0).contains(&self.dropout) {
            bail!(Config, "dropout must be in [0, 1), got {}", self.dropout);
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Token ids with per-token attention roles. Position 0 is always CLS and
/// always global.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub flags: Vec<TokenFlag>,
}

impl TokenSequence {
    /// Prepends CLS and keeps the first `max_len − 1` body tokens.
    pub fn from_body(body: &[u32], config: &TextModelConfig) -> Self {
        let keep = body.len().min(config.max_len.saturating_sub(1));
        let mut ids = Vec::with_capacity(keep + 1);
        ids.push(CLS_ID);
        ids.extend_from_slice(&body[..keep]);
        let flags = (0..ids.len())
            .map(|i| {
                if i == 0 || config.global_positions.contains(&i) {
                    TokenFlag::Global
                } else {
                    TokenFlag::Local
                }
            })
            .collect();
        TokenSequence { ids, flags }
    }

    pub fn encode(text: &str, vocab: &Vocabulary, config: &TextModelConfig) -> Self {
        Self::from_body(&vocab.encode(text), config)
    }

    /// Appends `n` padding tokens.
    pub fn padded(mut self, n: usize) -> Self {
        self.ids.extend(std::iter::repeat(PAD_ID).take(n));
        self.flags.extend(std::iter::repeat(TokenFlag::Padding).take(n));
        self
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_and_reference_configs_validate() {
        TextModelConfig::default().validate().unwrap();
        TextModelConfig::reference().validate().unwrap();
    }

    #[test]
    fn invalid_configs() {
        let base = TextModelConfig::default();
        for bad in [
            TextModelConfig { window: 7, ..base.clone() },
            TextModelConfig { window: 512, ..base.clone() },
            TextModelConfig { n_heads: 5, ..base.clone() },
            TextModelConfig { global_positions: vec![0, 600], ..base.clone() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn truncation_keeps_cls_and_leading_tokens() {
        let config = TextModelConfig { max_len: 8, window: 2, ..TextModelConfig::default() };
        let body: Vec<u32> = (10..10_010).collect();
        let seq = TokenSequence::from_body(&body, &config);
        assert_eq!(seq.ids, vec![CLS_ID, 10, 11, 12, 13, 14, 15, 16]);
        assert_eq!(seq.flags[0], TokenFlag::Global);
        assert!(seq.flags[1..].iter().all(|&f| f == TokenFlag::Local));
        let empty = TokenSequence::from_body(&[], &config);
        assert_eq!(empty.ids, vec![CLS_ID]);
    }
}
