use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::attention::{sliding_window_attention_var, BandPlan};
use super::{TextModelConfig, TokenSequence, Vocabulary};
use crate::error::{bail, Result};
use crate::tensor::init::{check_store, materialize, Init, ParamSpec};
use crate::tensor::{ops, Graph, ParamGrads, ParamId, ParamStore, Scalar, Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TextLabel {
    NonProtest,
    Protest,
}

impl TextLabel {
    pub fn class(self) -> usize {
        match self {
            TextLabel::NonProtest => 0,
            TextLabel::Protest => 1,
        }
    }

    pub fn from_class(class: u8) -> Result<Self> {
        match class {
            0 => Ok(TextLabel::NonProtest),
            1 => Ok(TextLabel::Protest),
            c => bail!(Index, "text label must be 0 or 1, got {c}"),
        }
    }
}

/// One labelled, already-tokenized document.
#[derive(Debug, Clone, PartialEq)]
pub struct TextExample {
    pub id: String,
    pub seq: TokenSequence,
    pub label: TextLabel,
}

/// Result of classifying one document.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TextPrediction {
    pub label: TextLabel,
    /// Probability of the protest class.
    pub probability: f32,
}

#[derive(Debug, Clone)]
struct LayerIds {
    ln1: (ParamId, ParamId),
    q: (ParamId, ParamId),
    k: (ParamId, ParamId),
    v: (ParamId, ParamId),
    out: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    ff_in: (ParamId, ParamId),
    ff_out: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
struct Layout {
    tok_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<LayerIds>,
    ln_final: (ParamId, ParamId),
    head: (ParamId, ParamId),
}

/// Architecture plus parameter layout; holds no weights, so the same net
/// runs over `f32` or `f64` stores.
#[derive(Debug, Clone)]
pub struct TextNet {
    pub config: TextModelConfig,
    layout: Layout,
}

fn linear_specs(specs: &mut Vec<ParamSpec>, name: &str, fan_in: usize, fan_out: usize, init: Init) {
    specs.push(ParamSpec::new(format!("{name}.weight"), &[fan_in, fan_out], init));
    specs.push(ParamSpec::new(format!("{name}.bias"), &[fan_out], Init::Zeros));
}

fn norm_specs(specs: &mut Vec<ParamSpec>, name: &str, dim: usize) {
    specs.push(ParamSpec::new(format!("{name}.gamma"), &[dim], Init::Ones));
    specs.push(ParamSpec::new(format!("{name}.beta"), &[dim], Init::Zeros));
}

impl TextNet {
    /// Declared parameters, in checkpoint order.
    pub fn param_specs(config: &TextModelConfig) -> Vec<ParamSpec> {
        let d = config.d_model;
        let mut s = vec![
            ParamSpec::new("embeddings.token", &[config.vocab_size, d], Init::Std(0.02)),
            ParamSpec::new("embeddings.position", &[config.max_len, d], Init::Std(0.02)),
        ];
        for l in 0..config.n_layers {
            let p = format!("layers.{l}");
            norm_specs(&mut s, &format!("{p}.attn_norm"), d);
            for proj in ["query", "key", "value", "output"] {
                linear_specs(&mut s, &format!("{p}.attn.{proj}"), d, d, Init::Xavier);
            }
            norm_specs(&mut s, &format!("{p}.ffn_norm"), d);
            linear_specs(&mut s, &format!("{p}.ffn.input"), d, 4 * d, Init::Xavier);
            linear_specs(&mut s, &format!("{p}.ffn.output"), 4 * d, d, Init::Xavier);
        }
        norm_specs(&mut s, "final_norm", d);
        linear_specs(&mut s, "classifier", d, 2, Init::Xavier);
        s
    }

    fn resolve<T: Scalar>(config: TextModelConfig, store: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        check_store(&Self::param_specs(&config), store)?;
        let id = |name: String| store.id(&name).expect("checked by check_store");
        let pair = |prefix: &str, a: &str, b: &str| (id(format!("{prefix}.{a}")), id(format!("{prefix}.{b}")));
        let lin = |p: &str| pair(p, "weight", "bias");
        let norm = |p: &str| pair(p, "gamma", "beta");
        let layers = (0..config.n_layers)
            .map(|l| {
                let p = format!("layers.{l}");
                LayerIds {
                    ln1: norm(&format!("{p}.attn_norm")),
                    q: lin(&format!("{p}.attn.query")),
                    k: lin(&format!("{p}.attn.key")),
                    v: lin(&format!("{p}.attn.value")),
                    out: lin(&format!("{p}.attn.output")),
                    ln2: norm(&format!("{p}.ffn_norm")),
                    ff_in: lin(&format!("{p}.ffn.input")),
                    ff_out: lin(&format!("{p}.ffn.output")),
                }
            })
            .collect();
        let layout = Layout {
            tok_emb: id("embeddings.token".into()),
            pos_emb: id("embeddings.position".into()),
            layers,
            ln_final: norm("final_norm"),
            head: lin("classifier"),
        };
        Ok(TextNet { config, layout })
    }

    /// Names of the attention and feed-forward output projections of layer `l`.
    pub fn output_projection_names(l: usize) -> [String; 4] {
        [
            format!("layers.{l}.attn.output.weight"),
            format!("layers.{l}.attn.output.bias"),
            format!("layers.{l}.ffn.output.weight"),
            format!("layers.{l}.ffn.output.bias"),
        ]
    }

    fn check_sequence(&self, seq: &TokenSequence) -> Result<()> {
        if seq.ids.is_empty() || seq.ids.len() != seq.flags.len() {
            bail!(Dimension, "sequence has {} ids and {} flags", seq.ids.len(), seq.flags.len());
        }
        if seq.len() > self.config.max_len {
            bail!(Length, "sequence of {} tokens exceeds max_len {}", seq.len(), self.config.max_len);
        }
        if let Some(&id) = seq.ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            bail!(Vocabulary, "token id {id} ≥ vocab_size {}", self.config.vocab_size);
        }
        Ok(())
    }

    /// `tok_emb[ids[i]] + pos_emb[i]`, then dropout when an RNG is supplied.
    pub fn embed<T: Scalar>(&self, g: &mut Graph<'_, T>, seq: &TokenSequence, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        self.check_sequence(seq)?;
        let ids: Vec<usize> = seq.ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..ids.len()).collect();
        let tok_table = g.param(self.layout.tok_emb);
        let pos_table = g.param(self.layout.pos_emb);
        let tok = g.gather_rows(tok_table, &ids)?;
        let pos = g.gather_rows(pos_table, &positions)?;
        let x = g.add(tok, pos)?;
        match rng {
            Some(rng) => g.dropout(x, self.config.dropout, rng),
            None => Ok(x),
        }
    }

    fn linear<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, (w, b): (ParamId, ParamId)) -> Result<Var> {
        let (w, b) = (g.param(w), g.param(b));
        g.linear(x, w, b)
    }

    fn norm<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, (gamma, beta): (ParamId, ParamId)) -> Result<Var> {
        let (gamma, beta) = (g.param(gamma), g.param(beta));
        g.layer_norm(x, gamma, beta, LN_EPS)
    }

    /// `[len, d_model] → [heads, len, d_head]`.
    fn split_heads<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, len: usize) -> Result<Var> {
        let c = &self.config;
        let x = g.reshape(x, &[len, c.n_heads, c.d_head()])?;
        g.permute(x, &[1, 0, 2])
    }

    /// One pre-LayerNorm block: banded attention then a 4× GELU
    /// feed-forward, each wrapped in a residual connection.
    pub fn layer<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        index: usize,
        plan: &Arc<BandPlan>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let ids = &self.layout.layers[index];
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.config.d_model || shape[0] != plan.len() {
            bail!(Dimension, "layer input {shape:?} does not match [{}, {}]", plan.len(), self.config.d_model);
        }
        let len = shape[0];
        let h = self.norm(g, x, ids.ln1)?;
        let q = self.linear(g, h, ids.q)?;
        let k = self.linear(g, h, ids.k)?;
        let v = self.linear(g, h, ids.v)?;
        let (q, k, v) = (self.split_heads(g, q, len)?, self.split_heads(g, k, len)?, self.split_heads(g, v, len)?);
        let a = sliding_window_attention_var(g, q, k, v, plan)?;
        let a = g.permute(a, &[1, 0, 2])?;
        let a = g.reshape(a, &[len, self.config.d_model])?;
        let mut a = self.linear(g, a, ids.out)?;
        if let Some(r) = rng.as_deref_mut() {
            a = g.dropout(a, self.config.dropout, r)?;
        }
        let x = g.add(x, a)?;
        let h = self.norm(g, x, ids.ln2)?;
        let f = self.linear(g, h, ids.ff_in)?;
        let f = g.gelu(f)?;
        let mut f = self.linear(g, f, ids.ff_out)?;
        if let Some(r) = rng {
            f = g.dropout(f, self.config.dropout, r)?;
        }
        g.add(x, f)
    }

    /// Attention plan for a sequence under this configuration.
    pub fn plan(&self, seq: &TokenSequence) -> Result<Arc<BandPlan>> {
        Ok(Arc::new(BandPlan::new(&seq.flags, self.config.window)?))
    }

    /// Final hidden states `[len, d_model]` before the last LayerNorm.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<'_, T>, seq: &TokenSequence, mut rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let plan = self.plan(seq)?;
        let mut x = self.embed(g, seq, rng.as_deref_mut())?;
        for l in 0..self.config.n_layers {
            x = self.layer(g, x, l, &plan, rng.as_deref_mut())?;
        }
        Ok(x)
    }

    /// `[1, 2]` logits from the CLS representation.
    pub fn logits<T: Scalar>(&self, g: &mut Graph<'_, T>, seq: &TokenSequence, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let x = self.encode(g, seq, rng)?;
        let x = self.norm(g, x, self.layout.ln_final)?;
        let cls = g.gather_rows(x, &[0])?;
        self.linear(g, cls, self.layout.head)
    }
}

/// Text model weights plus architecture.
#[derive(Debug, Clone)]
pub struct TextClassifier {
    pub net: TextNet,
    pub params: ParamStore<f32>,
}

impl TextClassifier {
    /// Freshly initialized model; `seed` fully determines the weights.
    pub fn new(config: TextModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = materialize(&TextNet::param_specs(&config), &mut rng)?;
        Self::from_params(config, params)
    }

    /// Wraps existing weights, checking names and shapes.
    pub fn from_params(config: TextModelConfig, params: ParamStore<f32>) -> Result<Self> {
        let net = TextNet::resolve(config, &params)?;
        Ok(TextClassifier { net, params })
    }

    pub fn config(&self) -> &TextModelConfig {
        &self.net.config
    }

    /// Inference logits `[1, 2]`.
    pub fn logits(&self, seq: &TokenSequence) -> Result<Tensor<f32>> {
        let mut g = Graph::with_params(&self.params);
        let out = self.net.logits(&mut g, seq, None)?;
        Ok(g.value(out).clone())
    }

    /// Probability of the protest class.
    pub fn protest_probability(&self, seq: &TokenSequence) -> Result<f32> {
        let logits = self.logits(seq)?;
        Ok(ops::softmax(&logits, 1)?.data()[TextLabel::Protest.class()])
    }

    /// Tokenizes, truncates to `max_len`, and classifies at threshold 0.5.
    pub fn classify_text(&self, text: &str, vocab: &Vocabulary) -> Result<TextPrediction> {
        self.classify_text_at(text, vocab, 0.5)
    }

    pub fn classify_text_at(&self, text: &str, vocab: &Vocabulary, threshold: f32) -> Result<TextPrediction> {
        let seq = TokenSequence::encode(text, vocab, self.config());
        let probability = self.protest_probability(&seq)?;
        let label = if probability >= threshold {
            TextLabel::Protest
        } else {
            TextLabel::NonProtest
        };
        Ok(TextPrediction { label, probability })
    }

    /// Unweighted cross-entropy of one example and its parameter gradients.
    /// Supplying `dropout_seed` switches on training-mode dropout.
    pub fn loss_and_grads(&self, seq: &TokenSequence, label: TextLabel, dropout_seed: Option<u64>) -> Result<(f32, ParamGrads<f32>)> {
        let mut rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
        let mut g = Graph::with_params(&self.params);
        let logits = self.net.logits(&mut g, seq, rng.as_mut())?;
        let loss = g.cross_entropy(logits, &[label.class()], None)?;
        let value = g.value(loss).item()?;
        g.backward(loss)?;
        Ok((value, g.param_grads()?))
    }
}
