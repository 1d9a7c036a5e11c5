use std::path::Path;

use super::{Checkpoint, CheckpointHeader, Classifier, ModelKind};
use crate::error::{Error, Result};
use crate::tensor::{ops, ParamGrads, ParamStore};
use crate::text::{TextClassifier, TextExample, TextModelConfig, Vocabulary, CLS, PAD, UNK};
use crate::vision::{ImageExample, VisionClassifier, VisionModelConfig};

impl Classifier for TextClassifier {
    type Example = TextExample;

    fn kind(&self) -> ModelKind {
        ModelKind::Text
    }

    fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    fn heads(&self) -> Vec<String> {
        vec!["protest".into()]
    }

    fn targets(&self, ex: &TextExample) -> Vec<Option<f32>> {
        vec![Some(ex.label.class() as f32)]
    }

    fn loss_and_grads(&self, ex: &TextExample, dropout_seed: u64) -> Result<(f32, ParamGrads<f32>)> {
        TextClassifier::loss_and_grads(self, &ex.seq, ex.label, Some(dropout_seed))
    }

    fn score(&self, ex: &TextExample) -> Result<(f32, Vec<f32>)> {
        let logits = self.logits(&ex.seq)?;
        let row = logits.data();
        let lse = ops::log_sum_exp(row);
        let loss = lse - row[ex.label.class()];
        Ok((loss, vec![(row[1] - lse).exp()]))
    }

    fn config_json(&self) -> serde_json::Value {
        serde_json::to_value(self.config()).expect("config serializes")
    }
}

impl Classifier for VisionClassifier {
    type Example = ImageExample;

    fn kind(&self) -> ModelKind {
        ModelKind::Vision
    }

    fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    fn heads(&self) -> Vec<String> {
        self.config().attribute_heads.clone()
    }

    fn targets(&self, ex: &ImageExample) -> Vec<Option<f32>> {
        ex.labels.clone()
    }

    fn primary_head(&self) -> usize {
        self.config().protest_head().expect("validated config")
    }

    fn loss_and_grads(&self, ex: &ImageExample, _dropout_seed: u64) -> Result<(f32, ParamGrads<f32>)> {
        let ones = vec![1.0; ex.labels.len()];
        VisionClassifier::loss_and_grads(self, ex, &ones)
    }

    fn score(&self, ex: &ImageExample) -> Result<(f32, Vec<f32>)> {
        let logits = self.logits(&ex.pixels)?;
        let (mut sum, mut n) = (0.0f32, 0usize);
        for (&z, y) in logits.data().iter().zip(&ex.labels) {
            if let Some(y) = y {
                sum += ops::bce_with_logits_scalar(z, *y);
                n += 1;
            }
        }
        let probs = logits.data().iter().map(|&z| ops::sigmoid_scalar(z)).collect();
        Ok((if n == 0 { 0.0 } else { sum / n as f32 }, probs))
    }

    fn config_json(&self) -> serde_json::Value {
        serde_json::to_value(self.config()).expect("config serializes")
    }
}

/// A model restored from a checkpoint file.
#[derive(Debug, Clone)]
pub enum LoadedModel {
    Text { model: TextClassifier, vocab: Option<Vocabulary> },
    Vision(VisionClassifier),
}

fn rebuild(header: &CheckpointHeader, params: ParamStore<f32>) -> Result<LoadedModel> {
    let bad = |e: serde_json::Error| Error::Integrity(format!("checkpoint config does not describe a {} model: {e}", header.model_kind));
    Ok(match header.model_kind {
        ModelKind::Text => {
            let config: TextModelConfig = serde_json::from_value(header.config.clone()).map_err(bad)?;
            let vocab = match &header.vocabulary {
                Some(tokens) => {
                    let reserved = [PAD, UNK, CLS];
                    if tokens.len() < 3 || tokens[..3] != reserved {
                        return Err(Error::Integrity("checkpoint vocabulary does not start with the reserved tokens".into()));
                    }
                    Some(Vocabulary::from_tokens(tokens[3..].iter().cloned())?)
                }
                None => None,
            };
            LoadedModel::Text { model: TextClassifier::from_params(config, params)?, vocab }
        }
        ModelKind::Vision => {
            let config: VisionModelConfig = serde_json::from_value(header.config.clone()).map_err(bad)?;
            LoadedModel::Vision(VisionClassifier::from_params(config, params)?)
        }
    })
}

/// Loads a checkpoint and rebuilds whichever model it holds.
pub fn load_model(path: &Path) -> Result<(LoadedModel, CheckpointHeader)> {
    let ck = Checkpoint::load(path)?;
    let model = rebuild(&ck.header, ck.params).map_err(|e| match e {
        Error::Integrity(m) => Error::Integrity(format!("{}: {m}", path.display())),
        other => other,
    })?;
    Ok((model, ck.header))
}
