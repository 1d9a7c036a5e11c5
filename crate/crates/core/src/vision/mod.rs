//! Hierarchical shifted-window image classifier with independent sigmoid
//! heads (protest plus visual attributes).

mod attention;
pub mod image;
mod model;
pub mod window;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::tensor::Tensor;

pub use attention::{cosine_window_attention, cosine_window_attention_var, temperature, CosineAttentionOutput, NORM_FLOOR};
pub use model::{log_cpb_bias, patchify, ImageExample, StageShape, VisionClassifier, VisionNet, VisionPrediction};
pub use window::{cyclic_shift, window_partition, window_reverse};

pub const DEFAULT_ATTRIBUTES: [&str; 4] = ["protest", "violence", "sign", "police"];

/// Architecture of the image classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisionModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub window: usize,
    pub embed_dim: usize,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    #[serde(default = "default_attributes")]
    pub attribute_heads: Vec<String>,
    #[serde(default = "default_tau_min")]
    pub tau_min: f64,
    /// Hidden width of the position-bias MLP.
    #[serde(default = "default_cpb_hidden")]
    pub cpb_hidden: usize,
}

fn default_attributes() -> Vec<String> {
    DEFAULT_ATTRIBUTES.map(String::from).to_vec()
}

fn default_tau_min() -> f64 {
    0.01
}

fn default_cpb_hidden() -> usize {
    32
}

impl Default for VisionModelConfig {
    fn default() -> Self {
        VisionModelConfig {
            image_size: 64,
            patch_size: 4,
            window: 4,
            embed_dim: 32,
            depths: vec![2, 2],
            heads: vec![2, 4],
            attribute_heads: default_attributes(),
            tau_min: default_tau_min(),
            cpb_hidden: default_cpb_hidden(),
        }
    }
}

impl VisionModelConfig {
    /// Base-sized geometry: 256-pixel input, 4-pixel patches, window 8.
    pub fn reference() -> Self {
        VisionModelConfig {
            image_size: 256,
            patch_size: 4,
            window: 8,
            embed_dim: 128,
            depths: vec![2, 2, 18, 2],
            heads: vec![4, 8, 16, 32],
            attribute_heads: default_attributes(),
            tau_min: default_tau_min(),
            cpb_hidden: 512,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            bail!(Config, "image_size {} not divisible by patch_size {}", self.image_size, self.patch_size);
        }
        if self.window < 2 {
            bail!(Config, "window must be ≥ 2, got {}", self.window);
        }
        if self.depths.is_empty() || self.depths.len() != self.heads.len() {
            bail!(Config, "depths {:?} and heads {:?} must be non-empty and equally long", self.depths, self.heads);
        }
        let mut grid = self.grid();
        let mut dim = self.embed_dim;
        for (s, (&depth, &heads)) in self.depths.iter().zip(&self.heads).enumerate() {
            if grid % self.window != 0 {
                bail!(Config, "stage {s} grid {grid} not divisible by window {}", self.window);
            }
            if depth == 0 || heads == 0 || dim % heads != 0 {
                bail!(Config, "stage {s}: depth {depth}, dim {dim} and heads {heads} are inconsistent");
            }
            if s + 1 < self.depths.len() {
                if grid % 2 != 0 {
                    bail!(Config, "stage {s} grid {grid} cannot be merged");
                }
                grid /= 2;
                dim *= 2;
            }
        }
        if self.attribute_heads.is_empty() || self.protest_head().is_none() {
            bail!(Config, "attribute_heads must include \"protest\"");
        }
        let mut names = self.attribute_heads.clone();
        names.sort();
        names.dedup();
        if names.len() != self.attribute_heads.len() {
            bail!(Config, "duplicate attribute head names in {:?}", self.attribute_heads);
        }
        if !(self.tau_min > 0.0) {
            bail!(Config, "tau_min must be positive");
        }
        if self.cpb_hidden == 0 {
            bail!(Config, "cpb_hidden must be ≥ 1");
        }
        Ok(())
    }

    /// Token-grid side after patch embedding.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn protest_head(&self) -> Option<usize> {
        self.attribute_heads.iter().position(|a| a == "protest")
    }
}

/// Checks an image against the configured input geometry.
pub fn check_pixels(pixels: &Tensor<f32>, config: &VisionModelConfig) -> Result<()> {
    let s = config.image_size;
    if pixels.shape() != [s, s, 3] {
        bail!(Dimension, "image must be [{s}, {s}, 3], got {:?}", pixels.shape());
    }
    if let Some(v) = pixels.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        bail!(Decode, "pixel value {v} outside [0, 1]");
    }
    Ok(())
}
