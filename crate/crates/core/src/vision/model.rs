use std::sync::Arc;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::attention::cosine_window_attention_var;
use super::window::{invert, log_cpb_coords, merge_index, partition_index, relative_position_index, shift_index, shift_mask};
use super::{check_pixels, VisionModelConfig};
use crate::error::{bail, Result};
use crate::tensor::init::{check_store, materialize, Init, ParamSpec};
use crate::tensor::{ops, Graph, ParamGrads, ParamId, ParamStore, Scalar, Tensor, Var};

const LN_EPS: f64 = 1e-5;
/// Initial attention temperature.
const TAU_INIT: f64 = 0.1;

/// One labelled image. `labels` follow the configured attribute order;
/// `None` marks an absent label.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageExample {
    pub id: String,
    pub pixels: Tensor<f32>,
    pub labels: Vec<Option<f32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VisionPrediction {
    pub protest: f32,
    pub attributes: IndexMap<String, f32>,
}

/// Token grid side and channel count observed at a stage boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageShape {
    pub grid: usize,
    pub channels: usize,
}

/// Splits an `[H, W, 3]` image into `[(H/p)·(W/p), p·p·3]` patch rows, each
/// row ordered `(dy, dx, channel)`.
pub fn patchify<T: Scalar>(pixels: &Tensor<f32>, patch: usize) -> Result<Tensor<T>> {
    let [h, w, c] = *pixels.shape() else {
        bail!(Dimension, "expected [H, W, C] pixels, got {:?}", pixels.shape());
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        bail!(Dimension, "image {h}×{w} not divisible by patch {patch}");
    }
    let src = pixels.data();
    let mut data = Vec::with_capacity(h * w * c);
    for py in 0..h / patch {
        for px in 0..w / patch {
            for dy in 0..patch {
                let row = (py * patch + dy) * w + px * patch;
                data.extend(src[row * c..(row + patch) * c].iter().map(|&v| T::c(v as f64)));
            }
        }
    }
    Tensor::new(&[(h / patch) * (w / patch), patch * patch * c], data)
}

#[derive(Debug, Clone)]
struct BlockIds {
    q: (ParamId, ParamId),
    k: (ParamId, ParamId),
    v: (ParamId, ParamId),
    out: (ParamId, ParamId),
    log_tau: ParamId,
    cpb_hidden: (ParamId, ParamId),
    cpb_out: ParamId,
    attn_norm: (ParamId, ParamId),
    mlp_in: (ParamId, ParamId),
    mlp_out: (ParamId, ParamId),
    mlp_norm: (ParamId, ParamId),
}

/// Precomputed index maps for one stage.
#[derive(Debug, Clone)]
struct StagePlan {
    grid: usize,
    dim: usize,
    heads: usize,
    /// Gather order into windows, without and with the cyclic shift.
    to_windows: [Arc<Vec<usize>>; 2],
    from_windows: [Arc<Vec<usize>>; 2],
    shift_mask: Option<Arc<Vec<bool>>>,
    blocks: Vec<BlockIds>,
    merge: Option<(ParamId, ParamId)>,
}

impl StagePlan {
    /// Blocks alternate regular and shifted windows; a stage whose grid is a
    /// single window never shifts.
    fn shifted(&self, block: usize) -> bool {
        block % 2 == 1 && self.shift_mask.is_some()
    }
}

/// Architecture plus parameter layout of the image classifier.
#[derive(Debug, Clone)]
pub struct VisionNet {
    pub config: VisionModelConfig,
    patch: (ParamId, ParamId),
    patch_norm: (ParamId, ParamId),
    stages: Vec<StagePlan>,
    final_norm: (ParamId, ParamId),
    head: (ParamId, ParamId),
    rel_index: Arc<Vec<usize>>,
    coords: Tensor<f64>,
}

fn linear(s: &mut Vec<ParamSpec>, name: &str, fan_in: usize, fan_out: usize) {
    s.push(ParamSpec::new(format!("{name}.weight"), &[fan_in, fan_out], Init::Xavier));
    s.push(ParamSpec::new(format!("{name}.bias"), &[fan_out], Init::Zeros));
}

fn norm(s: &mut Vec<ParamSpec>, name: &str, dim: usize) {
    s.push(ParamSpec::new(format!("{name}.gamma"), &[dim], Init::Ones));
    s.push(ParamSpec::new(format!("{name}.beta"), &[dim], Init::Zeros));
}

impl VisionNet {
    pub fn param_specs(c: &VisionModelConfig) -> Vec<ParamSpec> {
        let p = c.patch_size;
        let mut s = Vec::new();
        linear(&mut s, "patch_embed", p * p * 3, c.embed_dim);
        norm(&mut s, "patch_norm", c.embed_dim);
        let mut dim = c.embed_dim;
        for (st, (&depth, &heads)) in c.depths.iter().zip(&c.heads).enumerate() {
            for b in 0..depth {
                let n = format!("stages.{st}.blocks.{b}");
                for proj in ["query", "key", "value", "output"] {
                    linear(&mut s, &format!("{n}.attn.{proj}"), dim, dim);
                }
                s.push(ParamSpec::new(format!("{n}.attn.log_tau"), &[heads], Init::Const(TAU_INIT.ln() as f32)));
                linear(&mut s, &format!("{n}.attn.cpb.hidden"), 2, c.cpb_hidden);
                s.push(ParamSpec::new(format!("{n}.attn.cpb.output.weight"), &[c.cpb_hidden, heads], Init::Xavier));
                norm(&mut s, &format!("{n}.attn_norm"), dim);
                linear(&mut s, &format!("{n}.mlp.input"), dim, 4 * dim);
                linear(&mut s, &format!("{n}.mlp.output"), 4 * dim, dim);
                norm(&mut s, &format!("{n}.mlp_norm"), dim);
            }
            if st + 1 < c.depths.len() {
                linear(&mut s, &format!("stages.{st}.merge"), 4 * dim, 2 * dim);
                dim *= 2;
            }
        }
        norm(&mut s, "final_norm", dim);
        linear(&mut s, "heads", dim, c.attribute_heads.len());
        s
    }

    fn resolve<T: Scalar>(config: VisionModelConfig, store: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        check_store(&Self::param_specs(&config), store)?;
        let id = |name: String| store.id(&name).expect("checked by check_store");
        let lin = |p: &str| (id(format!("{p}.weight")), id(format!("{p}.bias")));
        let nrm = |p: &str| (id(format!("{p}.gamma")), id(format!("{p}.beta")));
        let w = config.window;
        let mut grid = config.grid();
        let mut dim = config.embed_dim;
        let mut stages = Vec::new();
        for (st, (&depth, &heads)) in config.depths.iter().zip(&config.heads).enumerate() {
            let plain = partition_index(grid, grid, w)?;
            let (shifted, mask) = if grid > w {
                let roll = shift_index(grid, grid, (w / 2) as isize)?;
                let composed: Vec<usize> = plain.iter().map(|&i| roll[i]).collect();
                (composed, Some(Arc::new(shift_mask(grid, grid, w, w / 2)?)))
            } else {
                (plain.clone(), None)
            };
            let blocks = (0..depth)
                .map(|b| {
                    let n = format!("stages.{st}.blocks.{b}");
                    BlockIds {
                        q: lin(&format!("{n}.attn.query")),
                        k: lin(&format!("{n}.attn.key")),
                        v: lin(&format!("{n}.attn.value")),
                        out: lin(&format!("{n}.attn.output")),
                        log_tau: id(format!("{n}.attn.log_tau")),
                        cpb_hidden: lin(&format!("{n}.attn.cpb.hidden")),
                        cpb_out: id(format!("{n}.attn.cpb.output.weight")),
                        attn_norm: nrm(&format!("{n}.attn_norm")),
                        mlp_in: lin(&format!("{n}.mlp.input")),
                        mlp_out: lin(&format!("{n}.mlp.output")),
                        mlp_norm: nrm(&format!("{n}.mlp_norm")),
                    }
                })
                .collect();
            let last = st + 1 == config.depths.len();
            stages.push(StagePlan {
                grid,
                dim,
                heads,
                from_windows: [Arc::new(invert(&plain)), Arc::new(invert(&shifted))],
                to_windows: [Arc::new(plain), Arc::new(shifted)],
                shift_mask: mask,
                blocks,
                merge: (!last).then(|| lin(&format!("stages.{st}.merge"))),
            });
            if !last {
                grid /= 2;
                dim *= 2;
            }
        }
        Ok(VisionNet {
            patch: lin("patch_embed"),
            patch_norm: nrm("patch_norm"),
            stages,
            final_norm: nrm("final_norm"),
            head: lin("heads"),
            rel_index: Arc::new(relative_position_index(w)),
            coords: log_cpb_coords(w)?,
            config,
        })
    }

    fn lin<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, (w, b): (ParamId, ParamId)) -> Result<Var> {
        let (w, b) = (g.param(w), g.param(b));
        g.linear(x, w, b)
    }

    fn norm<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, (gamma, beta): (ParamId, ParamId)) -> Result<Var> {
        let (gamma, beta) = (g.param(gamma), g.param(beta));
        g.layer_norm(x, gamma, beta, LN_EPS)
    }

    /// Linear projection of every non-overlapping patch: `[G², embed_dim]`.
    pub fn patch_embed<T: Scalar>(&self, g: &mut Graph<'_, T>, pixels: &Tensor<f32>) -> Result<Var> {
        check_pixels(pixels, &self.config)?;
        let patches = patchify::<T>(pixels, self.config.patch_size)?;
        let x = g.input(patches, false);
        self.lin(g, x, self.patch)
    }

    /// Position bias `[heads, N, N]` for one block.
    pub fn position_bias<T: Scalar>(&self, g: &mut Graph<'_, T>, stage: usize, block: usize) -> Result<Var> {
        let ids = &self.stages[stage].blocks[block];
        let heads = self.stages[stage].heads;
        let n = self.config.window * self.config.window;
        let coords = g.input(self.coords.cast(), false);
        let h = self.lin(g, coords, ids.cpb_hidden)?;
        let h = g.relu(h)?;
        let w2 = g.param(ids.cpb_out);
        let table = g.matmul(h, w2)?;
        let per_pair = g.gather_rows(table, &self.rel_index)?;
        let per_head = g.permute(per_pair, &[1, 0])?;
        g.reshape(per_head, &[heads, n, n])
    }

    /// `[nWin·N, C] → [nWin, heads, N, d_head]`.
    fn split_heads<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, n_win: usize, heads: usize, dim: usize) -> Result<Var> {
        let n = self.config.window * self.config.window;
        let x = g.reshape(x, &[n_win, n, heads, dim / heads])?;
        g.permute(x, &[0, 2, 1, 3])
    }

    /// Post-norm block: (shifted) window attention and MLP, each followed
    /// by LayerNorm inside its residual branch. `x` is `[G², C]`.
    pub fn block<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, stage: usize, block: usize) -> Result<Var> {
        let sp = &self.stages[stage];
        let ids = &sp.blocks[block];
        let (grid, dim, heads) = (sp.grid, sp.dim, sp.heads);
        if g.shape(x) != [grid * grid, dim] {
            bail!(Dimension, "stage {stage} block expects [{}, {dim}], got {:?}", grid * grid, g.shape(x));
        }
        let shifted = sp.shifted(block);
        let which = usize::from(shifted);
        let n_win = (grid / self.config.window).pow(2);
        let xw = g.gather_rows(x, &sp.to_windows[which])?;
        let q = self.lin(g, xw, ids.q)?;
        let k = self.lin(g, xw, ids.k)?;
        let v = self.lin(g, xw, ids.v)?;
        let q = self.split_heads(g, q, n_win, heads, dim)?;
        let k = self.split_heads(g, k, n_win, heads, dim)?;
        let v = self.split_heads(g, v, n_win, heads, dim)?;
        let log_tau = g.param(ids.log_tau);
        let bias = self.position_bias(g, stage, block)?;
        let mask = if shifted { sp.shift_mask.clone() } else { None };
        let a = cosine_window_attention_var(g, q, k, v, log_tau, bias, mask, self.config.tau_min)?;
        let a = g.permute(a, &[0, 2, 1, 3])?;
        let a = g.reshape(a, &[grid * grid, dim])?;
        let a = self.lin(g, a, ids.out)?;
        let a = g.gather_rows(a, &sp.from_windows[which])?;
        let a = self.norm(g, a, ids.attn_norm)?;
        let x = g.add(x, a)?;
        let f = self.lin(g, x, ids.mlp_in)?;
        let f = g.gelu(f)?;
        let f = self.lin(g, f, ids.mlp_out)?;
        let f = self.norm(g, f, ids.mlp_norm)?;
        g.add(x, f)
    }

    /// 2×2 neighbourhood concatenation then projection to twice the width.
    pub fn patch_merge<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, stage: usize) -> Result<Var> {
        let sp = &self.stages[stage];
        let Some(merge) = sp.merge else {
            bail!(Config, "stage {stage} is the last stage and has no merge");
        };
        let idx = merge_index(sp.grid, sp.grid)?;
        let gathered = g.gather_rows(x, &idx)?;
        let half = sp.grid / 2;
        let cat = g.reshape(gathered, &[half * half, 4 * sp.dim])?;
        self.lin(g, cat, merge)
    }

    /// Runs every stage, reporting the grid/channel shape at each boundary.
    pub fn features<T: Scalar>(&self, g: &mut Graph<'_, T>, pixels: &Tensor<f32>) -> Result<(Var, Vec<StageShape>)> {
        let x = self.patch_embed(g, pixels)?;
        let mut x = self.norm(g, x, self.patch_norm)?;
        let mut shapes = Vec::new();
        for (s, sp) in self.stages.iter().enumerate() {
            for b in 0..sp.blocks.len() {
                x = self.block(g, x, s, b)?;
            }
            shapes.push(StageShape { grid: sp.grid, channels: sp.dim });
            if sp.merge.is_some() {
                x = self.patch_merge(g, x, s)?;
            }
        }
        Ok((x, shapes))
    }

    /// `[1, n_attributes]` logits from globally pooled final tokens.
    pub fn logits<T: Scalar>(&self, g: &mut Graph<'_, T>, pixels: &Tensor<f32>) -> Result<Var> {
        let (x, _) = self.features(g, pixels)?;
        let x = self.norm(g, x, self.final_norm)?;
        let pooled = g.mean_rows(x)?;
        let dim = g.shape(pooled)[0];
        let pooled = g.reshape(pooled, &[1, dim])?;
        self.lin(g, pooled, self.head)
    }
}

/// Standalone position-bias evaluation: coordinates through
/// `2 → hidden (ReLU) → n_heads`, expanded to `[n_heads, N, N]`.
pub fn log_cpb_bias(window: usize, hidden_w: &Tensor<f32>, hidden_b: &Tensor<f32>, out_w: &Tensor<f32>, n_heads: usize) -> Result<Tensor<f32>> {
    if out_w.shape().last() != Some(&n_heads) {
        bail!(Dimension, "output weight {:?} does not produce {n_heads} heads", out_w.shape());
    }
    let mut g = Graph::<f32>::new();
    let coords = g.input(log_cpb_coords(window)?, false);
    let (w1, b1, w2) = (g.input(hidden_w.clone(), false), g.input(hidden_b.clone(), false), g.input(out_w.clone(), false));
    let h = g.linear(coords, w1, b1)?;
    let h = g.relu(h)?;
    let table = g.matmul(h, w2)?;
    let per_pair = g.gather_rows(table, &relative_position_index(window))?;
    let per_head = g.permute(per_pair, &[1, 0])?;
    let n = window * window;
    let out = g.reshape(per_head, &[n_heads, n, n])?;
    Ok(g.value(out).clone())
}

/// Image model weights plus architecture.
#[derive(Debug, Clone)]
pub struct VisionClassifier {
    pub net: VisionNet,
    pub params: ParamStore<f32>,
}

impl VisionClassifier {
    pub fn new(config: VisionModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = materialize(&VisionNet::param_specs(&config), &mut rng)?;
        Self::from_params(config, params)
    }

    pub fn from_params(config: VisionModelConfig, params: ParamStore<f32>) -> Result<Self> {
        let net = VisionNet::resolve(config, &params)?;
        Ok(VisionClassifier { net, params })
    }

    pub fn config(&self) -> &VisionModelConfig {
        &self.net.config
    }

    pub fn logits(&self, pixels: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::with_params(&self.params);
        let out = self.net.logits(&mut g, pixels)?;
        Ok(g.value(out).clone())
    }

    /// Sigmoid probability for every configured head.
    pub fn probabilities(&self, pixels: &Tensor<f32>) -> Result<Vec<f32>> {
        Ok(self.logits(pixels)?.data().iter().map(|&z| ops::sigmoid_scalar(z)).collect())
    }

    pub fn classify_image(&self, pixels: &Tensor<f32>) -> Result<VisionPrediction> {
        let probs = self.probabilities(pixels)?;
        let protest = probs[self.config().protest_head().expect("validated config")];
        let attributes = self.config().attribute_heads.iter().cloned().zip(probs).collect();
        Ok(VisionPrediction { protest, attributes })
    }

    /// Masked sigmoid cross-entropy of one example with per-label weights.
    pub fn loss_and_grads(&self, example: &ImageExample, weights: &[f32]) -> Result<(f32, ParamGrads<f32>)> {
        let n = self.config().attribute_heads.len();
        if example.labels.len() != n || weights.len() != n {
            bail!(Dimension, "{} labels / {} weights for {n} heads", example.labels.len(), weights.len());
        }
        let mut g = Graph::with_params(&self.params);
        let logits = self.net.logits(&mut g, &example.pixels)?;
        let loss = g.bce_with_logits(logits, &example.labels, Some(weights))?;
        let value = g.value(loss).item()?;
        g.backward(loss)?;
        Ok((value, g.param_grads()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> VisionModelConfig {
        VisionModelConfig {
            image_size: 16,
            patch_size: 4,
            window: 2,
            embed_dim: 8,
            depths: vec![2, 2],
            heads: vec![2, 2],
            cpb_hidden: 8,
            ..VisionModelConfig::default()
        }
    }

    #[test]
    fn patchify_counts_tokens() {
        let img = Tensor::full(&[64, 64, 3], 0.5f32);
        assert_eq!(patchify::<f32>(&img, 4).unwrap().shape(), &[256, 48]);
        let big = Tensor::full(&[256, 256, 3], 0.5f32);
        assert_eq!(patchify::<f32>(&big, 4).unwrap().shape(), &[4096, 48]);
    }

    #[test]
    fn zeroed_heads_give_half_everywhere() {
        let mut m = VisionClassifier::new(tiny(), 3).unwrap();
        for name in ["heads.weight", "heads.bias"] {
            let id = m.params.id(name).unwrap();
            let shape = m.params.get(id).shape().to_vec();
            m.params.set(id, Tensor::zeros(&shape)).unwrap();
        }
        let img = Tensor::from_fn(&[16, 16, 3], |i| (i % 7) as f32 / 7.0);
        let p = m.classify_image(&img).unwrap();
        assert_eq!(p.protest, 0.5);
        assert!(p.attributes.values().all(|&v| v == 0.5));
        let keys: Vec<&str> = p.attributes.keys().map(String::as_str).collect();
        assert_eq!(keys, ["protest", "violence", "sign", "police"]);
    }

    #[test]
    fn wrong_size_or_range_rejected() {
        let m = VisionClassifier::new(tiny(), 3).unwrap();
        assert!(m.logits(&Tensor::full(&[8, 8, 3], 0.5)).is_err());
        assert!(m.logits(&Tensor::full(&[16, 16, 3], 1.5)).is_err());
    }
}
