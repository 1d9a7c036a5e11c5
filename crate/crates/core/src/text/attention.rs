//! Banded self-attention with global tokens.
//!
//! A local token at position `i` attends to every non-padding token `j` with
//! `|i − j| ≤ window/2` plus every global token. A global token attends to
//! every non-padding token. Padding tokens attend to nothing (zero output)
//! and are never attended to. Memory is `O(len · (window + globals))`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::tensor::{CustomOp, Graph, Scalar, Tensor, Var};

/// Attention role of one token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenFlag {
    Padding,
    Local,
    Global,
}

/// Key positions for every query, shared by all heads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BandPlan {
    /// `offsets[i]..offsets[i + 1]` indexes `keys` for query `i`.
    offsets: Vec<usize>,
    keys: Vec<usize>,
}

impl BandPlan {
    pub fn new(flags: &[TokenFlag], window: usize) -> Result<Self> {
        check_window(window)?;
        let half = window / 2;
        let len = flags.len();
        let globals: Vec<usize> = (0..len).filter(|&j| flags[j] == TokenFlag::Global).collect();
        let mut offsets = Vec::with_capacity(len + 1);
        let mut keys = Vec::new();
        offsets.push(0);
        let mut row = Vec::new();
        for (i, &flag) in flags.iter().enumerate() {
            row.clear();
            match flag {
                TokenFlag::Padding => {}
                TokenFlag::Global => row.extend(0..len),
                TokenFlag::Local => {
                    row.extend(i.saturating_sub(half)..(i + half + 1).min(len));
                    row.extend(&globals);
                    row.sort_unstable();
                    row.dedup();
                }
            }
            keys.extend(row.iter().copied().filter(|&j| flags[j] != TokenFlag::Padding));
            offsets.push(keys.len());
        }
        Ok(BandPlan { offsets, keys })
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Keys attended by query `i`, ascending.
    pub fn keys(&self, i: usize) -> &[usize] {
        &self.keys[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Number of stored (query, key) pairs.
    pub fn nnz(&self) -> usize {
        self.keys.len()
    }
}

pub(crate) fn check_window(window: usize) -> Result<()> {
    if window < 2 || window % 2 != 0 {
        bail!(Parameter, "attention window must be an even integer ≥ 2, got {window}");
    }
    Ok(())
}

fn check_qkv<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, flags: &[TokenFlag]) -> Result<(usize, usize, usize)> {
    if q.rank() != 3 || q.shape() != k.shape() || q.shape() != v.shape() {
        bail!(
            Dimension,
            "q/k/v must share a [heads, len, d_head] shape, got {:?} / {:?} / {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        );
    }
    let (heads, len, dh) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    if flags.len() != len {
        bail!(Dimension, "{} attention flags for sequence length {len}", flags.len());
    }
    if !(q.all_finite() && k.all_finite() && v.all_finite()) {
        bail!(Numeric, "non-finite value in attention inputs");
    }
    Ok((heads, len, dh))
}

struct Forward<T> {
    out: Tensor<T>,
    /// `heads × nnz` probabilities laid out like the plan.
    probs: Vec<T>,
}

fn forward<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, plan: &BandPlan, scale: T) -> Forward<T> {
    let (heads, len, dh) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let nnz = plan.nnz();
    let mut out = vec![T::zero(); heads * len * dh];
    let mut probs = vec![T::zero(); heads * nnz];
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    for h in 0..heads {
        let base = h * len * dh;
        for i in 0..len {
            let keys = plan.keys(i);
            if keys.is_empty() {
                continue;
            }
            let qi = &qd[base + i * dh..base + (i + 1) * dh];
            let p = &mut probs[h * nnz + plan.offsets[i]..h * nnz + plan.offsets[i + 1]];
            for (pj, &j) in p.iter_mut().zip(keys) {
                let kj = &kd[base + j * dh..base + (j + 1) * dh];
                *pj = qi.iter().zip(kj).fold(T::zero(), |acc, (&a, &b)| acc + a * b) * scale;
            }
            crate::tensor::ops::softmax_in_place(p);
            let oi = &mut out[base + i * dh..base + (i + 1) * dh];
            for (&pj, &j) in p.iter().zip(keys) {
                let vj = &vd[base + j * dh..base + (j + 1) * dh];
                oi.iter_mut().zip(vj).for_each(|(o, &x)| *o = *o + pj * x);
            }
        }
    }
    Forward {
        out: Tensor::from_parts(q.shape().to_vec(), out),
        probs,
    }
}

/// Banded attention of `[heads, len, d_head]` inputs, scaled by `1/√d_head`.
pub fn sliding_window_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    window: usize,
    flags: &[TokenFlag],
) -> Result<Tensor<T>> {
    let (_, _, dh) = check_qkv(q, k, v, flags)?;
    let plan = BandPlan::new(flags, window)?;
    Ok(forward(q, k, v, &plan, T::c(1.0 / (dh as f64).sqrt())).out)
}

/// Graph-recording form of [`sliding_window_attention`].
pub fn sliding_window_attention_var<T: Scalar>(
    g: &mut Graph<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    plan: &Arc<BandPlan>,
) -> Result<Var> {
    let (qt, kt, vt) = (g.value(q), g.value(k), g.value(v));
    let flags_len = plan.len();
    if qt.rank() != 3 || qt.shape()[1] != flags_len {
        bail!(Dimension, "attention plan covers {flags_len} tokens, q has shape {:?}", qt.shape());
    }
    if qt.shape() != kt.shape() || qt.shape() != vt.shape() {
        bail!(Dimension, "q/k/v shapes differ: {:?} / {:?} / {:?}", qt.shape(), kt.shape(), vt.shape());
    }
    let scale = T::c(1.0 / (qt.shape()[2] as f64).sqrt());
    let fwd = forward(qt, kt, vt, plan, scale);
    let op = SlidingWindowOp {
        plan: Arc::clone(plan),
        probs: fwd.probs,
        scale,
    };
    g.custom(&[q, k, v], fwd.out, Box::new(op))
}

struct SlidingWindowOp<T> {
    plan: Arc<BandPlan>,
    probs: Vec<T>,
    scale: T,
}

impl<T: Scalar> CustomOp<T> for SlidingWindowOp<T> {
    fn name(&self) -> &'static str {
        "sliding_window_attention"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
        let (heads, len, dh) = (q.shape()[0], q.shape()[1], q.shape()[2]);
        let (qd, kd, vd, gd) = (q.data(), k.data(), v.data(), grad.data());
        let plan = &*self.plan;
        let nnz = plan.nnz();
        let mut gq = vec![T::zero(); qd.len()];
        let mut gk = vec![T::zero(); kd.len()];
        let mut gv = vec![T::zero(); vd.len()];
        let mut dp = Vec::new();
        for h in 0..heads {
            let base = h * len * dh;
            for i in 0..len {
                let keys = plan.keys(i);
                if keys.is_empty() {
                    continue;
                }
                let p = &self.probs[h * nnz + plan.offsets[i]..h * nnz + plan.offsets[i + 1]];
                let go = &gd[base + i * dh..base + (i + 1) * dh];
                dp.clear();
                for (&pj, &j) in p.iter().zip(keys) {
                    let vj = &vd[base + j * dh..base + (j + 1) * dh];
                    dp.push(go.iter().zip(vj).fold(T::zero(), |a, (&x, &y)| a + x * y));
                    let gvj = &mut gv[base + j * dh..base + (j + 1) * dh];
                    gvj.iter_mut().zip(go).for_each(|(a, &x)| *a = *a + pj * x);
                }
                let s: T = p.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
                let qi = &qd[base + i * dh..base + (i + 1) * dh];
                for ((&pj, &dpj), &j) in p.iter().zip(&dp).zip(keys) {
                    let ds = pj * (dpj - s) * self.scale;
                    let kj = &kd[base + j * dh..base + (j + 1) * dh];
                    let gqi = &mut gq[base + i * dh..base + (i + 1) * dh];
                    gqi.iter_mut().zip(kj).for_each(|(a, &x)| *a = *a + ds * x);
                    let gkj = &mut gk[base + j * dh..base + (j + 1) * dh];
                    gkj.iter_mut().zip(qi).for_each(|(a, &x)| *a = *a + ds * x);
                }
            }
        }
        let shape = q.shape().to_vec();
        Ok(vec![
            Some(Tensor::from_parts(shape.clone(), gq)),
            Some(Tensor::from_parts(shape.clone(), gk)),
            Some(Tensor::from_parts(shape, gv)),
        ])
    }
}
