//! Scaled cosine window attention with a continuous position bias.
//!
//! `logit[i][j] = cos(q_i, k_j) / tau + bias[i][j]`, softmax over the keys a
//! query may see. `tau = max(exp(log_tau), tau_min)` per head.

use std::sync::Arc;

use crate::error::{bail, Result};
use crate::tensor::{CustomOp, Graph, Scalar, Tensor, Var};

/// Floor applied to q/k row norms before normalizing.
pub const NORM_FLOOR: f64 = 1e-12;

/// Effective temperature for a stored log-temperature.
pub fn temperature(log_tau: f64, tau_min: f64) -> f64 {
    log_tau.exp().max(tau_min)
}

/// Geometry of one call: `[n_win, heads, n_tok, d_head]`.
#[derive(Debug, Clone, Copy)]
struct Dims {
    n_win: usize,
    heads: usize,
    n_tok: usize,
    dh: usize,
}

fn dims<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, log_tau: &Tensor<T>, bias: &Tensor<T>, mask: Option<&[bool]>) -> Result<Dims> {
    let [n_win, heads, n_tok, dh] = *q.shape() else {
        bail!(Dimension, "q must be [nWin, heads, N, d_head], got {:?}", q.shape());
    };
    if k.shape() != q.shape() || v.shape() != q.shape() {
        bail!(Dimension, "q/k/v shapes differ: {:?} / {:?} / {:?}", q.shape(), k.shape(), v.shape());
    }
    if log_tau.shape() != [heads] {
        bail!(Dimension, "log_tau must be [{heads}], got {:?}", log_tau.shape());
    }
    if bias.shape() != [heads, n_tok, n_tok] {
        bail!(Dimension, "bias must be [{heads}, {n_tok}, {n_tok}], got {:?}", bias.shape());
    }
    if let Some(m) = mask {
        if m.len() != n_win * n_tok * n_tok {
            bail!(Dimension, "mask has {} entries, expected {}", m.len(), n_win * n_tok * n_tok);
        }
    }
    Ok(Dims { n_win, heads, n_tok, dh })
}

fn normalize_rows<T: Scalar>(x: &[T], dh: usize) -> (Vec<T>, Vec<T>) {
    let floor = T::c(NORM_FLOOR);
    let mut unit = Vec::with_capacity(x.len());
    let mut norms = Vec::with_capacity(x.len() / dh);
    for row in x.chunks(dh) {
        let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(floor);
        norms.push(n);
        unit.extend(row.iter().map(|&v| v / n));
    }
    (unit, norms)
}

/// Everything the forward pass computes.
#[derive(Debug, Clone)]
pub struct CosineAttentionOutput<T> {
    /// `[nWin, heads, N, d_head]`.
    pub out: Tensor<T>,
    /// Post-softmax weights `[nWin, heads, N, N]`; masked entries are 0.
    pub weights: Vec<T>,
    /// Scaled cosines `cos/tau` before the bias, `[nWin, heads, N, N]`.
    pub scaled_cosines: Vec<T>,
    /// `1/tau` per head.
    pub inv_tau: Vec<T>,
}

struct Saved<T> {
    qn: Vec<T>,
    kn: Vec<T>,
    q_norm: Vec<T>,
    k_norm: Vec<T>,
    cos: Vec<T>,
}

fn forward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    log_tau: &Tensor<T>,
    bias: &Tensor<T>,
    mask: Option<&[bool]>,
    tau_min: f64,
) -> Result<(CosineAttentionOutput<T>, Saved<T>)> {
    let d = dims(q, k, v, log_tau, bias, mask)?;
    let Dims { n_win, heads, n_tok: n, dh } = d;
    let (qn, q_norm) = normalize_rows(q.data(), dh);
    let (kn, k_norm) = normalize_rows(k.data(), dh);
    let inv_tau: Vec<T> = log_tau
        .data()
        .iter()
        .map(|&lt| T::c(1.0 / temperature(lt.f64(), tau_min)))
        .collect();
    let mut cos = vec![T::zero(); n_win * heads * n * n];
    let mut weights = vec![T::zero(); cos.len()];
    let mut out = vec![T::zero(); q.numel()];
    let vd = v.data();
    for w in 0..n_win {
        for h in 0..heads {
            let blk = (w * heads + h) * n;
            for i in 0..n {
                let qi = &qn[(blk + i) * dh..(blk + i + 1) * dh];
                let row = (blk + i) * n;
                let mut max = T::neg_infinity();
                for j in 0..n {
                    let kj = &kn[(blk + j) * dh..(blk + j + 1) * dh];
                    let c = qi.iter().zip(kj).fold(T::zero(), |a, (&x, &y)| a + x * y);
                    cos[row + j] = c;
                    if mask.map_or(true, |m| m[(w * n + i) * n + j]) {
                        let logit = c * inv_tau[h] + bias.data()[(h * n + i) * n + j];
                        weights[row + j] = logit;
                        max = max.max(logit);
                    }
                }
                let mut sum = T::zero();
                for j in 0..n {
                    if mask.map_or(true, |m| m[(w * n + i) * n + j]) {
                        let e = (weights[row + j] - max).exp();
                        weights[row + j] = e;
                        sum = sum + e;
                    } else {
                        weights[row + j] = T::zero();
                    }
                }
                let oi = &mut out[(blk + i) * dh..(blk + i + 1) * dh];
                for j in 0..n {
                    let p = weights[row + j] / sum;
                    weights[row + j] = p;
                    if p != T::zero() {
                        let vj = &vd[(blk + j) * dh..(blk + j + 1) * dh];
                        oi.iter_mut().zip(vj).for_each(|(o, &x)| *o = *o + p * x);
                    }
                }
            }
        }
    }
    let scaled_cosines = cos
        .chunks(n * n)
        .enumerate()
        .flat_map(|(b, blk)| {
            let s = inv_tau[b % heads];
            blk.iter().map(move |&c| c * s)
        })
        .collect();
    let output = CosineAttentionOutput {
        out: Tensor::from_parts(q.shape().to_vec(), out),
        weights,
        scaled_cosines,
        inv_tau,
    };
    Ok((output, Saved { qn, kn, q_norm, k_norm, cos }))
}

/// Cosine attention over `[nWin, heads, N, d_head]` windows.
///
/// `bias` is `[heads, N, N]`; `mask`, when given, is `[nWin, N, N]` with
/// `true` where attention is allowed.
pub fn cosine_window_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    log_tau: &Tensor<T>,
    bias: &Tensor<T>,
    mask: Option<&[bool]>,
    tau_min: f64,
) -> Result<CosineAttentionOutput<T>> {
    Ok(forward(q, k, v, log_tau, bias, mask, tau_min)?.0)
}

/// Graph-recording form; inputs are `q, k, v, log_tau, bias`.
#[allow(clippy::too_many_arguments)]
pub fn cosine_window_attention_var<T: Scalar>(
    g: &mut Graph<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    log_tau: Var,
    bias: Var,
    mask: Option<Arc<Vec<bool>>>,
    tau_min: f64,
) -> Result<Var> {
    let (fwd, saved) = forward(
        g.value(q),
        g.value(k),
        g.value(v),
        g.value(log_tau),
        g.value(bias),
        mask.as_deref().map(Vec::as_slice),
        tau_min,
    )?;
    let shape = g.shape(q).to_vec();
    let op = CosineAttentionOp {
        dims: Dims {
            n_win: shape[0],
            heads: shape[1],
            n_tok: shape[2],
            dh: shape[3],
        },
        weights: fwd.weights,
        inv_tau: fwd.inv_tau,
        saved,
        tau_min,
    };
    g.custom(&[q, k, v, log_tau, bias], fwd.out, Box::new(op))
}

struct CosineAttentionOp<T> {
    dims: Dims,
    weights: Vec<T>,
    inv_tau: Vec<T>,
    saved: Saved<T>,
    tau_min: f64,
}

impl<T: Scalar> CustomOp<T> for CosineAttentionOp<T> {
    fn name(&self) -> &'static str {
        "cosine_window_attention"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let Dims { n_win, heads, n_tok: n, dh } = self.dims;
        let (v, log_tau) = (inputs[2], inputs[3]);
        let (vd, gd) = (v.data(), grad.data());
        let Saved { qn, kn, q_norm, k_norm, cos } = &self.saved;
        let mut gqn = vec![T::zero(); qn.len()];
        let mut gkn = vec![T::zero(); kn.len()];
        let mut gv = vec![T::zero(); vd.len()];
        let mut g_inv_tau = vec![T::zero(); heads];
        let mut gbias = vec![T::zero(); heads * n * n];
        let mut dp = vec![T::zero(); n];
        for w in 0..n_win {
            for h in 0..heads {
                let blk = (w * heads + h) * n;
                for i in 0..n {
                    let row = (blk + i) * n;
                    let p = &self.weights[row..row + n];
                    let go = &gd[(blk + i) * dh..(blk + i + 1) * dh];
                    for j in 0..n {
                        if p[j] == T::zero() {
                            dp[j] = T::zero();
                            continue;
                        }
                        let vj = &vd[(blk + j) * dh..(blk + j + 1) * dh];
                        dp[j] = go.iter().zip(vj).fold(T::zero(), |a, (&x, &y)| a + x * y);
                        let gvj = &mut gv[(blk + j) * dh..(blk + j + 1) * dh];
                        gvj.iter_mut().zip(go).for_each(|(a, &x)| *a = *a + p[j] * x);
                    }
                    let s: T = p.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        if p[j] == T::zero() {
                            continue;
                        }
                        let dl = p[j] * (dp[j] - s);
                        gbias[(h * n + i) * n + j] = gbias[(h * n + i) * n + j] + dl;
                        g_inv_tau[h] = g_inv_tau[h] + dl * cos[row + j];
                        let dc = dl * self.inv_tau[h];
                        let (qa, ka) = ((blk + i) * dh, (blk + j) * dh);
                        for t in 0..dh {
                            gqn[qa + t] = gqn[qa + t] + dc * kn[ka + t];
                            gkn[ka + t] = gkn[ka + t] + dc * qn[qa + t];
                        }
                    }
                }
            }
        }
        let unnormalize = |unit: &[T], gunit: &[T], norms: &[T]| -> Vec<T> {
            let floor = T::c(NORM_FLOOR);
            let mut out = vec![T::zero(); unit.len()];
            for (r, &nrm) in norms.iter().enumerate() {
                let (u, gu) = (&unit[r * dh..(r + 1) * dh], &gunit[r * dh..(r + 1) * dh]);
                if nrm <= floor {
                    // below the floor the map is x / floor
                    for t in 0..dh {
                        out[r * dh + t] = gu[t] / floor;
                    }
                    continue;
                }
                let dot: T = u.iter().zip(gu).map(|(&a, &b)| a * b).sum();
                for t in 0..dh {
                    out[r * dh + t] = (gu[t] - u[t] * dot) / nrm;
                }
            }
            out
        };
        let gq = unnormalize(qn, &gqn, q_norm);
        let gk = unnormalize(kn, &gkn, k_norm);
        // inv_tau = exp(-log_tau) unless the floor is active
        let g_log_tau: Vec<T> = log_tau
            .data()
            .iter()
            .zip(&g_inv_tau)
            .zip(&self.inv_tau)
            .map(|((&lt, &gi), &it)| {
                if lt.f64().exp() > self.tau_min {
                    -gi * it
                } else {
                    T::zero()
                }
            })
            .collect();
        let shape = inputs[0].shape().to_vec();
        Ok(vec![
            Some(Tensor::from_parts(shape.clone(), gq)),
            Some(Tensor::from_parts(shape.clone(), gk)),
            Some(Tensor::from_parts(shape, gv)),
            Some(Tensor::from_parts(vec![heads], g_log_tau)),
            Some(Tensor::from_parts(vec![heads, n, n], gbias)),
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(n_win: usize, heads: usize, n: usize, dh: usize) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        let q = Tensor::from_fn(&[n_win, heads, n, dh], |i| (i as f64 * 0.731).sin());
        let k = Tensor::from_fn(&[n_win, heads, n, dh], |i| (i as f64 * 0.413).cos());
        let v = Tensor::from_fn(&[n_win, heads, n, dh], |i| (i as f64 * 0.177).sin() * 2.0);
        (q, k, v)
    }

    #[test]
    fn identical_rows_give_mean_of_v() {
        let (_, _, v) = setup(1, 1, 4, 3);
        let q = Tensor::<f64>::from_fn(&[1, 1, 4, 3], |i| [0.3, -1.0, 2.0][i % 3]);
        let bias = Tensor::zeros(&[1, 4, 4]);
        let tau = Tensor::new(&[1], vec![0.1f64.ln()]).unwrap();
        let r = cosine_window_attention(&q, &q, &v, &tau, &bias, None, 0.01).unwrap();
        for i in 0..4 {
            for t in 0..3 {
                let mean = (0..4).map(|j| v.data()[j * 3 + t]).sum::<f64>() / 4.0;
                assert!((r.out.data()[i * 3 + t] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tau_is_clamped_at_floor() {
        assert_eq!(temperature(-20.0, 0.01), 0.01);
        assert!((temperature(0.1f64.ln(), 0.01) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn zero_rows_do_not_produce_nan() {
        let (_, k, v) = setup(1, 1, 4, 3);
        let q = Tensor::zeros(&[1, 1, 4, 3]);
        let bias = Tensor::zeros(&[1, 4, 4]);
        let tau = Tensor::zeros(&[1]);
        let r = cosine_window_attention(&q, &k, &v, &tau, &bias, None, 0.01).unwrap();
        assert!(r.out.all_finite());
    }

    #[test]
    fn masked_entries_are_exactly_zero() {
        let (q, k, v) = setup(1, 2, 4, 3);
        let bias = Tensor::zeros(&[2, 4, 4]);
        let tau = Tensor::zeros(&[2]);
        let mask: Vec<bool> = (0..16).map(|e| (e / 4) % 2 == (e % 4) % 2).collect();
        let r = cosine_window_attention(&q, &k, &v, &tau, &bias, Some(&mask), 0.01).unwrap();
        for h in 0..2 {
            for e in 0..16 {
                if !mask[e] {
                    assert_eq!(r.weights[h * 16 + e], 0.0);
                }
            }
        }
    }
}
