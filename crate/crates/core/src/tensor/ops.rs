//! Graph-free kernels. The autodiff graph calls these for its forward pass;
//! they are also usable directly on plain tensors.

use super::{Scalar, Tensor};
use crate::error::{bail, Result};

const BLOCK_ROWS: usize = 32;
const BLOCK_INNER: usize = 64;

/// Textbook triple loop, `c[i][j] = Σ_p a[i][p]·b[p][j]`.
pub fn matmul_naive<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = T::zero();
            for p in 0..k {
                acc = acc + a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = acc;
        }
    }
    c
}

/// Cache-blocked i-k-j product. Accumulates over `p` in ascending order, the
/// same order as [`matmul_naive`].
pub fn matmul_blocked<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    matmul_acc(a, b, &mut c, m, k, n);
    c
}

/// `c += a·b` with the blocked loop order.
pub(crate) fn matmul_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i0 in (0..m).step_by(BLOCK_ROWS) {
        let i1 = (i0 + BLOCK_ROWS).min(m);
        for p0 in (0..k).step_by(BLOCK_INNER) {
            let p1 = (p0 + BLOCK_INNER).min(k);
            for i in i0..i1 {
                let crow = &mut c[i * n..(i + 1) * n];
                let arow = &a[i * k..(i + 1) * k];
                for p in p0..p1 {
                    let aip = arow[p];
                    if aip == T::zero() {
                        continue;
                    }
                    let brow = &b[p * n..(p + 1) * n];
                    for (cj, &bj) in crow.iter_mut().zip(brow) {
                        *cj = *cj + aip * bj;
                    }
                }
            }
        }
    }
}

/// `c += aᵀ·b` where `a` is `[m, k]` and `b` is `[m, n]`; `c` is `[k, n]`.
pub(crate) fn matmul_tn_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj = *cj + aip * bj;
            }
        }
    }
}

/// `c += a·bᵀ` where `a` is `[m, n]` and `b` is `[k, n]`; `c` is `[m, k]`.
pub(crate) fn matmul_nt_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let dot = arow
                .iter()
                .zip(brow)
                .fold(T::zero(), |acc, (&x, &y)| acc + x * y);
            c[i * k + p] = c[i * k + p] + dot;
        }
    }
}

/// Resolved geometry of a (possibly batched) matrix product.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct MatmulDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// `b` is a single `[k, n]` matrix shared by every batch entry.
    pub shared_rhs: bool,
    pub out_shape: Vec<usize>,
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatmulDims> {
    if a.len() < 2 || b.len() < 2 {
        bail!(Dimension, "matmul needs rank ≥ 2, got {a:?} × {b:?}");
    }
    let (ka, kb) = (a[a.len() - 1], b[b.len() - 2]);
    if ka != kb {
        bail!(Dimension, "matmul inner dimensions differ: {a:?} × {b:?}");
    }
    let m = a[a.len() - 2];
    let n = b[b.len() - 1];
    let lead_a = &a[..a.len() - 2];
    let mut out_shape = lead_a.to_vec();
    out_shape.extend([m, n]);
    if b.len() == 2 {
        return Ok(MatmulDims {
            batch: lead_a.iter().product(),
            m,
            k: ka,
            n,
            shared_rhs: true,
            out_shape,
        });
    }
    if lead_a != &b[..b.len() - 2] {
        bail!(Dimension, "matmul batch dimensions differ: {a:?} × {b:?}");
    }
    Ok(MatmulDims {
        batch: lead_a.iter().product(),
        m,
        k: ka,
        n,
        shared_rhs: false,
        out_shape,
    })
}

/// Matrix product. Supports `[.., m, k] × [k, n]` (shared right operand) and
/// `[B.., m, k] × [B.., k, n]` with identical leading dimensions.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let d = matmul_dims(a.shape(), b.shape())?;
    let data = if d.shared_rhs {
        matmul_blocked(a.data(), b.data(), d.batch * d.m, d.k, d.n)
    } else {
        let mut out = vec![T::zero(); d.batch * d.m * d.n];
        for bi in 0..d.batch {
            matmul_acc(
                &a.data()[bi * d.m * d.k..(bi + 1) * d.m * d.k],
                &b.data()[bi * d.k * d.n..(bi + 1) * d.k * d.n],
                &mut out[bi * d.m * d.n..(bi + 1) * d.m * d.n],
                d.m,
                d.k,
                d.n,
            );
        }
        out
    };
    Ok(Tensor::from_parts(d.out_shape, data))
}

/// Splits a shape around `axis` into `(outer, len, inner)`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        bail!(Dimension, "axis {axis} out of range for shape {shape:?}");
    }
    let len = shape[axis];
    if len == 0 {
        bail!(Dimension, "softmax over empty axis {axis} of {shape:?}");
    }
    Ok((
        shape[..axis].iter().product(),
        len,
        shape[axis + 1..].iter().product(),
    ))
}

/// Max-subtracted softmax of one contiguous row, in place.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let mut out = x.data().to_vec();
    let mut buf = vec![T::zero(); len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            for a in 0..len {
                buf[a] = out[base + a * inner];
            }
            softmax_in_place(&mut buf);
            for a in 0..len {
                out[base + a * inner] = buf[a];
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Per-row statistics produced by [`layer_norm_stats`].
pub(crate) struct NormStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn check_layer_norm<T: Scalar>(
    x: &[usize],
    gamma: &[usize],
    beta: &[usize],
    eps: f64,
) -> Result<usize> {
    if !(eps >= 0.0 && eps.is_finite()) {
        bail!(Parameter, "layer_norm eps must be a finite value ≥ 0, got {eps}");
    }
    let Some(&n) = x.last() else {
        bail!(Dimension, "layer_norm on a scalar");
    };
    if gamma != [n] || beta != [n] {
        bail!(
            Dimension,
            "layer_norm gamma {gamma:?} / beta {beta:?} must be [{n}] for input {x:?}"
        );
    }
    Ok(n)
}

/// Mean and reciprocal standard deviation per row, population variance.
pub(crate) fn layer_norm_stats<T: Scalar>(x: &[T], n: usize, eps: T) -> NormStats<T> {
    let rows = x.len() / n;
    let nt = T::c(n as f64);
    let mut mean = Vec::with_capacity(rows);
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * n..(r + 1) * n];
        let mu = row.iter().copied().sum::<T>() / nt;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / nt;
        let denom = (var + eps).sqrt();
        mean.push(mu);
        // zero variance with eps = 0 collapses the row onto beta
        rstd.push(if denom > T::zero() { denom.recip() } else { T::zero() });
    }
    NormStats { mean, rstd }
}

/// LayerNorm over the last axis: `(x − μ)/√(σ² + eps)·γ + β`.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let n = check_layer_norm::<T>(x.shape(), gamma.shape(), beta.shape(), eps)?;
    let stats = layer_norm_stats(x.data(), n, T::c(eps));
    Ok(Tensor::from_parts(
        x.shape().to_vec(),
        layer_norm_apply(x.data(), &stats, gamma.data(), beta.data()),
    ))
}

pub(crate) fn layer_norm_apply<T: Scalar>(
    x: &[T],
    stats: &NormStats<T>,
    gamma: &[T],
    beta: &[T],
) -> Vec<T> {
    let n = gamma.len();
    x.chunks(n)
        .enumerate()
        .flat_map(|(r, row)| {
            let (mu, rs) = (stats.mean[r], stats.rstd[r]);
            row.iter()
                .zip(gamma.iter().zip(beta))
                .map(move |(&v, (&g, &b))| (v - mu) * rs * g + b)
        })
        .collect()
}

/// Exact GELU, `x·Φ(x)`.
#[inline]
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = T::c(0.5);
    x * half * (T::one() + (x * T::c(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// d/dx of exact GELU: `Φ(x) + x·φ(x)`.
#[inline]
pub fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let cdf = T::c(0.5) * (T::one() + (x * T::c(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::c(0.5)).exp() * T::c(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::from_parts(
        x.shape().to_vec(),
        x.data().iter().map(|&v| gelu_scalar(v)).collect(),
    )
}

#[inline]
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        (T::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable `log Σ exp(row)`.
pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

pub(crate) fn check_targets(shape: &[usize], targets: &[usize]) -> Result<(usize, usize)> {
    if shape.len() != 2 {
        bail!(Dimension, "logits must be [batch, classes], got {shape:?}");
    }
    let (batch, classes) = (shape[0], shape[1]);
    if targets.len() != batch {
        bail!(
            Dimension,
            "{} targets for a batch of {batch}",
            targets.len()
        );
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
        bail!(Index, "target class {t} out of range [0, {classes})");
    }
    Ok((batch, classes))
}

/// Mean negative log-softmax of the target class.
pub fn cross_entropy_logits<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<T> {
    let (batch, classes) = check_targets(logits.shape(), targets)?;
    let total: T = (0..batch)
        .map(|b| {
            let row = &logits.data()[b * classes..(b + 1) * classes];
            log_sum_exp(row) - row[targets[b]]
        })
        .sum();
    Ok(total / T::c(batch as f64))
}

/// `max(z,0) − z·y + ln(1 + e^{−|z|})`, the stable sigmoid cross-entropy.
#[inline]
pub fn bce_with_logits_scalar<T: Scalar>(z: T, y: T) -> T {
    z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p()
}

/// Mean sigmoid cross-entropy over the present (non-`None`) targets; zero
/// when every target is absent.
pub fn binary_cross_entropy_logits<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[Option<T>],
) -> Result<T> {
    if targets.len() != logits.numel() {
        bail!(
            Dimension,
            "{} targets for logits of shape {:?}",
            targets.len(),
            logits.shape()
        );
    }
    let (mut sum, mut count) = (T::zero(), 0usize);
    for (&z, y) in logits.data().iter().zip(targets) {
        if let Some(y) = *y {
            sum = sum + bce_with_logits_scalar(z, y);
            count += 1;
        }
    }
    Ok(if count == 0 {
        T::zero()
    } else {
        sum / T::c(count as f64)
    })
}

/// Output shape and source offsets for an axis permutation.
pub(crate) fn permute_index(shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let rank = shape.len();
    let mut seen = vec![false; rank];
    if axes.len() != rank {
        bail!(Dimension, "permutation {axes:?} does not match rank of {shape:?}");
    }
    for &a in axes {
        if a >= rank || std::mem::replace(&mut seen[a], true) {
            bail!(Dimension, "invalid permutation {axes:?}");
        }
    }
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let numel: usize = shape.iter().product();
    let mut src = Vec::with_capacity(numel);
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..numel {
        src.push(offset);
        for d in (0..rank).rev() {
            counter[d] += 1;
            offset += strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            counter[d] = 0;
        }
    }
    Ok((out_shape, src))
}

pub fn permute<T: Scalar>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let (shape, src) = permute_index(x.shape(), axes)?;
    Ok(Tensor::from_parts(
        shape,
        src.iter().map(|&s| x.data()[s]).collect(),
    ))
}

/// Gathers rows of `x` viewed as `[shape[0], rest]`.
pub fn gather_rows<T: Scalar>(x: &Tensor<T>, rows: &[usize]) -> Result<Tensor<T>> {
    let Some(&n_rows) = x.shape().first() else {
        bail!(Dimension, "gather_rows on a scalar");
    };
    if rows.is_empty() {
        bail!(Dimension, "gather_rows with no indices");
    }
    if let Some(&r) = rows.iter().find(|&&r| r >= n_rows) {
        bail!(Index, "row {r} out of range for {} rows", n_rows);
    }
    let cols = x.numel() / n_rows;
    let mut data = Vec::with_capacity(rows.len() * cols);
    for &r in rows {
        data.extend_from_slice(&x.data()[r * cols..(r + 1) * cols]);
    }
    let mut shape = x.shape().to_vec();
    shape[0] = rows.len();
    Ok(Tensor::from_parts(shape, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(matmul(&Tensor::eye(2), &a).unwrap(), a);
        let b = t(&[2, 2], &[5., 6., 7., 8.]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[19., 22., 43., 50.]);
        let ones_row = Tensor::<f64>::full(&[1, 4], 1.0);
        let ones_col = Tensor::<f64>::full(&[4, 1], 1.0);
        assert_eq!(matmul(&ones_row, &ones_col).unwrap().data(), &[4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] × [2, 3]"), "{msg}");
    }

    #[test]
    fn batched_matmul_matches_per_batch() {
        let a = Tensor::<f64>::from_fn(&[3, 2, 4], |i| (i as f64 * 0.37).sin());
        let b = Tensor::<f64>::from_fn(&[3, 4, 5], |i| (i as f64 * 0.11).cos());
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[3, 2, 5]);
        for bi in 0..3 {
            let want = matmul_naive(&a.data()[bi * 8..][..8], &b.data()[bi * 20..][..20], 2, 4, 5);
            assert_eq!(&c.data()[bi * 10..][..10], want.as_slice());
        }
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&t(&[2], &[0., 0.]), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&t(&[3], &[1., 2., 3.]), 0).unwrap();
        for (got, want) in s.data().iter().zip([0.09003057, 0.24472847, 0.66524096]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-8);
        }
        let s = softmax(&Tensor::<f32>::new(&[2], vec![1000.0, 1000.0]).unwrap(), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_over_leading_axis() {
        let x = t(&[2, 3], &[1., 5., 0., 1., 5., 0.]);
        let s = softmax(&x, 0).unwrap();
        assert!(s.data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
        assert!(softmax(&x, 2).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let ones = t(&[3], &[1., 1., 1.]);
        let zeros = t(&[3], &[0., 0., 0.]);
        let y = layer_norm(&t(&[1, 3], &[5., 5., 5.]), &ones, &zeros, 1e-5).unwrap();
        assert_eq!(y.data(), &[0., 0., 0.]);
        let y = layer_norm(&t(&[1, 3], &[1., 2., 3.]), &ones, &zeros, 0.0).unwrap();
        for (got, want) in y.data().iter().zip([-1.22474487, 0.0, 1.22474487]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-7);
        }
        let sevens = t(&[3], &[7., 7., 7.]);
        let y = layer_norm(&t(&[2, 3], &[0.3, -2., 9., 1., 1., 4.]), &zeros, &sevens, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 7.0));
        assert!(matches!(
            layer_norm(&t(&[1, 3], &[1., 2., 3.]), &ones, &zeros, -1e-5),
            Err(crate::Error::Parameter(_))
        ));
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        assert_abs_diff_eq!(gelu_scalar(1.0f64), 0.8413447460685429, epsilon = 1e-12);
        assert!(gelu_scalar(-10.0f64).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_examples() {
        let l = cross_entropy_logits(&t(&[1, 2], &[0., 0.]), &[0]).unwrap();
        assert_abs_diff_eq!(l, std::f64::consts::LN_2, epsilon = 1e-12);
        let l = cross_entropy_logits(&t(&[1, 2], &[10., -10.]), &[0]).unwrap();
        assert!(l < 1e-4);
        let l = cross_entropy_logits(&t(&[1, 3], &[1., 2., 3.]), &[2]).unwrap();
        assert_abs_diff_eq!(l, 0.40760596444437, epsilon = 1e-9);
        assert!(matches!(
            cross_entropy_logits(&t(&[1, 2], &[0., 0.]), &[2]),
            Err(crate::Error::Index(_))
        ));
    }

    #[test]
    fn bce_masks_absent_targets() {
        let z = t(&[1, 3], &[0.0, 50.0, -3.0]);
        let l = binary_cross_entropy_logits(&z, &[Some(1.0), None, None]).unwrap();
        assert_abs_diff_eq!(l, std::f64::consts::LN_2, epsilon = 1e-12);
        assert_eq!(binary_cross_entropy_logits(&z, &[None, None, None]).unwrap(), 0.0);
    }

    #[test]
    fn permute_transposes() {
        let x = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let y = permute(&x, &[1, 0]).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.data(), &[1., 4., 2., 5., 3., 6.]);
        assert!(permute(&x, &[0, 0]).is_err());
    }
}
