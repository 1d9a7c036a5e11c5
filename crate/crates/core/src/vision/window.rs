//! Index maps over a row-major `Hg × Wg` token grid.
//!
//! Window partitioning, cyclic shifting and 2×2 patch merging are all row
//! permutations (or selections) of the `[Hg·Wg, C]` token matrix, so the
//! model applies them as `gather_rows` and gets their gradients for free.

use crate::error::{bail, Result};
use crate::tensor::{ops, Scalar, Tensor};

fn check_divisible(hg: usize, wg: usize, window: usize) -> Result<()> {
    if window == 0 || hg % window != 0 || wg % window != 0 {
        bail!(Dimension, "grid {hg}×{wg} is not divisible by window {window}");
    }
    Ok(())
}

/// Source token for every slot of the partitioned layout: windows in
/// row-major order, tokens row-major within each window.
pub fn partition_index(hg: usize, wg: usize, window: usize) -> Result<Vec<usize>> {
    check_divisible(hg, wg, window)?;
    let mut idx = Vec::with_capacity(hg * wg);
    for wy in 0..hg / window {
        for wx in 0..wg / window {
            for iy in 0..window {
                for ix in 0..window {
                    idx.push((wy * window + iy) * wg + wx * window + ix);
                }
            }
        }
    }
    Ok(idx)
}

/// Inverse of a permutation.
pub fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Source token for a torus roll by `(−d, −d)`: `out[y][x] = in[y+d][x+d]`.
pub fn shift_index(hg: usize, wg: usize, displacement: isize) -> Result<Vec<usize>> {
    if displacement.unsigned_abs() >= hg.min(wg) {
        bail!(Dimension, "shift {displacement} too large for grid {hg}×{wg}");
    }
    let (h, w) = (hg as isize, wg as isize);
    let mut idx = Vec::with_capacity(hg * wg);
    for y in 0..h {
        for x in 0..w {
            let sy = (y + displacement).rem_euclid(h);
            let sx = (x + displacement).rem_euclid(w);
            idx.push((sy * w + sx) as usize);
        }
    }
    Ok(idx)
}

fn grid_dims<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [h, w, c] => Ok((h, w, c)),
        _ => bail!(Dimension, "expected an [Hg, Wg, C] grid, got {:?}", x.shape()),
    }
}

/// `[Hg, Wg, C] → [nWin, window², C]`.
pub fn window_partition<T: Scalar>(x: &Tensor<T>, window: usize) -> Result<Tensor<T>> {
    let (h, w, c) = grid_dims(x)?;
    let idx = partition_index(h, w, window)?;
    let rows = x.clone().reshape(&[h * w, c])?;
    ops::gather_rows(&rows, &idx)?.reshape(&[(h / window) * (w / window), window * window, c])
}

/// Exact inverse of [`window_partition`].
pub fn window_reverse<T: Scalar>(wins: &Tensor<T>, hg: usize, wg: usize) -> Result<Tensor<T>> {
    let [n_win, n_tok, c] = *wins.shape() else {
        bail!(Dimension, "expected [nWin, window², C], got {:?}", wins.shape());
    };
    if n_win * n_tok != hg * wg {
        bail!(Dimension, "{n_win} windows of {n_tok} tokens cannot fill a {hg}×{wg} grid");
    }
    let window = (n_tok as f64).sqrt().round() as usize;
    if window * window != n_tok {
        bail!(Dimension, "window token count {n_tok} is not a square");
    }
    let inv = invert(&partition_index(hg, wg, window)?);
    let rows = wins.clone().reshape(&[hg * wg, c])?;
    ops::gather_rows(&rows, &inv)?.reshape(&[hg, wg, c])
}

/// Torus roll of an `[Hg, Wg, C]` grid by `(−d, −d)`.
pub fn cyclic_shift<T: Scalar>(x: &Tensor<T>, displacement: isize) -> Result<Tensor<T>> {
    let (h, w, c) = grid_dims(x)?;
    let idx = shift_index(h, w, displacement)?;
    let rows = x.clone().reshape(&[h * w, c])?;
    ops::gather_rows(&rows, &idx)?.reshape(&[h, w, c])
}

/// Attention permission after a cyclic shift, `[nWin, N, N]` flattened
/// (`true` = may attend). Tokens whose pre-shift positions lie in different
/// bands of the grid are separated.
pub fn shift_mask(hg: usize, wg: usize, window: usize, shift: usize) -> Result<Vec<bool>> {
    check_divisible(hg, wg, window)?;
    if shift == 0 || shift >= window {
        bail!(Parameter, "shift must be in (0, window), got {shift}");
    }
    let band = |pos: usize, len: usize| -> usize {
        if pos < len - window {
            0
        } else if pos < len - shift {
            1
        } else {
            2
        }
    };
    let mut region = vec![0usize; hg * wg];
    for y in 0..hg {
        for x in 0..wg {
            region[y * wg + x] = band(y, hg) * 3 + band(x, wg);
        }
    }
    let idx = partition_index(hg, wg, window)?;
    let n = window * window;
    let mut mask = Vec::with_capacity(idx.len() * n);
    for win in idx.chunks(n) {
        for &a in win {
            for &b in win {
                mask.push(region[a] == region[b]);
            }
        }
    }
    Ok(mask)
}

/// Sources for 2×2 merging: per output cell `(y, x)` the tokens
/// `(2y, 2x)`, `(2y+1, 2x)`, `(2y, 2x+1)`, `(2y+1, 2x+1)`.
pub fn merge_index(hg: usize, wg: usize) -> Result<Vec<usize>> {
    if hg % 2 != 0 || wg % 2 != 0 {
        bail!(Dimension, "patch merge needs even grid sides, got {hg}×{wg}");
    }
    let mut idx = Vec::with_capacity(hg * wg);
    for y in 0..hg / 2 {
        for x in 0..wg / 2 {
            for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                idx.push((2 * y + dy) * wg + 2 * x + dx);
            }
        }
    }
    Ok(idx)
}

/// Row of the `(2w−1)²` displacement table for every (query, key) pair of
/// a window, `[N·N]`.
pub fn relative_position_index(window: usize) -> Vec<usize> {
    let n = window * window;
    let side = 2 * window - 1;
    let mut idx = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let dy = (i / window) as isize - (j / window) as isize;
            let dx = (i % window) as isize - (j % window) as isize;
            let row = (dy + window as isize - 1) as usize;
            let col = (dx + window as isize - 1) as usize;
            idx.push(row * side + col);
        }
    }
    idx
}

/// `sign(d)·log2(1 + |d|)/log2(window)`.
pub fn log_spaced(d: isize, window: usize) -> f64 {
    let d = d as f64;
    d.signum() * (1.0 + d.abs()).log2() / (window as f64).log2()
}

/// Log-spaced `(dy, dx)` for every displacement in
/// `[−(w−1), w−1]²`, row-major by `dy`: `[(2w−1)², 2]`.
pub fn log_cpb_coords<T: Scalar>(window: usize) -> Result<Tensor<T>> {
    if window < 2 {
        bail!(Parameter, "log-spaced coordinates need window ≥ 2, got {window}");
    }
    let r = window as isize - 1;
    let mut data = Vec::with_capacity((2 * window - 1).pow(2) * 2);
    for dy in -r..=r {
        for dx in -r..=r {
            data.push(T::c(log_spaced(dy, window)));
            data.push(T::c(log_spaced(dx, window)));
        }
    }
    Tensor::new(&[(2 * window - 1).pow(2), 2], data)
}
