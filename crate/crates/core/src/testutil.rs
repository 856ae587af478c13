//! Independent oracles for unit tests: direct patch extraction and a dense
//! linear solve, written without the autodiff ops.

use crate::autodiff::Array;

/// For every output pixel (row-major), the zero-padded `C·k·k` neighbourhood
/// vector ordered channel, kernel row, kernel column.
pub fn patch_rows(x: &Array, k: usize) -> Vec<Vec<f64>> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let lo = (k as isize - 1) / 2;
    let mut rows = Vec::with_capacity(h * w);
    for i in 0..h as isize {
        for j in 0..w as isize {
            let mut v = Vec::with_capacity(c * k * k);
            for ch in 0..c {
                for ky in 0..k as isize {
                    for kx in 0..k as isize {
                        let (y, xx) = (i + ky - lo, j + kx - lo);
                        let inside = y >= 0 && xx >= 0 && y < h as isize && xx < w as isize;
                        v.push(if inside { x[[ch, y as usize, xx as usize]] } else { 0.0 });
                    }
                }
            }
            rows.push(v);
        }
    }
    rows
}

/// Solve `a x = b` by Gaussian elimination with partial pivoting.
pub fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            let pivot_row = a[col].clone();
            for (x, p) in a[r][col..n].iter_mut().zip(&pivot_row[col..n]) {
                *x -= f * p;
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// Weighted ridge solution of `(Σ_n w_n x_n x_nᵀ + λI) θ = Σ_n w_n x_n t_n`.
pub fn weighted_ridge(rows: &[Vec<f64>], targets: &[f64], weights: &[f64], lambda: f64) -> Vec<f64> {
    let d = rows[0].len();
    let mut a = vec![vec![0.0; d]; d];
    let mut b = vec![0.0; d];
    for ((x, t), w) in rows.iter().zip(targets).zip(weights) {
        for i in 0..d {
            b[i] += w * x[i] * t;
            for j in 0..d {
                a[i][j] += w * x[i] * x[j];
            }
        }
    }
    for (i, row) in a.iter_mut().enumerate() {
        row[i] += lambda;
    }
    solve_dense(a, b)
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().map(|v| v.abs()).fold(1e-12, f64::max);
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}
