//! Independent test oracles built on nalgebra. None of this calls into the
//! crate's kernels; inputs and outputs cross the boundary as plain tensors.

#![allow(dead_code)]

use nalgebra::{DMatrix, SymmetricEigen};
use stgdance::Tensor;

pub fn to_mat(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

pub fn max_abs(a: &DMatrix<f64>, b: &Tensor) -> f64 {
    assert_eq!((a.nrows(), a.ncols()), (b.rows(), b.cols()), "oracle shape");
    let mut worst = 0.0f64;
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            worst = worst.max((a[(i, j)] - b.data()[i * a.ncols() + j]).abs());
        }
    }
    worst
}

fn softmax_rows(mut m: DMatrix<f64>) -> DMatrix<f64> {
    for mut row in m.row_iter_mut() {
        let top = row.max();
        row.iter_mut().for_each(|v| *v = (*v - top).exp());
        let s = row.sum();
        row /= s;
    }
    m
}

/// `softmax(Q K^T / sqrt(d)) V` with `d` the input width.
pub fn full_attention(x: &Tensor, wq: &Tensor, wk: &Tensor, wv: &Tensor) -> DMatrix<f64> {
    let x = to_mat(x);
    let (q, k, v) = (&x * to_mat(wq), &x * to_mat(wk), &x * to_mat(wv));
    softmax_rows(q * k.transpose() / (x.ncols() as f64).sqrt()) * v
}

/// Per-head differential attention. Head `h` owns columns
/// `[h w, (h + 1) w)` of the `2d` projections, split into `Q1 | Q2`,
/// `K1 | K2`; the head output is `(A1 - lambda_h A2) V_h`.
pub fn diff_attention(x: &Tensor, wq: &Tensor, wk: &Tensor, wv: &Tensor, lambda: &[f64]) -> DMatrix<f64> {
    let x = to_mat(x);
    let (q, k, v) = (&x * to_mat(wq), &x * to_mat(wk), &x * to_mat(wv));
    let width = q.ncols() / lambda.len();
    let half = width / 2;
    let scale = 1.0 / (half as f64).sqrt();
    let mut out = DMatrix::zeros(x.nrows(), q.ncols());
    for (h, lam) in lambda.iter().enumerate() {
        let c = h * width;
        let a1 = softmax_rows(q.columns(c, half) * k.columns(c, half).transpose() * scale);
        let a2 = softmax_rows(q.columns(c + half, half) * k.columns(c + half, half).transpose() * scale);
        let head = (a1 - a2 * *lam) * v.columns(c, width);
        out.columns_mut(c, width).copy_from(&head);
    }
    out
}

/// ReLU-kernel attention with the quadratic score matrix materialised per
/// window: `S = relu(Q) relu(K)^T`, `out = S V / (S 1 + guard)`.
pub fn ldt_attention(x: &Tensor, wq: &Tensor, wk: &Tensor, wv: &Tensor, window: usize, guard: f64) -> DMatrix<f64> {
    let x = to_mat(x);
    let relu = |m: DMatrix<f64>| m.map(|v| v.max(0.0));
    let (q, k, v) = (relu(&x * to_mat(wq)), relu(&x * to_mat(wk)), &x * to_mat(wv));
    let l = x.nrows();
    let mut out = DMatrix::zeros(l, v.ncols());
    let mut start = 0;
    while start < l {
        let n = window.min(l - start);
        let s = q.rows(start, n) * k.rows(start, n).transpose();
        let num = &s * v.rows(start, n);
        for i in 0..n {
            let den = s.row(i).sum() + guard;
            out.row_mut(start + i).copy_from(&(num.row(i) / den));
        }
        start += n;
    }
    out
}

/// `relu(A H W)`.
pub fn gcn_layer(h: &Tensor, a: &Tensor, w: &Tensor) -> DMatrix<f64> {
    (to_mat(a) * to_mat(h) * to_mat(w)).map(|v| v.max(0.0))
}

/// Eigenvalues of a symmetric matrix.
pub fn eigenvalues(m: &Tensor) -> Vec<f64> {
    SymmetricEigen::new(to_mat(m)).eigenvalues.iter().copied().collect()
}

/// Fraction of frames with some dancer pair closer than `delta`, by listing
/// every pair distance of every frame.
pub fn tif_brute(motion: &Tensor, delta: f64, pc: [usize; 2]) -> f64 {
    let s = motion.shape();
    let (n, l, d) = (s[0], s[1], s[2]);
    let at = |i: usize, f: usize, c: usize| motion.data()[(i * l + f) * d + c];
    let mut frames = 0usize;
    for f in 0..l {
        let mut dists = Vec::new();
        for a in 0..n {
            for b in 0..n {
                if a < b {
                    let dx = at(a, f, pc[0]) - at(b, f, pc[0]);
                    let dy = at(a, f, pc[1]) - at(b, f, pc[1]);
                    dists.push((dx * dx + dy * dy).sqrt());
                }
            }
        }
        if dists.iter().any(|&r| r < delta) {
            frames += 1;
        }
    }
    frames as f64 / l as f64
}

/// Applies `f` to the (x, y) of every dancer and frame.
pub fn map_positions(motion: &Tensor, pc: [usize; 2], f: impl Fn(f64, f64) -> (f64, f64)) -> Tensor {
    let s = motion.shape();
    let d = s[2];
    let mut out = motion.clone();
    for row in out.data_mut().chunks_mut(d) {
        let (x, y) = f(row[pc[0]], row[pc[1]]);
        row[pc[0]] = x;
        row[pc[1]] = y;
    }
    out
}
