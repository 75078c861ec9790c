//! Direct, unoptimised evaluations of the attention and graph kernels. They
//! materialise every attention matrix and loop element by element, sharing no
//! code with the production kernels, and back the `validate` suite.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn matmul_naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// Row-wise softmax of `scale * q_cols(a) k_cols(a)^T` for column range
/// `[c0, c0 + w)` of the row-major `l x stride` projections.
fn softmax_map(q: &[f64], k: &[f64], l: usize, stride: usize, c0: usize, w: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..l)
        .map(|i| {
            let logits: Vec<f64> = (0..l)
                .map(|j| scale * (0..w).map(|c| q[i * stride + c0 + c] * k[j * stride + c0 + c]).sum::<f64>())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

fn dims(x: &Tensor) -> Result<(usize, usize)> {
    match x.shape() {
        [l, d] => Ok((*l, *d)),
        s => Err(Error::Config(format!("reference kernels need L x d input, got {s:?}"))),
    }
}

/// `softmax(x w_q (x w_k)^T / sqrt(d)) x w_v`.
pub fn full_attention(x: &Tensor, w_q: &Tensor, w_k: &Tensor, w_v: &Tensor) -> Result<Tensor> {
    let (l, d) = dims(x)?;
    let dv = w_v.cols();
    let q = matmul_naive(x.data(), w_q.data(), l, d, w_q.cols());
    let k = matmul_naive(x.data(), w_k.data(), l, d, w_k.cols());
    let v = matmul_naive(x.data(), w_v.data(), l, d, dv);
    let a = softmax_map(&q, &k, l, w_q.cols(), 0, w_q.cols(), 1.0 / (d as f64).sqrt());
    let mut out = vec![0.0; l * dv];
    for i in 0..l {
        for c in 0..dv {
            out[i * dv + c] = (0..l).map(|j| a[i][j] * v[j * dv + c]).sum();
        }
    }
    Tensor::new(&[l, dv], out)
}

/// Differential attention: for head `h` with slice `[h w, (h + 1) w)` of the
/// `2d`-wide projections (`w = 2d / heads`), `(softmax(Q1 K1^T s) - lambda_h
/// softmax(Q2 K2^T s)) V_h` where the first and second halves of the slice
/// give `Q1, K1` and `Q2, K2`, and `s = 1 / sqrt(w / 2)`.
pub fn diff_attention(
    x: &Tensor,
    w_q: &Tensor,
    w_k: &Tensor,
    w_v: &Tensor,
    lambda: &[f64],
) -> Result<Tensor> {
    let (l, d) = dims(x)?;
    let heads = lambda.len();
    let wide = 2 * d;
    let q = matmul_naive(x.data(), w_q.data(), l, d, wide);
    let k = matmul_naive(x.data(), w_k.data(), l, d, wide);
    let v = matmul_naive(x.data(), w_v.data(), l, d, wide);
    let width = wide / heads;
    let half = width / 2;
    let scale = 1.0 / (half as f64).sqrt();
    let mut out = vec![0.0; l * wide];
    for (h, &lam) in lambda.iter().enumerate() {
        let c0 = h * width;
        let a1 = softmax_map(&q, &k, l, wide, c0, half, scale);
        let a2 = softmax_map(&q, &k, l, wide, c0 + half, half, scale);
        for i in 0..l {
            for c in c0..c0 + width {
                out[i * wide + c] = (0..l).map(|j| (a1[i][j] - lam * a2[i][j]) * v[j * wide + c]).sum();
            }
        }
    }
    Tensor::new(&[l, wide], out)
}

/// Windowed ReLU-kernel attention evaluated pairwise:
/// `out_i = sum_j s_ij v_j / (sum_j s_ij + guard)` with
/// `s_ij = relu(q_i) . relu(k_j)` over `j` in the window of `i`.
pub fn ldt_attention(
    x: &Tensor,
    w_q: &Tensor,
    w_k: &Tensor,
    w_v: &Tensor,
    window: usize,
    guard: f64,
) -> Result<Tensor> {
    let (l, d) = dims(x)?;
    let (dk, dv) = (w_q.cols(), w_v.cols());
    let relu = |v: Vec<f64>| v.into_iter().map(|a| a.max(0.0)).collect::<Vec<_>>();
    let q = relu(matmul_naive(x.data(), w_q.data(), l, d, dk));
    let k = relu(matmul_naive(x.data(), w_k.data(), l, d, dk));
    let v = matmul_naive(x.data(), w_v.data(), l, d, dv);
    let w = window.max(1);
    let mut out = vec![0.0; l * dv];
    for i in 0..l {
        let start = (i / w) * w;
        let end = (start + w).min(l);
        let mut den = guard;
        let mut num = vec![0.0; dv];
        for j in start..end {
            let s: f64 = (0..dk).map(|a| q[i * dk + a] * k[j * dk + a]).sum();
            den += s;
            for c in 0..dv {
                num[c] += s * v[j * dv + c];
            }
        }
        for c in 0..dv {
            out[i * dv + c] = num[c] / den;
        }
    }
    Tensor::new(&[l, dv], out)
}

/// `relu(sum_j a_ij sum_c h_jc w_co)` element by element.
pub fn gcn_layer(h: &Tensor, normalized: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (n, din) = dims(h)?;
    let dout = w.cols();
    let a = normalized.data();
    let mut out = vec![0.0; n * dout];
    for i in 0..n {
        for o in 0..dout {
            let mut s = 0.0;
            for j in 0..n {
                for c in 0..din {
                    s += a[i * n + j] * h.data()[j * din + c] * w.data()[c * dout + o];
                }
            }
            out[i * dout + o] = s.max(0.0);
        }
    }
    Tensor::new(&[n, dout], out)
}

/// Largest eigenvalue magnitude of a symmetric matrix by cyclic Jacobi
/// rotations.
pub fn spectral_radius_symmetric(m: &Tensor) -> Result<f64> {
    let n = m.rows();
    if m.shape() != [n, n] {
        return Err(Error::Config(format!("need a square matrix, got {:?}", m.shape())));
    }
    let mut a = m.data().to_vec();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for r in 0..n {
                    let (arp, arq) = (a[r * n + p], a[r * n + q]);
                    a[r * n + p] = c * arp - s * arq;
                    a[r * n + q] = s * arp + c * arq;
                }
                for r in 0..n {
                    let (apr, aqr) = (a[p * n + r], a[q * n + r]);
                    a[p * n + r] = c * apr - s * aqr;
                    a[q * n + r] = s * apr + c * aqr;
                }
            }
        }
    }
    Ok((0..n).map(|i| a[i * n + i].abs()).fold(0.0, f64::max))
}
