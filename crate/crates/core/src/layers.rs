//! Small building blocks of the denoiser: parameter-free layer normalisation,
//! group fusion and the sinusoidal timestep embedding.

use crate::error::{Error, Result};
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};

const LN_EPS: f64 = 1e-5;

/// Per-row statistics retained for [`layer_norm_backward`].
#[derive(Debug, Clone)]
pub struct NormCache {
    pub y: Tensor,
    inv_std: Vec<f64>,
}

/// Normalises each row of `x` to zero mean and unit variance (no affine).
pub fn layer_norm(x: &Tensor) -> (Tensor, NormCache) {
    let c = x.cols();
    let mut y = x.clone();
    let mut inv_std = Vec::with_capacity(x.rows());
    for row in y.data_mut().chunks_mut(c) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * r;
        }
        inv_std.push(r);
    }
    (y.clone(), NormCache { y, inv_std })
}

pub fn layer_norm_backward(cache: &NormCache, grad_out: &Tensor) -> Tensor {
    let c = cache.y.cols();
    let mut dx = grad_out.clone();
    for ((row, yr), &r) in dx
        .data_mut()
        .chunks_mut(c)
        .zip(cache.y.data().chunks(c))
        .zip(&cache.inv_std)
    {
        let mean_g = row.iter().sum::<f64>() / c as f64;
        let mean_gy = row.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / c as f64;
        for (g, y) in row.iter_mut().zip(yr) {
            *g = r * (*g - mean_g - y * mean_gy);
        }
    }
    dx
}

/// Group fusion: adds each dancer's identity embedding to all of its frames,
/// then applies a shared linear mix. `x` is `N x L x D`, `embed` is
/// `max_dancers x D`.
pub fn group_fusion(x: &Tensor, embed: &Tensor, mix_w: &Tensor, mix_b: &Tensor) -> Result<Tensor> {
    Ok(group_fusion_cached(x, embed, mix_w, mix_b)?.0)
}

pub struct FusionCache {
    fused: Tensor,
}

pub fn group_fusion_cached(
    x: &Tensor,
    embed: &Tensor,
    mix_w: &Tensor,
    mix_b: &Tensor,
) -> Result<(Tensor, FusionCache)> {
    let (n, l, d) = match x.shape() {
        [n, l, d] => (*n, *l, *d),
        s => return Err(Error::shape("group_fusion", format!("expected N x L x D, got {s:?}"))),
    };
    if n == 0 {
        return Err(Error::shape("group_fusion", "no dancers"));
    }
    if embed.cols() != d || embed.shape().len() != 2 {
        return Err(Error::shape("group_fusion", format!("embedding {:?}", embed.shape())));
    }
    if n > embed.rows() {
        return Err(Error::Config(format!(
            "{n} dancers exceed the embedding table size {}",
            embed.rows()
        )));
    }
    if mix_w.shape() != [d, d] || mix_b.shape() != [d] {
        return Err(Error::shape("group_fusion", format!("mix {:?}", mix_w.shape())));
    }
    let mut fused = x.clone();
    for (row_idx, row) in fused.data_mut().chunks_mut(d).enumerate() {
        let e = embed.row(row_idx / l);
        for (v, ev) in row.iter_mut().zip(e) {
            *v += ev;
        }
    }
    let mut out = Vec::with_capacity(n * l * d);
    for _ in 0..n * l {
        out.extend_from_slice(mix_b.data());
    }
    gemm_acc(fused.data(), mix_w.data(), &mut out, n * l, d, d);
    Ok((Tensor::new(&[n, l, d], out)?, FusionCache { fused }))
}

pub struct FusionGrads {
    pub dx: Tensor,
    pub dembed: Tensor,
    pub dmix_w: Tensor,
    pub dmix_b: Tensor,
}

pub fn group_fusion_backward(
    cache: &FusionCache,
    embed: &Tensor,
    mix_w: &Tensor,
    grad_out: &Tensor,
) -> Result<FusionGrads> {
    let (n, l, d) = match cache.fused.shape() {
        [n, l, d] => (*n, *l, *d),
        _ => unreachable!("fusion cache is always rank 3"),
    };
    if grad_out.shape() != cache.fused.shape() {
        return Err(Error::shape("group_fusion_backward", format!("{:?}", grad_out.shape())));
    }
    let rows = n * l;
    let mut dx = vec![0.0; rows * d];
    gemm_nt_acc(grad_out.data(), mix_w.data(), &mut dx, rows, d, d);
    let mut dw = vec![0.0; d * d];
    gemm_tn_acc(cache.fused.data(), grad_out.data(), &mut dw, rows, d, d);
    let mut db = vec![0.0; d];
    for r in grad_out.data().chunks(d) {
        for (a, g) in db.iter_mut().zip(r) {
            *a += g;
        }
    }
    let mut de = Tensor::zeros(embed.shape());
    for (row_idx, r) in dx.chunks(d).enumerate() {
        for (a, g) in de.row_mut(row_idx / l).iter_mut().zip(r) {
            *a += g;
        }
    }
    Ok(FusionGrads {
        dx: Tensor::new(&[n, l, d], dx)?,
        dembed: de,
        dmix_w: Tensor::new(&[d, d], dw)?,
        dmix_b: Tensor::new(&[d], db)?,
    })
}

/// Interleaved `[sin(t f_0), cos(t f_0), sin(t f_1), ...]` with geometric
/// frequencies `f_i = 10000^(-2i/dim)`.
pub fn sinusoidal_embedding(t: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::Config(format!("timestep embedding width must be even, got {dim}")));
    }
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let freq = (-(10000f64.ln()) * (2 * i) as f64 / dim as f64).exp();
        let arg = t as f64 * freq;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    Tensor::new(&[dim], out)
}
