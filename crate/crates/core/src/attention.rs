//! Temporal attention kernels: softmax attention (the quadratic reference),
//! differential attention, windowed ReLU linear attention, and FiLM
//! modulation. Every kernel has a hand-written vector-Jacobian product.
//!
//! All kernels take a single dancer's sequence `x` of shape `L x d`.

use crate::counter;
use crate::error::{Error, Result};
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, softmax_in_place, Tensor};

/// Default denominator guard for linear attention.
pub const LDT_GUARD: f64 = 1e-9;

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [a, b] => Ok((*a, *b)),
        s => Err(Error::shape(op, format!("expected a matrix, got {s:?}"))),
    }
}

fn project(x: &Tensor, w: &Tensor, op: &'static str) -> Result<Tensor> {
    let (l, d) = dims2(x, op)?;
    let (din, dout) = dims2(w, op)?;
    if d != din {
        return Err(Error::shape(op, format!("x is {l}x{d} but weight is {din}x{dout}")));
    }
    let mut out = vec![0.0; l * dout];
    gemm_acc(x.data(), w.data(), &mut out, l, d, dout);
    Tensor::new(&[l, dout], out)
}

/// Copies columns `[start, start + width)` of a row-major `rows x cols` buffer.
fn take_cols(src: &[f64], cols: usize, start: usize, width: usize) -> Vec<f64> {
    src.chunks(cols)
        .flat_map(|r| r[start..start + width].iter().copied())
        .collect()
}

fn put_cols(dst: &mut [f64], cols: usize, start: usize, width: usize, src: &[f64]) {
    for (r, s) in dst.chunks_mut(cols).zip(src.chunks(width)) {
        r[start..start + width].copy_from_slice(s);
    }
}

fn add_cols(dst: &mut [f64], cols: usize, start: usize, width: usize, src: &[f64]) {
    for (r, s) in dst.chunks_mut(cols).zip(src.chunks(width)) {
        for (a, b) in r[start..start + width].iter_mut().zip(s) {
            *a += b;
        }
    }
}

/// Row-at-a-time `softmax(q k^T * scale) v`. When `probs` is given the
/// attention matrix is written into it (`lq x lk`).
#[allow(clippy::too_many_arguments)]
fn softmax_attend(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    lq: usize,
    lk: usize,
    dk: usize,
    dv: usize,
    scale: f64,
    out: &mut [f64],
    mut probs: Option<&mut [f64]>,
) -> Result<()> {
    counter::record(lq * lk * (dk + dv));
    let mut scores = vec![0.0; lk];
    for i in 0..lq {
        let qi = &q[i * dk..(i + 1) * dk];
        for (j, s) in scores.iter_mut().enumerate() {
            let kj = &k[j * dk..(j + 1) * dk];
            *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
        }
        if !scores.iter().all(|s| s.is_finite()) {
            return Err(Error::numeric("attention logits"));
        }
        softmax_in_place(&mut scores);
        let oi = &mut out[i * dv..(i + 1) * dv];
        for (j, &p) in scores.iter().enumerate() {
            for (o, &vv) in oi.iter_mut().zip(&v[j * dv..(j + 1) * dv]) {
                *o += p * vv;
            }
        }
        if let Some(pr) = probs.as_deref_mut() {
            pr[i * lk..(i + 1) * lk].copy_from_slice(&scores);
        }
    }
    Ok(())
}

/// Gradient of the softmax pre-activations given probabilities `p` and the
/// upstream gradient `dp`, both `rows x cols`.
fn softmax_backward(p: &[f64], dp: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; p.len()];
    for ((o, pr), dr) in out.chunks_mut(cols).zip(p.chunks(cols)).zip(dp.chunks(cols)) {
        let inner: f64 = pr.iter().zip(dr).map(|(a, b)| a * b).sum();
        for ((ov, &pv), &dv) in o.iter_mut().zip(pr).zip(dr) {
            *ov = pv * (dv - inner);
        }
    }
    out
}

/// `softmax(q k^T * scale) v` on explicit query/key/value matrices.
pub fn attend(q: &Tensor, k: &Tensor, v: &Tensor, scale: f64) -> Result<Tensor> {
    let (lq, dk) = dims2(q, "attend")?;
    let (lk, dk2) = dims2(k, "attend")?;
    let (lv, dv) = dims2(v, "attend")?;
    if dk != dk2 || lk != lv {
        return Err(Error::shape(
            "attend",
            format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    let mut out = vec![0.0; lq * dv];
    softmax_attend(q.data(), k.data(), v.data(), lq, lk, dk, dv, scale, &mut out, None)?;
    Tensor::new(&[lq, dv], out)
}

/// Weights of plain softmax self-attention.
#[derive(Debug, Clone, PartialEq)]
pub struct FullAttnWeights {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
}

/// `softmax(Q K^T / sqrt(d)) V` with `Q = x w_q` and so on. Quadratic in `L`.
pub fn full_attention(x: &Tensor, w_q: &Tensor, w_k: &Tensor, w_v: &Tensor) -> Result<Tensor> {
    let q = project(x, w_q, "full_attention")?;
    let k = project(x, w_k, "full_attention")?;
    let v = project(x, w_v, "full_attention")?;
    let scale = 1.0 / (x.cols() as f64).sqrt();
    attend(&q, &k, &v, scale)
}

pub struct FullAttnCache {
    x: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    probs: Vec<f64>,
    scale: f64,
}

pub fn full_attention_cached(x: &Tensor, p: &FullAttnWeights) -> Result<(Tensor, FullAttnCache)> {
    let q = project(x, &p.w_q, "full_attention")?;
    let k = project(x, &p.w_k, "full_attention")?;
    let v = project(x, &p.w_v, "full_attention")?;
    let (l, dk) = (q.rows(), q.cols());
    let dv = v.cols();
    let scale = 1.0 / (x.cols() as f64).sqrt();
    let mut out = vec![0.0; l * dv];
    let mut probs = vec![0.0; l * l];
    softmax_attend(q.data(), k.data(), v.data(), l, l, dk, dv, scale, &mut out, Some(&mut probs))?;
    Ok((
        Tensor::new(&[l, dv], out)?,
        FullAttnCache {
            x: x.clone(),
            q,
            k,
            v,
            probs,
            scale,
        },
    ))
}

pub struct FullAttnGrads {
    pub dx: Tensor,
    pub dw_q: Tensor,
    pub dw_k: Tensor,
    pub dw_v: Tensor,
}

pub fn full_attention_backward(
    cache: &FullAttnCache,
    p: &FullAttnWeights,
    grad_out: &Tensor,
) -> Result<FullAttnGrads> {
    let (l, dk) = (cache.q.rows(), cache.q.cols());
    let dv = cache.v.cols();
    if grad_out.shape() != [l, dv] {
        return Err(Error::shape("full_attention_backward", format!("{:?}", grad_out.shape())));
    }
    let mut dv_buf = vec![0.0; l * dv];
    gemm_tn_acc(&cache.probs, grad_out.data(), &mut dv_buf, l, l, dv);
    let mut dp = vec![0.0; l * l];
    gemm_nt_acc(grad_out.data(), cache.v.data(), &mut dp, l, dv, l);
    let mut ds = softmax_backward(&cache.probs, &dp, l);
    ds.iter_mut().for_each(|v| *v *= cache.scale);
    let mut dq = vec![0.0; l * dk];
    gemm_acc(&ds, cache.k.data(), &mut dq, l, l, dk);
    let mut dk_buf = vec![0.0; l * dk];
    gemm_tn_acc(&ds, cache.q.data(), &mut dk_buf, l, l, dk);
    let dq = Tensor::new(&[l, dk], dq)?;
    let dk_t = Tensor::new(&[l, dk], dk_buf)?;
    let dv_t = Tensor::new(&[l, dv], dv_buf)?;
    let (dx, dws) = project_backward(&cache.x, &[(&p.w_q, &dq), (&p.w_k, &dk_t), (&p.w_v, &dv_t)])?;
    let mut dws = dws.into_iter();
    Ok(FullAttnGrads {
        dx,
        dw_q: dws.next().unwrap(),
        dw_k: dws.next().unwrap(),
        dw_v: dws.next().unwrap(),
    })
}

/// Backward of several projections of the same input: returns `dx` summed
/// over all of them and each weight gradient.
fn project_backward(x: &Tensor, pairs: &[(&Tensor, &Tensor)]) -> Result<(Tensor, Vec<Tensor>)> {
    let (l, d) = dims2(x, "project_backward")?;
    let mut dx = vec![0.0; l * d];
    let mut dws = Vec::with_capacity(pairs.len());
    for (w, g) in pairs {
        let dout = w.cols();
        gemm_nt_acc(g.data(), w.data(), &mut dx, l, dout, d);
        let mut dw = vec![0.0; d * dout];
        gemm_tn_acc(x.data(), g.data(), &mut dw, l, d, dout);
        dws.push(Tensor::new(&[d, dout], dw)?);
    }
    Ok((Tensor::new(&[l, d], dx)?, dws))
}

/// Differential attention weights. Projections map `d -> 2d`; each head owns
/// a contiguous `2d / heads` slice whose two halves form its two query/key
/// groups.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffAttnWeights {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    /// One suppression coefficient per head, shape `[heads]`.
    pub lambda: Tensor,
    pub heads: usize,
}

impl DiffAttnWeights {
    fn validate(&self, d: usize) -> Result<()> {
        let h = self.heads;
        if h == 0 || !d.is_multiple_of(h) {
            return Err(Error::Config(format!(
                "differential attention needs d ({d}) divisible by heads ({h})"
            )));
        }
        for w in [&self.w_q, &self.w_k, &self.w_v] {
            if w.shape() != [d, 2 * d] {
                return Err(Error::shape(
                    "diff_attention",
                    format!("projection {:?}, expected [{d}, {}]", w.shape(), 2 * d),
                ));
            }
        }
        if self.lambda.shape() != [h] {
            return Err(Error::shape("diff_attention", format!("lambda {:?}", self.lambda.shape())));
        }
        if !self.lambda.is_finite() {
            return Err(Error::numeric("diff_attention lambda"));
        }
        Ok(())
    }

    /// Softmax temperature: `1 / sqrt(half-width of a head)`, which is
    /// `1 / sqrt(d)` for a single head.
    pub fn scale(&self, d: usize) -> f64 {
        1.0 / ((d / self.heads) as f64).sqrt()
    }
}

pub struct DiffAttnCache {
    x: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    /// Per head, the two attention maps.
    maps: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Per-head differential attention `(A1 - lambda A2) V`; output is `L x 2d`.
pub fn diff_attention(x: &Tensor, p: &DiffAttnWeights) -> Result<Tensor> {
    diff_attention_impl(x, p, false).map(|(o, _)| o)
}

pub fn diff_attention_cached(x: &Tensor, p: &DiffAttnWeights) -> Result<(Tensor, DiffAttnCache)> {
    diff_attention_impl(x, p, true).map(|(o, c)| (o, c.expect("cache requested")))
}

fn diff_attention_impl(
    x: &Tensor,
    p: &DiffAttnWeights,
    keep: bool,
) -> Result<(Tensor, Option<DiffAttnCache>)> {
    let (l, d) = dims2(x, "diff_attention")?;
    p.validate(d)?;
    x.ensure_finite("diff_attention input")?;
    let q = project(x, &p.w_q, "diff_attention")?;
    let k = project(x, &p.w_k, "diff_attention")?;
    let v = project(x, &p.w_v, "diff_attention")?;
    let width = 2 * d / p.heads;
    let half = width / 2;
    let scale = p.scale(d);
    let mut out = vec![0.0; l * 2 * d];
    let mut maps = Vec::new();
    let mut a1 = vec![0.0; l];
    let mut a2 = vec![0.0; l];
    for h in 0..p.heads {
        let start = h * width;
        let q1 = take_cols(q.data(), 2 * d, start, half);
        let q2 = take_cols(q.data(), 2 * d, start + half, half);
        let k1 = take_cols(k.data(), 2 * d, start, half);
        let k2 = take_cols(k.data(), 2 * d, start + half, half);
        let vh = take_cols(v.data(), 2 * d, start, width);
        let lambda = p.lambda.data()[h];
        let mut head_out = vec![0.0; l * width];
        let (mut m1, mut m2) = if keep {
            (vec![0.0; l * l], vec![0.0; l * l])
        } else {
            (Vec::new(), Vec::new())
        };
        counter::record(l * l * (2 * half + width));
        for i in 0..l {
            for (j, (s1, s2)) in a1.iter_mut().zip(a2.iter_mut()).enumerate() {
                let (qi1, qi2) = (&q1[i * half..(i + 1) * half], &q2[i * half..(i + 1) * half]);
                let (kj1, kj2) = (&k1[j * half..(j + 1) * half], &k2[j * half..(j + 1) * half]);
                *s1 = qi1.iter().zip(kj1).map(|(a, b)| a * b).sum::<f64>() * scale;
                *s2 = qi2.iter().zip(kj2).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            if !a1.iter().chain(a2.iter()).all(|s| s.is_finite()) {
                return Err(Error::numeric("diff_attention logits"));
            }
            softmax_in_place(&mut a1);
            softmax_in_place(&mut a2);
            let oi = &mut head_out[i * width..(i + 1) * width];
            for j in 0..l {
                let m = a1[j] - lambda * a2[j];
                for (o, &vv) in oi.iter_mut().zip(&vh[j * width..(j + 1) * width]) {
                    *o += m * vv;
                }
            }
            if keep {
                m1[i * l..(i + 1) * l].copy_from_slice(&a1);
                m2[i * l..(i + 1) * l].copy_from_slice(&a2);
            }
        }
        put_cols(&mut out, 2 * d, start, width, &head_out);
        if keep {
            maps.push((m1, m2));
        }
    }
    let out = Tensor::new(&[l, 2 * d], out)?;
    let cache = keep.then(|| DiffAttnCache {
        x: x.clone(),
        q,
        k,
        v,
        maps,
    });
    Ok((out, cache))
}

pub struct DiffAttnGrads {
    pub dx: Tensor,
    pub dw_q: Tensor,
    pub dw_k: Tensor,
    pub dw_v: Tensor,
    pub dlambda: Tensor,
}

pub fn diff_attention_backward(
    cache: &DiffAttnCache,
    p: &DiffAttnWeights,
    grad_out: &Tensor,
) -> Result<DiffAttnGrads> {
    let (l, d) = dims2(&cache.x, "diff_attention_backward")?;
    if grad_out.shape() != [l, 2 * d] {
        return Err(Error::shape("diff_attention_backward", format!("{:?}", grad_out.shape())));
    }
    let width = 2 * d / p.heads;
    let half = width / 2;
    let scale = p.scale(d);
    let mut dq = vec![0.0; l * 2 * d];
    let mut dk = vec![0.0; l * 2 * d];
    let mut dv = vec![0.0; l * 2 * d];
    let mut dlambda = vec![0.0; p.heads];
    for (h, (a1, a2)) in cache.maps.iter().enumerate() {
        let start = h * width;
        let lambda = p.lambda.data()[h];
        let go = take_cols(grad_out.data(), 2 * d, start, width);
        let vh = take_cols(cache.v.data(), 2 * d, start, width);
        let mixed: Vec<f64> = a1.iter().zip(a2).map(|(x, y)| x - lambda * y).collect();
        let mut dvh = vec![0.0; l * width];
        gemm_tn_acc(&mixed, &go, &mut dvh, l, l, width);
        add_cols(&mut dv, 2 * d, start, width, &dvh);
        let mut dm = vec![0.0; l * l];
        gemm_nt_acc(&go, &vh, &mut dm, l, width, l);
        dlambda[h] = -dm.iter().zip(a2).map(|(g, a)| g * a).sum::<f64>();
        let dm2: Vec<f64> = dm.iter().map(|g| -lambda * g).collect();
        for (map, dmap, offset) in [(a1, &dm, 0), (a2, &dm2, half)] {
            let mut ds = softmax_backward(map, dmap, l);
            ds.iter_mut().for_each(|v| *v *= scale);
            let qh = take_cols(cache.q.data(), 2 * d, start + offset, half);
            let kh = take_cols(cache.k.data(), 2 * d, start + offset, half);
            let mut dqh = vec![0.0; l * half];
            gemm_acc(&ds, &kh, &mut dqh, l, l, half);
            let mut dkh = vec![0.0; l * half];
            gemm_tn_acc(&ds, &qh, &mut dkh, l, l, half);
            add_cols(&mut dq, 2 * d, start + offset, half, &dqh);
            add_cols(&mut dk, 2 * d, start + offset, half, &dkh);
        }
    }
    let dq = Tensor::new(&[l, 2 * d], dq)?;
    let dk = Tensor::new(&[l, 2 * d], dk)?;
    let dv = Tensor::new(&[l, 2 * d], dv)?;
    let (dx, dws) = project_backward(&cache.x, &[(&p.w_q, &dq), (&p.w_k, &dk), (&p.w_v, &dv)])?;
    let mut dws = dws.into_iter();
    Ok(DiffAttnGrads {
        dx,
        dw_q: dws.next().unwrap(),
        dw_k: dws.next().unwrap(),
        dw_v: dws.next().unwrap(),
        dlambda: Tensor::new(&[p.heads], dlambda)?,
    })
}

/// Linear-attention weights. `window >= L` evaluates the whole sequence as a
/// single span.
#[derive(Debug, Clone, PartialEq)]
pub struct LdtWeights {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub window: usize,
    pub guard: f64,
}

/// Half-open spans `[start, end)` tiling `0..len` in chunks of `window`.
pub fn windows(len: usize, window: usize) -> impl Iterator<Item = (usize, usize)> {
    let w = window.max(1);
    (0..len).step_by(w).map(move |s| (s, s.saturating_add(w).min(len)))
}

struct LdtWindow {
    /// `sum_j relu(k_j)^T v_j`, `d x dv`.
    kv: Vec<f64>,
    /// `sum_j relu(k_j)`, length `d`.
    ksum: Vec<f64>,
}

pub struct LdtCache {
    x: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    out: Vec<f64>,
    den: Vec<f64>,
    spans: Vec<LdtWindow>,
}

/// ReLU-kernel linear attention over non-overlapping windows:
/// `out_i = relu(q_i) S / (relu(q_i) . z + guard)` where `S` and `z` are the
/// key-value and key sums of the window containing `i`. Cost is
/// `O(L d^2)`.
pub fn ldt_kernel(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    window: usize,
    guard: f64,
) -> Result<Tensor> {
    ldt_kernel_impl(q, k, v, window, guard, false).map(|(o, _, _)| o)
}

#[allow(clippy::type_complexity)]
fn ldt_kernel_impl(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    window: usize,
    guard: f64,
    keep: bool,
) -> Result<(Tensor, Vec<f64>, Vec<LdtWindow>)> {
    let (l, d) = dims2(q, "ldt_attention")?;
    let (lv, dv) = dims2(v, "ldt_attention")?;
    if k.shape() != [l, d] || lv != l {
        return Err(Error::shape(
            "ldt_attention",
            format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    if window == 0 {
        return Err(Error::Config("linear attention window must be at least 1".into()));
    }
    let mut out = vec![0.0; l * dv];
    let mut den = if keep { vec![0.0; l] } else { Vec::new() };
    let mut spans = Vec::new();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut phi_q = vec![0.0; d];
    let mut phi_k = vec![0.0; d];
    for (s, e) in windows(l, window) {
        let mut kv = vec![0.0; d * dv];
        let mut ksum = vec![0.0; d];
        counter::record((e - s) * d * dv);
        for j in s..e {
            for (p, &kk) in phi_k.iter_mut().zip(&kd[j * d..(j + 1) * d]) {
                *p = kk.max(0.0);
            }
            let vj = &vd[j * dv..(j + 1) * dv];
            for (a, &pk) in phi_k.iter().enumerate() {
                ksum[a] += pk;
                if pk != 0.0 {
                    for (acc, &vv) in kv[a * dv..(a + 1) * dv].iter_mut().zip(vj) {
                        *acc += pk * vv;
                    }
                }
            }
        }
        counter::record((e - s) * d * (dv + 1));
        for i in s..e {
            for (p, &qq) in phi_q.iter_mut().zip(&qd[i * d..(i + 1) * d]) {
                *p = qq.max(0.0);
            }
            let denom: f64 = phi_q.iter().zip(&ksum).map(|(a, b)| a * b).sum::<f64>() + guard;
            let oi = &mut out[i * dv..(i + 1) * dv];
            for (a, &pq) in phi_q.iter().enumerate() {
                if pq != 0.0 {
                    for (o, &s_ac) in oi.iter_mut().zip(&kv[a * dv..(a + 1) * dv]) {
                        *o += pq * s_ac;
                    }
                }
            }
            for o in oi.iter_mut() {
                *o /= denom;
            }
            if keep {
                den[i] = denom;
            }
        }
        if keep {
            spans.push(LdtWindow { kv, ksum });
        }
    }
    let out = Tensor::new(&[l, dv], out)?;
    out.ensure_finite("ldt_attention")?;
    Ok((out, den, spans))
}

pub fn ldt_attention(x: &Tensor, p: &LdtWeights) -> Result<Tensor> {
    let q = project(x, &p.w_q, "ldt_attention")?;
    let k = project(x, &p.w_k, "ldt_attention")?;
    let v = project(x, &p.w_v, "ldt_attention")?;
    ldt_kernel(&q, &k, &v, p.window, p.guard)
}

pub fn ldt_attention_cached(x: &Tensor, p: &LdtWeights) -> Result<(Tensor, LdtCache)> {
    let q = project(x, &p.w_q, "ldt_attention")?;
    let k = project(x, &p.w_k, "ldt_attention")?;
    let v = project(x, &p.w_v, "ldt_attention")?;
    let (out, den, spans) = ldt_kernel_impl(&q, &k, &v, p.window, p.guard, true)?;
    let cache = LdtCache {
        x: x.clone(),
        q,
        k,
        v,
        out: out.data().to_vec(),
        den,
        spans,
    };
    Ok((out, cache))
}

pub struct LdtGrads {
    pub dx: Tensor,
    pub dw_q: Tensor,
    pub dw_k: Tensor,
    pub dw_v: Tensor,
}

/// Returns `(dq, dk, dv)` for the windowed kernel.
fn ldt_kernel_backward(
    cache: &LdtCache,
    window: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (l, d) = (cache.q.rows(), cache.q.cols());
    let dvw = cache.v.cols();
    if grad_out.shape() != [l, dvw] {
        return Err(Error::shape("ldt_attention_backward", format!("{:?}", grad_out.shape())));
    }
    let (qd, kd, vd, go) = (cache.q.data(), cache.k.data(), cache.v.data(), grad_out.data());
    let mut dq = vec![0.0; l * d];
    let mut dk = vec![0.0; l * d];
    let mut dv = vec![0.0; l * dvw];
    let mut dnum = vec![0.0; dvw];
    for ((s, e), span) in windows(l, window).zip(&cache.spans) {
        let mut dkv = vec![0.0; d * dvw];
        let mut dksum = vec![0.0; d];
        for i in s..e {
            let den = cache.den[i];
            let gi = &go[i * dvw..(i + 1) * dvw];
            let oi = &cache.out[i * dvw..(i + 1) * dvw];
            let dden = -gi.iter().zip(oi).map(|(a, b)| a * b).sum::<f64>() / den;
            for (dn, &g) in dnum.iter_mut().zip(gi) {
                *dn = g / den;
            }
            for a in 0..d {
                let qa = qd[i * d + a];
                if qa <= 0.0 {
                    continue;
                }
                let srow = &span.kv[a * dvw..(a + 1) * dvw];
                let dphi = srow.iter().zip(&dnum).map(|(x, y)| x * y).sum::<f64>()
                    + dden * span.ksum[a];
                dq[i * d + a] = dphi;
                for (acc, &dn) in dkv[a * dvw..(a + 1) * dvw].iter_mut().zip(&dnum) {
                    *acc += qa * dn;
                }
                dksum[a] += dden * qa;
            }
        }
        for j in s..e {
            let vj = &vd[j * dvw..(j + 1) * dvw];
            let dvj = &mut dv[j * dvw..(j + 1) * dvw];
            for a in 0..d {
                let ka = kd[j * d + a];
                if ka <= 0.0 {
                    continue;
                }
                let drow = &dkv[a * dvw..(a + 1) * dvw];
                dk[j * d + a] = drow.iter().zip(vj).map(|(x, y)| x * y).sum::<f64>() + dksum[a];
                for (acc, &g) in dvj.iter_mut().zip(drow) {
                    *acc += ka * g;
                }
            }
        }
    }
    Ok((
        Tensor::new(&[l, d], dq)?,
        Tensor::new(&[l, d], dk)?,
        Tensor::new(&[l, dvw], dv)?,
    ))
}

pub fn ldt_attention_backward(
    cache: &LdtCache,
    p: &LdtWeights,
    grad_out: &Tensor,
) -> Result<LdtGrads> {
    let (dq, dk, dv) = ldt_kernel_backward(cache, p.window, grad_out)?;
    let (dx, dws) = project_backward(&cache.x, &[(&p.w_q, &dq), (&p.w_k, &dk), (&p.w_v, &dv)])?;
    let mut dws = dws.into_iter();
    Ok(LdtGrads {
        dx,
        dw_q: dws.next().unwrap(),
        dw_k: dws.next().unwrap(),
        dw_v: dws.next().unwrap(),
    })
}

/// Frame-wise feature modulation `(cond w_gamma + 1) * x + cond w_beta`.
pub fn film(x: &Tensor, cond: &Tensor, w_gamma: &Tensor, w_beta: &Tensor) -> Result<Tensor> {
    Ok(film_cached(x, cond, w_gamma, w_beta)?.0)
}

pub struct FilmCache {
    x: Tensor,
    cond: Tensor,
    gamma: Vec<f64>,
}

pub fn film_cached(
    x: &Tensor,
    cond: &Tensor,
    w_gamma: &Tensor,
    w_beta: &Tensor,
) -> Result<(Tensor, FilmCache)> {
    let (l, d) = dims2(x, "film")?;
    let (lc, c) = dims2(cond, "film")?;
    if lc != l || w_gamma.shape() != [c, d] || w_beta.shape() != [c, d] {
        return Err(Error::shape(
            "film",
            format!(
                "x {:?}, cond {:?}, w_gamma {:?}, w_beta {:?}",
                x.shape(),
                cond.shape(),
                w_gamma.shape(),
                w_beta.shape()
            ),
        ));
    }
    let mut gamma = vec![1.0; l * d];
    gemm_acc(cond.data(), w_gamma.data(), &mut gamma, l, c, d);
    let mut out = vec![0.0; l * d];
    gemm_acc(cond.data(), w_beta.data(), &mut out, l, c, d);
    for ((o, &g), &xv) in out.iter_mut().zip(&gamma).zip(x.data()) {
        *o += g * xv;
    }
    Ok((
        Tensor::new(&[l, d], out)?,
        FilmCache {
            x: x.clone(),
            cond: cond.clone(),
            gamma,
        },
    ))
}

pub struct FilmGrads {
    pub dx: Tensor,
    pub dcond: Tensor,
    pub dw_gamma: Tensor,
    pub dw_beta: Tensor,
}

pub fn film_backward(
    cache: &FilmCache,
    w_gamma: &Tensor,
    w_beta: &Tensor,
    grad_out: &Tensor,
) -> Result<FilmGrads> {
    let (l, d) = (cache.x.rows(), cache.x.cols());
    let c = cache.cond.cols();
    if grad_out.shape() != [l, d] {
        return Err(Error::shape("film_backward", format!("{:?}", grad_out.shape())));
    }
    let go = grad_out.data();
    let dx: Vec<f64> = go.iter().zip(&cache.gamma).map(|(g, m)| g * m).collect();
    let dgamma: Vec<f64> = go.iter().zip(cache.x.data()).map(|(g, x)| g * x).collect();
    let mut dw_gamma = vec![0.0; c * d];
    gemm_tn_acc(cache.cond.data(), &dgamma, &mut dw_gamma, l, c, d);
    let mut dw_beta = vec![0.0; c * d];
    gemm_tn_acc(cache.cond.data(), go, &mut dw_beta, l, c, d);
    let mut dcond = vec![0.0; l * c];
    gemm_nt_acc(&dgamma, w_gamma.data(), &mut dcond, l, d, c);
    gemm_nt_acc(go, w_beta.data(), &mut dcond, l, d, c);
    Ok(FilmGrads {
        dx: Tensor::new(&[l, d], dx)?,
        dcond: Tensor::new(&[l, c], dcond)?,
        dw_gamma: Tensor::new(&[c, d], dw_gamma)?,
        dw_beta: Tensor::new(&[c, d], dw_beta)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn diff_weights(d: usize, heads: usize, lambda: f64, r: &mut ChaCha8Rng) -> DiffAttnWeights {
        DiffAttnWeights {
            w_q: Tensor::randn(&[d, 2 * d], 0.5, r),
            w_k: Tensor::randn(&[d, 2 * d], 0.5, r),
            w_v: Tensor::randn(&[d, 2 * d], 0.5, r),
            lambda: Tensor::filled(&[heads], lambda),
            heads,
        }
    }

    #[test]
    fn full_attention_single_frame_returns_value_row() {
        let mut r = rng(1);
        let x = Tensor::randn(&[1, 4], 1.0, &mut r);
        let w: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[4, 4], 1.0, &mut r)).collect();
        let out = full_attention(&x, &w[0], &w[1], &w[2]).unwrap();
        let v = crate::tensor::matmul(&x, &w[2]).unwrap();
        assert!(out.max_abs_diff(&v) < 1e-15);
    }

    #[test]
    fn identical_keys_average_values() {
        let mut r = rng(2);
        let q = Tensor::randn(&[5, 3], 1.0, &mut r);
        let key_row = Tensor::randn(&[1, 3], 1.0, &mut r);
        let k = Tensor::from_fn(&[5, 3], |i| key_row.data()[i % 3]);
        let v = Tensor::randn(&[5, 2], 1.0, &mut r);
        let out = attend(&q, &k, &v, 0.5).unwrap();
        for c in 0..2 {
            let mean: f64 = (0..5).map(|j| v.data()[j * 2 + c]).sum::<f64>() / 5.0;
            for i in 0..5 {
                assert!((out.data()[i * 2 + c] - mean).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn diff_attention_single_frame() {
        let mut r = rng(3);
        let p = diff_weights(4, 2, 0.3, &mut r);
        let x = Tensor::randn(&[1, 4], 1.0, &mut r);
        let out = diff_attention(&x, &p).unwrap();
        let v = crate::tensor::matmul(&x, &p.w_v).unwrap();
        assert!(out.max_abs_diff(&v.scale(0.7)) < 1e-14);
    }

    #[test]
    fn diff_attention_validates_heads() {
        let mut r = rng(4);
        let mut p = diff_weights(4, 3, 0.5, &mut r);
        let x = Tensor::randn(&[3, 4], 1.0, &mut r);
        assert!(matches!(diff_attention(&x, &p), Err(Error::Config(_))));
        p.heads = 2;
        assert!(matches!(diff_attention(&x, &p), Err(Error::Shape { .. })));
    }

    #[test]
    fn ldt_zero_query_row_maps_to_zero() {
        let q = Tensor::new(&[2, 2], vec![-1.0, -2.0, 1.0, 0.5]).unwrap();
        let k = Tensor::new(&[2, 2], vec![1.0, 1.0, 0.5, 2.0]).unwrap();
        let v = Tensor::new(&[2, 2], vec![3.0, -1.0, 2.0, 4.0]).unwrap();
        let out = ldt_kernel(&q, &k, &v, 8, LDT_GUARD).unwrap();
        assert_eq!(&out.data()[..2], &[0.0, 0.0]);
        assert!(out.data()[2] != 0.0);
    }

    #[test]
    fn ldt_identical_nonnegative_keys_average_values() {
        let mut r = rng(5);
        let q = Tensor::randn(&[6, 3], 1.0, &mut r).map(f64::abs);
        let k = Tensor::from_fn(&[6, 3], |i| [0.4, 1.2, 0.7][i % 3]);
        let v = Tensor::randn(&[6, 2], 1.0, &mut r);
        let out = ldt_kernel(&q, &k, &v, 6, LDT_GUARD).unwrap();
        for c in 0..2 {
            let mean: f64 = (0..6).map(|j| v.data()[j * 2 + c]).sum::<f64>() / 6.0;
            for i in 0..6 {
                assert!((out.data()[i * 2 + c] - mean).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn ldt_single_frame_is_value_row() {
        let q = Tensor::new(&[1, 2], vec![0.5, 1.0]).unwrap();
        let k = Tensor::new(&[1, 2], vec![2.0, 0.1]).unwrap();
        let v = Tensor::new(&[1, 3], vec![1.0, -2.0, 0.25]).unwrap();
        let out = ldt_kernel(&q, &k, &v, 4, LDT_GUARD).unwrap();
        assert!(out.max_abs_diff(&v) < 1e-8);
    }

    #[test]
    fn windows_tile_the_sequence() {
        let w: Vec<_> = windows(10, 4).collect();
        assert_eq!(w, vec![(0, 4), (4, 8), (8, 10)]);
        assert_eq!(windows(3, 64).collect::<Vec<_>>(), vec![(0, 3)]);
    }

    #[test]
    fn film_examples() {
        let mut r = rng(6);
        let x = Tensor::randn(&[4, 3], 1.0, &mut r);
        let cond = Tensor::randn(&[4, 2], 1.0, &mut r);
        let zero_w = Tensor::zeros(&[2, 3]);
        assert_eq!(film(&x, &cond, &zero_w, &zero_w).unwrap(), x);
        let wg = Tensor::randn(&[2, 3], 1.0, &mut r);
        let wb = Tensor::randn(&[2, 3], 1.0, &mut r);
        assert_eq!(film(&x, &Tensor::zeros(&[4, 2]), &wg, &wb).unwrap(), x);
        let shift = film(&Tensor::zeros(&[4, 3]), &cond, &wg, &wb).unwrap();
        let beta = crate::tensor::matmul(&cond, &wb).unwrap();
        assert!(shift.max_abs_diff(&beta) < 1e-15);
        assert!(film(&x, &Tensor::zeros(&[3, 2]), &wg, &wb).is_err());
    }

    #[test]
    fn counted_macs_match_closed_forms() {
        let mut r = rng(7);
        let (l, d) = (10, 4);
        let x = Tensor::randn(&[l, d], 1.0, &mut r);
        let p = LdtWeights {
            w_q: Tensor::randn(&[d, d], 1.0, &mut r),
            w_k: Tensor::randn(&[d, d], 1.0, &mut r),
            w_v: Tensor::randn(&[d, d], 1.0, &mut r),
            window: 4,
            guard: LDT_GUARD,
        };
        let (_, macs) = counter::measure(|| ldt_attention(&x, &p).unwrap());
        assert_eq!(macs as usize, 3 * l * d * d + l * d * d + l * d * (d + 1));
        let (_, macs) = counter::measure(|| full_attention(&x, &p.w_q, &p.w_k, &p.w_v).unwrap());
        assert_eq!(macs as usize, 3 * l * d * d + 2 * l * l * d);
    }
}
