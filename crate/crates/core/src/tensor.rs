//! Dense row-major `f64` tensors and the handful of kernels the model needs.
//!
//! Loop orders are fixed so that identical inputs always produce bit-identical
//! outputs. Matrix kernels operate on the trailing two dimensions only when the
//! tensor is rank 2; higher-rank inputs are flattened to `rows x cols` by the
//! callers that need it (see [`Tensor::rows`]).

use rand::Rng;
use rand_distr::StandardNormal;

use crate::counter;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Samples i.i.d. `N(0, std^2)` entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| std * rng.sample::<f64, _>(StandardNormal))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the trailing dimension (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of all leading dimensions.
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip(&self, other: &Self, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "add_assign",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "dot",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Fails with a numeric error naming `block` if any entry is NaN or infinite.
    pub fn ensure_finite(&self, block: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::numeric(block))
        }
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.matrix_dims("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(&[n, m], out)
    }

    fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(Error::shape(
                op,
                format!("expected a matrix, got shape {:?}", self.shape),
            )),
        }
    }
}

/// `c += a * b` on raw row-major slices (`a`: m x k, `b`: k x n).
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    counter::record(m * k * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_ip * bv;
            }
        }
    }
}

/// `c += a^T * b` (`a`: k x m, `b`: k x n, `c`: m x n).
pub(crate) fn gemm_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], k: usize, m: usize, n: usize) {
    counter::record(m * k * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_pi * bv;
            }
        }
    }
}

/// `c += a * b^T` (`a`: m x k, `b`: n x k, `c`: m x n).
pub(crate) fn gemm_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    counter::record(m * k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            c[i * n + j] += acc;
        }
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.matrix_dims("matmul")?;
    let (k2, n) = b.matrix_dims("matmul")?;
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("inner dimensions {m}x{k} * {k2}x{n}"),
        ));
    }
    let mut out = vec![0.0; m * n];
    gemm_acc(&a.data, &b.data, &mut out, m, k, n);
    Tensor::new(&[m, n], out)
}

/// `a^T * b` without materialising the transpose.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = a.matrix_dims("matmul_tn")?;
    let (k2, n) = b.matrix_dims("matmul_tn")?;
    if k != k2 {
        return Err(Error::shape(
            "matmul_tn",
            format!("leading dimensions {k} vs {k2}"),
        ));
    }
    let mut out = vec![0.0; m * n];
    gemm_tn_acc(&a.data, &b.data, &mut out, k, m, n);
    Tensor::new(&[m, n], out)
}

/// `a * b^T` without materialising the transpose.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.matrix_dims("matmul_nt")?;
    let (n, k2) = b.matrix_dims("matmul_nt")?;
    if k != k2 {
        return Err(Error::shape(
            "matmul_nt",
            format!("trailing dimensions {k} vs {k2}"),
        ));
    }
    let mut out = vec![0.0; m * n];
    gemm_nt_acc(&a.data, &b.data, &mut out, m, k, n);
    Tensor::new(&[m, n], out)
}

/// In-place numerically stable softmax of one row.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Row-wise softmax over the trailing dimension.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    x.ensure_finite("softmax_rows")?;
    let mut out = x.clone();
    let c = out.cols();
    if c == 0 {
        return Ok(out);
    }
    for row in out.data.chunks_mut(c) {
        softmax_in_place(row);
    }
    Ok(out)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Affine map `x * w + b` over the trailing dimension of `x`.
pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (din, dout) = w.matrix_dims("linear_forward")?;
    if x.cols() != din || b.shape() != [dout] {
        return Err(Error::shape(
            "linear_forward",
            format!(
                "x {:?}, w {:?}, b {:?}",
                x.shape(),
                w.shape(),
                b.shape()
            ),
        ));
    }
    let rows = x.rows();
    let mut out = Vec::with_capacity(rows * dout);
    for _ in 0..rows {
        out.extend_from_slice(&b.data);
    }
    gemm_acc(&x.data, &w.data, &mut out, rows, din, dout);
    let mut shape = x.shape.clone();
    if let Some(last) = shape.last_mut() {
        *last = dout;
    } else {
        shape.push(dout);
    }
    Tensor::new(&shape, out)
}

pub struct LinearGrads {
    pub dx: Tensor,
    pub dw: Tensor,
    pub db: Tensor,
}

/// Vector-Jacobian product of [`linear_forward`].
pub fn linear_backward(x: &Tensor, w: &Tensor, grad_out: &Tensor) -> Result<LinearGrads> {
    let (din, dout) = w.matrix_dims("linear_backward")?;
    let rows = x.rows();
    if x.cols() != din || grad_out.cols() != dout || grad_out.rows() != rows {
        return Err(Error::shape(
            "linear_backward",
            format!(
                "x {:?}, w {:?}, grad {:?}",
                x.shape(),
                w.shape(),
                grad_out.shape()
            ),
        ));
    }
    let mut dx = vec![0.0; rows * din];
    gemm_nt_acc(&grad_out.data, &w.data, &mut dx, rows, dout, din);
    let mut dw = vec![0.0; din * dout];
    gemm_tn_acc(&x.data, &grad_out.data, &mut dw, rows, din, dout);
    let mut db = vec![0.0; dout];
    for r in grad_out.data.chunks(dout) {
        for (acc, g) in db.iter_mut().zip(r) {
            *acc += g;
        }
    }
    Ok(LinearGrads {
        dx: Tensor::new(x.shape(), dx)?,
        dw: Tensor::new(&[din, dout], dw)?,
        db: Tensor::new(&[dout], db)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let b = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(matmul(&Tensor::eye(3), &b).unwrap(), b);
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let col = t(&[2, 1], &[0.0, 1.0]);
        assert_eq!(matmul(&a, &col).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &a), Err(Error::Shape { .. })));
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let c = Tensor::randn(&[6, 3], 1.0, &mut rng);
        let tn = matmul_tn(&a, &b).unwrap();
        let explicit = matmul(&a.transpose().unwrap(), &b).unwrap();
        assert!(tn.max_abs_diff(&explicit) < 1e-14);
        let nt = matmul_nt(&a, &c).unwrap();
        let explicit = matmul(&a, &c.transpose().unwrap()).unwrap();
        assert!(nt.max_abs_diff(&explicit) < 1e-14);
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&t(&[1, 3], &[0.0, 0.0, 0.0])).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax_rows(&t(&[1, 1], &[5.0])).unwrap();
        assert_eq!(s.data(), &[1.0]);
        let s = softmax_rows(&t(&[1, 2], &[0.0, 3f64.ln()])).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let x = t(&[1, 2], &[0.0, f64::NAN]);
        assert!(matches!(softmax_rows(&x), Err(Error::Numeric { .. })));
    }

    #[test]
    fn relu_examples() {
        assert_eq!(relu(&t(&[3], &[-1.0, 0.0, 2.0])).data(), &[0.0, 0.0, 2.0]);
        assert!(relu(&t(&[2], &[-3.0, -0.5])).data().iter().all(|&v| v == 0.0));
        let pos = t(&[3], &[0.0, 1.5, 7.0]);
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn linear_examples() {
        let x = t(&[2, 2], &[1.0, -2.0, 0.5, 3.0]);
        let same = linear_forward(&x, &Tensor::eye(2), &Tensor::zeros(&[2])).unwrap();
        assert_eq!(same, x);
        let b = t(&[2], &[0.25, -1.0]);
        let z = linear_forward(&Tensor::zeros(&[3, 2]), &Tensor::eye(2), &b).unwrap();
        for r in 0..3 {
            assert_eq!(z.row(r), b.data());
        }
        let y = linear_forward(
            &t(&[2], &[1.0, 1.0]),
            &t(&[2, 1], &[2.0, 3.0]),
            &t(&[1], &[-1.0]),
        )
        .unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert!(linear_forward(&x, &Tensor::zeros(&[3, 1]), &Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn linear_over_leading_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let w = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let b = Tensor::randn(&[5], 1.0, &mut rng);
        let y = linear_forward(&x, &w, &b).unwrap();
        assert_eq!(y.shape(), &[2, 3, 5]);
        let flat = linear_forward(&x.clone().reshape(&[6, 4]).unwrap(), &w, &b).unwrap();
        assert_eq!(y.data(), flat.data());
    }

    #[test]
    fn counter_tracks_matmul_macs() {
        let a = Tensor::zeros(&[3, 4]);
        let b = Tensor::zeros(&[4, 5]);
        let (_, macs) = counter::measure(|| matmul(&a, &b).unwrap());
        assert_eq!(macs, 60);
    }

    proptest::proptest! {
        #[test]
        fn softmax_rows_sum_to_one(row in proptest::collection::vec(-1e3f64..1e3, 1..40)) {
            let n = row.len();
            let s = softmax_rows(&Tensor::new(&[1, n], row).unwrap()).unwrap();
            let total: f64 = s.data().iter().sum();
            proptest::prop_assert!((total - 1.0).abs() <= 1e-12);
            proptest::prop_assert!(s.data().iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn matmul_is_deterministic(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::randn(&[5, 7], 1.0, &mut rng);
            let b = Tensor::randn(&[7, 3], 1.0, &mut rng);
            proptest::prop_assert_eq!(matmul(&a, &b).unwrap(), matmul(&a, &b).unwrap());
        }
    }
}
