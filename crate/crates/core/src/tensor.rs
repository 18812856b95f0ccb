//! Dense row-major tensors and the value-level numeric kernels shared by the
//! autodiff tape, the losses and the evaluation code.

use std::cmp::Ordering;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Norm below which a vector is considered degenerate for normalization.
pub const NORM_EPS: f64 = 1e-12;

/// Floating point element type. Implemented for `f32` (training) and `f64`
/// (everything that is checked against an oracle).
pub trait Real:
    Float
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const DTYPE: &'static str;
    const BYTES: usize;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// `exp` for the recurrent gate nonlinearities. Implementations may trade
    /// the last ulp for a branch-free body that vectorizes.
    #[inline]
    fn exp_fast(self) -> Self {
        self.exp()
    }

    /// Raw strided GEMM: `C = alpha * A * B + beta * C`.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-overlapping matrices of
    /// the given dimensions.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        let mut b = [0u8; 8];
        b.copy_from_slice(&bytes[..8]);
        f64::from_le_bytes(b)
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        let mut b = [0u8; 4];
        b.copy_from_slice(&bytes[..4]);
        f32::from_le_bytes(b)
    }
    #[inline]
    fn exp_fast(self) -> Self {
        // Cody-Waite reduction to |r| <= ln2/2, degree-6 polynomial, then
        // scaling by 2^n through the exponent bits.
        const ROUND: f32 = 12_582_912.0;
        let x = self.clamp(-87.0, 88.0);
        let n = (x * std::f32::consts::LOG2_E + ROUND) - ROUND;
        let r = x - n * 0.693_359_4 + n * 2.121_944_4e-4;
        let p = ((((1.987_569_1e-4 * r + 1.398_199_9e-3) * r + 8.333_452e-3) * r + 4.166_579_6e-2) * r
            + 0.166_666_65)
            * r
            + 0.5;
        let y = p * r * r + r + 1.0;
        y * f32::from_bits(((n as i32 + 127) as u32) << 23)
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// `C = op(A) * op(B) + beta * C` on row-major buffers.
///
/// `op(A)` is `m x k`; when `trans_a` is set, `a` is stored as `k x m`.
/// Likewise `op(B)` is `k x n` and stored as `n x k` when `trans_b` is set.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<F: Real>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    a: &[F],
    b: &[F],
    beta: F,
    c: &mut [F],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs buffer");
    assert_eq!(b.len(), k * n, "gemm: rhs buffer");
    assert_eq!(c.len(), m * n, "gemm: output buffer");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: buffer lengths were checked against the dimensions above and
    // `c` is a distinct mutable borrow.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            F::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F = f64> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![F::zero(); numel],
        }
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: F) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<F>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds an `rows x cols` matrix; panics on a length mismatch.
    pub fn matrix(rows: usize, cols: usize, data: Vec<F>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix: {rows}x{cols} needs {} values", rows * cols);
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = F::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> F {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[F] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Dimension {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::matrix(c, r, out)
    }

    pub fn norm(&self) -> F {
        self.data.iter().map(|&v| v * v).sum::<F>().sqrt()
    }
}

fn check_matrix<F: Real>(op: &'static str, t: &Tensor<F>) -> Result<()> {
    if t.shape().len() != 2 {
        return Err(Error::Dimension {
            op,
            left: t.shape().to_vec(),
            right: vec![],
        });
    }
    Ok(())
}

/// Matrix product of an `m x k` and a `k x n` matrix.
pub fn matmul<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    check_matrix("matmul", a)?;
    check_matrix("matmul", b)?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::Dimension {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = vec![F::zero(); m * n];
    gemm(false, false, m, n, k, a.data(), b.data(), F::zero(), &mut out);
    Ok(Tensor::matrix(m, n, out))
}

/// `A * B^T` for `A: m x d`, `B: n x d`.
pub fn matmul_nt<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    check_matrix("matmul_nt", a)?;
    check_matrix("matmul_nt", b)?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (n, k2) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::Dimension {
            op: "matmul_nt",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = vec![F::zero(); m * n];
    gemm(false, true, m, n, k, a.data(), b.data(), F::zero(), &mut out);
    Ok(Tensor::matrix(m, n, out))
}

fn check_temperature<F: Real>(tau: F) -> Result<()> {
    if !(tau > F::zero()) || !tau.is_finite() {
        return Err(Error::Parameter(format!("temperature must be > 0, got {tau}")));
    }
    Ok(())
}

fn check_finite<F: Real>(what: &str, values: &[F]) -> Result<()> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Input(format!("{what}: non-finite value at index {i}")));
    }
    Ok(())
}

/// Writes `exp(l_i/tau - max/tau)` normalized into `out`; returns log of the
/// partition function of the shifted logits.
pub(crate) fn softmax_into<F: Real>(logits: &[F], inv_tau: F, out: &mut [F]) -> F {
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for (o, &l) in out.iter_mut().zip(logits) {
        let e = ((l - max) * inv_tau).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    sum.ln()
}

/// Temperature-scaled softmax, stabilized by subtracting the maximum logit.
pub fn softmax<F: Real>(logits: &[F], tau: F) -> Result<Vec<F>> {
    check_temperature(tau)?;
    check_finite("softmax", logits)?;
    if logits.is_empty() {
        return Err(Error::Input("softmax over empty vector".into()));
    }
    let mut out = vec![F::zero(); logits.len()];
    softmax_into(logits, tau.recip(), &mut out);
    Ok(out)
}

/// `log softmax(logits / tau)`.
pub fn log_softmax<F: Real>(logits: &[F], tau: F) -> Result<Vec<F>> {
    check_temperature(tau)?;
    check_finite("log_softmax", logits)?;
    if logits.is_empty() {
        return Err(Error::Input("log_softmax over empty vector".into()));
    }
    let inv = tau.recip();
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let lse = logits
        .iter()
        .map(|&l| ((l - max) * inv).exp())
        .sum::<F>()
        .ln();
    Ok(logits.iter().map(|&l| (l - max) * inv - lse).collect())
}

fn check_distribution<F: Real>(what: &str, p: &[F]) -> Result<()> {
    check_finite(what, p)?;
    if p.iter().any(|&v| v < F::zero()) {
        return Err(Error::Input(format!("{what}: negative probability")));
    }
    let s: f64 = p.iter().map(|v| v.as_f64()).sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(Error::Input(format!("{what}: sums to {s}, expected 1")));
    }
    Ok(())
}

/// `KL(p || q) = sum_i p_i log(p_i / q_i)` with `0 log 0 = 0`.
pub fn kl_div<F: Real>(p: &[F], q: &[F]) -> Result<F> {
    if p.len() != q.len() {
        return Err(Error::Dimension {
            op: "kl_div",
            left: vec![p.len()],
            right: vec![q.len()],
        });
    }
    check_distribution("kl_div p", p)?;
    check_distribution("kl_div q", q)?;
    let mut acc = F::zero();
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi == F::zero() {
            continue;
        }
        if qi == F::zero() {
            return Err(Error::NumericDomain(format!(
                "kl_div: q[{i}] = 0 where p[{i}] = {pi}"
            )));
        }
        acc += pi * (pi / qi).ln();
    }
    Ok(acc)
}

/// Descending order with ties broken by the smaller index.
pub(crate) fn rank_order<F: Real>(values: &[F], a: usize, b: usize) -> Ordering {
    values[b]
        .partial_cmp(&values[a])
        .unwrap_or(Ordering::Equal)
        .then(a.cmp(&b))
}

/// The `k` largest entries in descending order together with their indices.
/// Equal values keep ascending index order.
pub fn topk<F: Real>(values: &[F], k: usize) -> Result<(Vec<F>, Vec<usize>)> {
    if k == 0 || k > values.len() {
        return Err(Error::Parameter(format!(
            "topk: need 1 <= k <= {}, got k = {k}",
            values.len()
        )));
    }
    let mut idx: Vec<usize> = (0..values.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, |&a, &b| rank_order(values, a, b));
        idx.truncate(k);
    }
    idx.sort_unstable_by(|&a, &b| rank_order(values, a, b));
    let vals = idx.iter().map(|&i| values[i]).collect();
    Ok((vals, idx))
}

/// Index of the maximum value; ties go to the smallest index.
pub fn argmax<F: Real>(values: &[F]) -> Option<usize> {
    (0..values.len()).min_by(|&a, &b| rank_order(values, a, b))
}

pub fn l2_normalize<F: Real>(v: &[F]) -> Result<Vec<F>> {
    let norm = v.iter().map(|&x| x * x).sum::<F>().sqrt();
    if !(norm.as_f64() > NORM_EPS) {
        return Err(Error::DegenerateInput(format!(
            "cannot normalize vector with norm {norm}"
        )));
    }
    Ok(v.iter().map(|&x| x / norm).collect())
}

pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_matrix(&mut rng, 4, 3);
        assert_eq!(matmul(&a, &Tensor::identity(3)).unwrap(), a);
        let z = matmul(&a, &Tensor::zeros(&[3, 5])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_matrix(&mut rng, 5, 4);
        let b = random_matrix(&mut rng, 4, 3);
        let c = matmul(&a, &b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut s = 0.0;
                for t in 0..4 {
                    s += a.data()[i * 4 + t] * b.data()[t * 3 + j];
                }
                assert!((c.data()[i * 3 + j] - s).abs() < 1e-12);
            }
        }
        let bt = b.transpose();
        assert!(matmul_nt(&a, &bt)
            .unwrap()
            .data()
            .iter()
            .zip(c.data())
            .all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let err = matmul(&Tensor::<f64>::zeros(&[2, 3]), &Tensor::zeros(&[4, 2])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.3, 0.3, 0.3, 0.3], 0.05).unwrap();
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let p = softmax(&[2f64.ln(), 0.0], 1.0).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!(matches!(softmax(&[1.0], 0.0), Err(Error::Parameter(_))));
        assert!(matches!(softmax(&[1.0, f64::NAN], 1.0), Err(Error::Input(_))));
    }

    #[test]
    fn softmax_small_temperature_matches_direct_formula() {
        // Direct formula evaluated on logits bounded in [-1, 1]: exp(l/0.05)
        // stays below e^20, so no stabilization is needed in the oracle.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p = softmax(&logits, 0.05).unwrap();
        let e: Vec<f64> = logits.iter().map(|l| (l / 0.05).exp()).collect();
        let z: f64 = e.iter().sum();
        for (pi, ei) in p.iter().zip(&e) {
            assert!((pi - ei / z).abs() < 1e-12);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn kl_examples() {
        let p = [0.2, 0.5, 0.3];
        assert_eq!(kl_div(&p, &p).unwrap(), 0.0);
        let v = kl_div(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);
        assert!(matches!(
            kl_div(&[0.5, 0.5], &[1.0, 0.0]),
            Err(Error::NumericDomain(_))
        ));
        // zero in p with zero in q is fine
        assert_eq!(kl_div(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn kl_matches_summation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut draw = || {
            let raw: Vec<f64> = (0..16).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / s).collect::<Vec<_>>()
        };
        let (p, q) = (draw(), draw());
        let mut oracle = 0.0;
        for i in 0..16 {
            oracle += p[i] * p[i].ln() - p[i] * q[i].ln();
        }
        assert!((kl_div(&p, &q).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn topk_examples() {
        let (v, i) = topk(&[0.1, 0.9, 0.5], 2).unwrap();
        assert_eq!(v, vec![0.9, 0.5]);
        assert_eq!(i, vec![1, 2]);
        let (v, i) = topk(&[0.1, 0.9, 0.5], 3).unwrap();
        assert_eq!(v, vec![0.9, 0.5, 0.1]);
        assert_eq!(i, vec![1, 2, 0]);
        assert!(matches!(topk(&[1.0], 2), Err(Error::Parameter(_))));
        let (_, i) = topk(&[0.5, 0.7, 0.5, 0.7], 3).unwrap();
        assert_eq!(i, vec![1, 3, 0]);
    }

    #[test]
    fn topk_large_matches_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v: Vec<f64> = (0..1000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut order: Vec<usize> = (0..1000).collect();
        order.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap().then(a.cmp(&b)));
        let (_, idx) = topk(&v, 37).unwrap();
        assert_eq!(idx, order[..37]);
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(l2_normalize(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
        assert_eq!(l2_normalize(&[0.0, 1.0, 0.0]).unwrap(), vec![0.0, 1.0, 0.0]);
        assert!(matches!(
            l2_normalize(&[0.0, 0.0]),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn tensor_shape_invariant() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::new(vec![2, 3], vec![0.0f64; 6]).unwrap();
        assert_eq!(t.rows(), 2);
        assert_eq!(t.cols(), 3);
    }

    #[test]
    fn fast_exp_tracks_libm() {
        let mut worst = 0.0f32;
        for i in -8700..=8800 {
            let x = i as f32 / 100.0;
            let rel = ((x.exp_fast() - x.exp()) / x.exp()).abs();
            worst = worst.max(rel);
        }
        assert!(worst < 4e-7, "{worst}");
        assert_eq!(0.0f32.exp_fast(), 1.0);
        assert!(f32::NAN.exp_fast().is_nan());
        assert_eq!(1.5f64.exp_fast(), 1.5f64.exp());
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(logits in prop::collection::vec(-50.0f64..50.0, 1..64), tau in 0.01f64..5.0) {
            let p = softmax(&logits, tau).unwrap();
            let s: f64 = p.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }

        #[test]
        fn softmax_strictly_positive_for_moderate_logits(logits in prop::collection::vec(-5.0f64..5.0, 1..64), tau in 0.05f64..5.0) {
            let p = softmax(&logits, tau).unwrap();
            prop_assert!(p.iter().all(|&v| v > 0.0));
        }

        #[test]
        fn kl_nonnegative(raw_p in prop::collection::vec(0.001f64..1.0, 2..20), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let raw_q: Vec<f64> = raw_p.iter().map(|_| rng.random_range(0.001..1.0)).collect();
            let norm = |v: &[f64]| { let s: f64 = v.iter().sum(); v.iter().map(|x| x / s).collect::<Vec<_>>() };
            let (p, q) = (norm(&raw_p), norm(&raw_q));
            prop_assert!(kl_div(&p, &q).unwrap() >= -1e-15);
            prop_assert!(kl_div(&p, &p).unwrap().abs() < 1e-9);
        }

        #[test]
        fn topk_agrees_with_full_sort(values in prop::collection::vec(0u8..8, 1..200), kfrac in 0.0f64..1.0) {
            // small integer range forces plenty of duplicates
            let v: Vec<f64> = values.iter().map(|&x| x as f64).collect();
            let k = 1 + ((v.len() - 1) as f64 * kfrac) as usize;
            let mut order: Vec<usize> = (0..v.len()).collect();
            order.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap().then(a.cmp(&b)));
            let (vals, idx) = topk(&v, k).unwrap();
            prop_assert_eq!(&idx[..], &order[..k]);
            prop_assert!(vals.windows(2).all(|w| w[0] >= w[1]));
        }

        #[test]
        fn normalize_gives_unit_norm(v in prop::collection::vec(-100.0f64..100.0, 1..32)) {
            prop_assume!(v.iter().map(|x| x * x).sum::<f64>().sqrt() > 1e-6);
            let u = l2_normalize(&v).unwrap();
            let n = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-9);
        }
    }
}
