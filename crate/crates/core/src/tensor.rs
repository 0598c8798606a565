//! Dense row-major tensors and the shared numeric kernels.
//!
//! Training runs in f32 and gradient checking in f64, so the kernels are
//! generic over [`Scalar`]. Matrix products go through `matrixmultiply`,
//! which is deterministic per shape on a single thread; everything else is
//! plain loops. The tape in [`crate::graph`] and the cached inference paths
//! in [`crate::model`] call the same kernels, which keeps their outputs
//! aligned to float rounding rather than to luck.

use std::sync::Arc;

/// Element type of all tensors: f32 for training/inference, f64 for
/// finite-difference gradient checks.
pub trait Scalar:
    num_traits::Float + std::fmt::Debug + std::fmt::Display + Default + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    /// General matrix multiply `C = alpha * A B + beta * C` with explicit
    /// strides, row-major buffers.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            );
        }
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            );
        }
    }
}

/// Row-major tensor with copy-on-write storage. Cloning is cheap; the tape
/// relies on that to capture values for backward passes without copying.
#[derive(Clone, Debug)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match buffer length {}",
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::from_vec(shape, vec![T::zero(); shape.iter().product()])
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor::from_vec(shape, vec![value; shape.iter().product()])
    }

    pub fn scalar(value: T) -> Self {
        Tensor::from_vec(&[1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on rank-{} tensor", self.shape.len());
        self.shape[0]
    }

    /// Columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on rank-{} tensor", self.shape.len());
        self.shape[1]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable view; clones the buffer first if it is shared.
    pub fn data_mut(&mut self) -> &mut [T] {
        let v: &mut Vec<T> = Arc::make_mut(&mut self.data);
        v.as_mut_slice()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let d = self.cols();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor::from_vec(&self.shape, self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn zip_map(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::from_vec(&self.shape, data)
    }

    /// `self += alpha * other`, used for gradient accumulation.
    pub fn add_assign_scaled(&mut self, other: &Tensor<T>, alpha: T) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data_mut().iter_mut().zip(other.data.iter()) {
            *a = *a + alpha * b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_vec(
            &self.shape,
            self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
        )
    }
}

/// `A op B` where `ta`/`tb` transpose the logical operand without copying.
pub fn matmul<T: Scalar>(a: &Tensor<T>, ta: bool, b: &Tensor<T>, tb: bool) -> Tensor<T> {
    let (m, k) = if ta { (a.cols(), a.rows()) } else { (a.rows(), a.cols()) };
    let (kb, n) = if tb { (b.cols(), b.rows()) } else { (b.rows(), b.cols()) };
    assert_eq!(k, kb, "matmul inner dim mismatch: {k} vs {kb}");
    let mut c = Tensor::zeros(&[m, n]);
    matmul_into(a, ta, b, tb, T::zero(), c.data_mut());
    c
}

/// As [`matmul`] but writing `alpha=1` into a caller-owned buffer with the
/// given `beta`.
pub fn matmul_into<T: Scalar>(
    a: &Tensor<T>,
    ta: bool,
    b: &Tensor<T>,
    tb: bool,
    beta: T,
    c: &mut [T],
) {
    let (m, k) = if ta { (a.cols(), a.rows()) } else { (a.rows(), a.cols()) };
    let n = if tb { b.rows() } else { b.cols() };
    let (rsa, csa) = if ta { (1, a.cols() as isize) } else { (a.cols() as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols() as isize) } else { (b.cols() as isize, 1) };
    assert_eq!(c.len(), m * n, "matmul output buffer mismatch");
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a.data(),
        rsa,
        csa,
        b.data(),
        rsb,
        csb,
        beta,
        c,
        n as isize,
        1,
    );
}

/// Raw-slice gemm for code that works outside [`Tensor`] (kv-cached
/// attention). Plain row-major, no transposes.
pub fn gemm_slices<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        k as isize,
        1,
        b,
        n as isize,
        1,
        T::zero(),
        c,
        n as isize,
        1,
    );
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

/// In-place softmax over `row[..active]`; entries past `active` are zeroed.
/// Max-subtracted for stability.
pub fn softmax_prefix<T: Scalar>(row: &mut [T], active: usize) {
    debug_assert!(active >= 1 && active <= row.len());
    let mut max = row[0];
    for &v in &row[1..active] {
        if v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for v in &mut row[..active] {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    let inv = T::one() / sum;
    for v in &mut row[..active] {
        *v = *v * inv;
    }
    for v in &mut row[active..] {
        *v = T::zero();
    }
}

/// Layer norm over each row of `x` (n rows, d columns), writing to `out`.
/// Returns nothing extra; callers that need backward state pass `saved`.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_rows<T: Scalar>(
    x: &[T],
    n: usize,
    d: usize,
    gamma: Option<&[T]>,
    beta: Option<&[T]>,
    eps: T,
    out: &mut [T],
    mut saved: Option<(&mut [T], &mut [T])>,
) {
    assert_eq!(x.len(), n * d);
    assert_eq!(out.len(), n * d);
    let inv_d = T::one() / T::from_f64(d as f64);
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mut mean = T::zero();
        for &v in row {
            mean = mean + v;
        }
        mean = mean * inv_d;
        let mut var = T::zero();
        for &v in row {
            let c = v - mean;
            var = var + c * c;
        }
        var = var * inv_d;
        let inv_std = T::one() / (var + eps).sqrt();
        let orow = &mut out[i * d..(i + 1) * d];
        for (j, o) in orow.iter_mut().enumerate() {
            let xhat = (row[j] - mean) * inv_std;
            let mut v = xhat;
            if let Some(g) = gamma {
                v = v * g[j];
            }
            if let Some(b) = beta {
                v = v + b[j];
            }
            *o = v;
            if let Some((xh, _)) = saved.as_mut() {
                xh[i * d + j] = xhat;
            }
        }
        if let Some((_, istd)) = saved.as_mut() {
            istd[i] = inv_std;
        }
    }
}

/// Deterministic pairwise summation; the result depends only on the slice
/// contents, not on how callers batched the inputs upstream.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 16 {
        let mut s = 0.0;
        for &x in xs {
            s += x;
        }
        s
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Tensor<f64>, ta: bool, b: &Tensor<f64>, tb: bool) -> Vec<f64> {
        let (m, k) = if ta { (a.cols(), a.rows()) } else { (a.rows(), a.cols()) };
        let n = if tb { b.rows() } else { b.cols() };
        let get_a = |i: usize, j: usize| if ta { a.data()[j * a.cols() + i] } else { a.data()[i * a.cols() + j] };
        let get_b = |i: usize, j: usize| if tb { b.data()[j * b.cols() + i] } else { b.data()[i * b.cols() + j] };
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for l in 0..k {
                    s += get_a(i, l) * get_b(l, j);
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn matmul_matches_naive_for_all_transpose_combinations() {
        let mut rng = crate::rng::stream(1, &[crate::rng::lane::EVAL]);
        for &(m, k, n) in &[(3usize, 4usize, 5usize), (7, 2, 9), (1, 6, 1)] {
            let a_data: Vec<f64> = (0..m * k).map(|_| crate::rng::normal(&mut rng)).collect();
            let b_data: Vec<f64> = (0..k * n).map(|_| crate::rng::normal(&mut rng)).collect();
            for &(ta, tb) in &[(false, false), (true, false), (false, true), (true, true)] {
                let a = if ta {
                    Tensor::from_vec(&[k, m], a_data.clone())
                } else {
                    Tensor::from_vec(&[m, k], a_data.clone())
                };
                let b = if tb {
                    Tensor::from_vec(&[n, k], b_data.clone())
                } else {
                    Tensor::from_vec(&[k, n], b_data.clone())
                };
                let c = matmul(&a, ta, &b, tb);
                let expect = naive_matmul(&a, ta, &b, tb);
                for (got, want) in c.data().iter().zip(expect.iter()) {
                    assert!((got - want).abs() < 1e-12, "({m},{k},{n}) ta={ta} tb={tb}");
                }
            }
        }
    }

    #[test]
    fn softmax_prefix_normalizes_and_zeroes_tail() {
        let mut row = [1.0f64, 2.0, 3.0, 100.0];
        softmax_prefix(&mut row, 3);
        let sum: f64 = row[..3].iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert_eq!(row[3], 0.0);
        assert!(row[2] > row[1] && row[1] > row[0]);
    }

    #[test]
    fn layer_norm_rows_zero_mean_unit_var() {
        let x = vec![1.0f64, 2.0, 3.0, 4.0, -1.0, 0.0, 1.0, 2.0];
        let mut out = vec![0.0; 8];
        layer_norm_rows(&x, 2, 4, None, None, 1e-6, &mut out, None);
        for r in 0..2 {
            let row = &out[r * 4..(r + 1) * 4];
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn pairwise_sum_matches_sequential_on_benign_input() {
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
        let seq: f64 = xs.iter().sum();
        assert!((pairwise_sum(&xs) - seq).abs() < 1e-9);
    }
}
