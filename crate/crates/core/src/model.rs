//! Neural components: causal transformer backbone, flow sampler head,
//! Gaussian-mixture head, and their parameter plumbing.
//!
//! Every component has two forward implementations that share the same
//! low-level kernels: a tape version (for training and gradcheck) and a
//! plain f32 version (for generation, with KV caching). The shared kernels
//! are what keeps the two aligned to rounding error.

pub mod backbone;
pub mod config;
pub mod gmm;
pub mod params;
pub mod sampler;

use crate::tensor::Scalar;

/// `out = x W^T (+ bias)` on raw row-major slices: `x` is (rows, in_dim),
/// `w` is (out_dim, in_dim). The same gemm call the tape's `linear` makes.
pub(crate) fn linear_slices<T: Scalar>(
    x: &[T],
    rows: usize,
    w: &[T],
    out_dim: usize,
    in_dim: usize,
    bias: Option<&[T]>,
    out: &mut [T],
) {
    assert_eq!(x.len(), rows * in_dim);
    assert_eq!(w.len(), out_dim * in_dim);
    assert_eq!(out.len(), rows * out_dim);
    T::gemm(
        rows,
        in_dim,
        out_dim,
        T::one(),
        x,
        in_dim as isize,
        1,
        w,
        1,
        in_dim as isize,
        T::zero(),
        out,
        out_dim as isize,
        1,
    );
    if let Some(b) = bias {
        assert_eq!(b.len(), out_dim);
        for r in 0..rows {
            for (j, &bj) in b.iter().enumerate() {
                out[r * out_dim + j] = out[r * out_dim + j] + bj;
            }
        }
    }
}
