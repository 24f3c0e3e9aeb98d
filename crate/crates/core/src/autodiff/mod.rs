//! Reverse-mode automatic differentiation over dense row-major arrays.
//!
//! A [`Tape`] records every operation of a forward pass; [`Tape::backward`]
//! walks the record in reverse and accumulates gradients into every node
//! that (transitively) depends on a leaf created with `requires_grad`.
//!
//! Everything is generic over [`Scalar`] so the same model code runs in
//! 64-bit for gradient checks and 32-bit for training.

mod scalar;
mod tape;
mod tensor;

pub mod gradcheck;

pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("loss mask has no nonzero entry")]
    EmptyLossMask,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u32, classes: usize },
    #[error("index {index} out of range for table of {rows} rows")]
    IndexOutOfRange { index: usize, rows: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward called on a non-scalar node of shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// `c = a · b (+ c when accumulate)`, with optional transposition of either
/// operand. `a` is `m×k` (stored `k×m` when `trans_a`), `b` is `k×n`
/// (stored `n×k` when `trans_b`), `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices, and `c` does not alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
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
