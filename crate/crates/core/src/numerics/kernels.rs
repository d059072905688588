//! Low-level loops shared by the tensor ops and their adjoints.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

/// `c (+)= op(a) · op(b)` where `op(a)` is `m × k` and `op(b)` is `k × n`.
///
/// `a` is stored `m × k` (or `k × m` when `ta`), `b` is stored `k × n`
/// (or `n × k` when `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let a_view = if ta {
        ArrayView2::from_shape((k, m), a)
            .expect("gemm a")
            .reversed_axes()
    } else {
        ArrayView2::from_shape((m, k), a).expect("gemm a")
    };
    let b_view = if tb {
        ArrayView2::from_shape((n, k), b)
            .expect("gemm b")
            .reversed_axes()
    } else {
        ArrayView2::from_shape((k, n), b).expect("gemm b")
    };
    let mut c_view = ArrayViewMut2::from_shape((m, n), c).expect("gemm c");
    let beta = if accumulate { 1.0 } else { 0.0 };
    general_mat_mul(1.0, &a_view, &b_view, beta, &mut c_view);
}

/// For every flat index of a tensor with shape `out`, the flat index of the
/// broadcast operand with shape `small` (right-aligned numpy rules, size-1
/// dims repeat). Returns `None` when no broadcasting is needed.
pub(crate) fn broadcast_map(out: &[usize], small: &[usize]) -> Option<Vec<usize>> {
    if out == small {
        return None;
    }
    let rank = out.len();
    let offset = rank - small.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..small.len()).rev() {
        let d = small[i];
        strides[i + offset] = if d == 1 { 0 } else { acc };
        acc *= d;
    }
    let total: usize = out.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank];
    let mut idx = 0usize;
    for _ in 0..total {
        map.push(idx);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            idx += strides[ax];
            if counter[ax] < out[ax] {
                break;
            }
            idx -= strides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    Some(map)
}

/// Whether `small` broadcasts into `out` without changing `out`.
pub(crate) fn broadcastable(out: &[usize], small: &[usize]) -> bool {
    if small.len() > out.len() {
        return false;
    }
    let offset = out.len() - small.len();
    small
        .iter()
        .enumerate()
        .all(|(i, &d)| d == 1 || d == out[i + offset])
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `softplus(x) = ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
