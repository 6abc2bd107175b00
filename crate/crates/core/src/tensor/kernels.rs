//! Slice-level numeric kernels shared by the plain ops and the tape.

use super::Scalar;
use crate::error::{Error, Result};

/// `a[m×n] · b[n×p]`, accumulating each output entry in ascending `k` order.
pub(crate) fn matmul<F: Scalar>(a: &[F], b: &[F], m: usize, n: usize, p: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * p];
    matmul_acc(a, b, m, n, p, &mut out);
    out
}

const MR: usize = 4;
const NR: usize = 16;

/// `out += a·b`. Each entry is accumulated in increasing `k` order starting
/// from its current value, so blocking does not change the result. Column
/// ranges of `a` that are zero across a block of rows are skipped, which makes
/// triangular operands about half price.
pub(crate) fn matmul_acc<F: Scalar>(a: &[F], b: &[F], m: usize, n: usize, p: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * n);
    blocked(View { data: a, rs: n, cs: 1 }, b, m, n, p, out);
}

/// `out += aᵀ·b` for `a` stored `n×m`, without materializing the transpose.
pub(crate) fn matmul_tn_acc<F: Scalar>(a: &[F], b: &[F], m: usize, n: usize, p: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * n);
    blocked(View { data: a, rs: 1, cs: m }, b, m, n, p, out);
}

/// Left operand addressed as `data[r*rs + k*cs]`.
#[derive(Clone, Copy)]
struct View<'a, F> {
    data: &'a [F],
    rs: usize,
    cs: usize,
}

impl<F: Scalar> View<'_, F> {
    #[inline(always)]
    fn at(&self, r: usize, k: usize) -> F {
        self.data[r * self.rs + k * self.cs]
    }

    /// First and one-past-last `k` holding a nonzero in rows `r0..r1`.
    fn nonzero_span(&self, r0: usize, r1: usize, n: usize) -> Option<(usize, usize)> {
        let mut lo = n;
        let mut hi = 0;
        for r in r0..r1 {
            if let Some(first) = (0..n).find(|&k| self.at(r, k) != F::zero()) {
                lo = lo.min(first);
                hi = hi.max((first..n).rev().find(|&k| self.at(r, k) != F::zero()).map_or(0, |k| k + 1));
            }
        }
        (lo < hi).then_some((lo, hi))
    }
}

fn blocked<F: Scalar>(a: View<'_, F>, b: &[F], m: usize, n: usize, p: usize, out: &mut [F]) {
    debug_assert_eq!(b.len(), n * p);
    debug_assert_eq!(out.len(), m * p);
    for i in (0..m).step_by(MR) {
        let rows = MR.min(m - i);
        let Some((lo, hi)) = a.nonzero_span(i, i + rows, n) else {
            continue;
        };
        let mut j = 0;
        if rows == MR {
            while j + NR <= p {
                tile(a, b, out, p, i, j, lo, hi);
                j += NR;
            }
        }
        for r in i..i + rows {
            let out_row = &mut out[r * p + j..(r + 1) * p];
            for k in lo..hi {
                let ark = a.at(r, k);
                if ark == F::zero() {
                    continue;
                }
                for (o, &bkj) in out_row.iter_mut().zip(&b[k * p + j..(k + 1) * p]) {
                    *o = ark.mul_add(bkj, *o);
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn tile<F: Scalar>(a: View<'_, F>, b: &[F], out: &mut [F], p: usize, i: usize, j: usize, lo: usize, hi: usize) {
    let mut acc = [[F::zero(); NR]; MR];
    for (r, acc_r) in acc.iter_mut().enumerate() {
        acc_r.copy_from_slice(&out[(i + r) * p + j..(i + r) * p + j + NR]);
    }
    for k in lo..hi {
        let bk: &[F; NR] = b[k * p + j..k * p + j + NR].try_into().expect("tile width");
        for (r, acc_r) in acc.iter_mut().enumerate() {
            let ark = a.at(i + r, k);
            for (o, &bkj) in acc_r.iter_mut().zip(bk) {
                *o = ark.mul_add(bkj, *o);
            }
        }
    }
    for (r, acc_r) in acc.iter().enumerate() {
        out[(i + r) * p + j..(i + r) * p + j + NR].copy_from_slice(acc_r);
    }
}

pub(crate) fn transpose<F: Scalar>(a: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Row softmax with optional causal mask (entries `j > i` forced to zero).
pub(crate) fn softmax_rows<F: Scalar>(x: &[F], rows: usize, cols: usize, causal: bool) -> Result<Vec<F>> {
    let mut out = vec![F::zero(); rows * cols];
    for r in 0..rows {
        let width = if causal { (r + 1).min(cols) } else { cols };
        let src = &x[r * cols..r * cols + width];
        let max = src.iter().copied().fold(F::neg_infinity(), F::max);
        if !max.is_finite() {
            return Err(Error::NoValidKey { row: r });
        }
        let dst = &mut out[r * cols..r * cols + width];
        let mut sum = F::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            sum += *d;
        }
        let inv = F::one() / sum;
        for d in dst.iter_mut() {
            *d *= inv;
        }
    }
    Ok(out)
}

/// Normalize each row to zero mean and unit population variance.
/// Returns the normalized rows and the per-row `1/sqrt(var + eps)`.
pub(crate) fn standardize_rows<F: Scalar>(x: &[F], rows: usize, cols: usize, eps: F) -> Result<(Vec<F>, Vec<F>)> {
    let n = F::of(cols as f64);
    let mut xhat = vec![F::zero(); rows * cols];
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let src = &x[r * cols..(r + 1) * cols];
        let mean = src.iter().copied().sum::<F>() / n;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
        let denom = (var + eps).sqrt();
        if !(denom > F::zero()) || !denom.is_finite() {
            return Err(Error::Degenerate {
                op: "layernorm",
                reason: format!("row {r} has zero or non-finite variance"),
            });
        }
        let inv = F::one() / denom;
        for (d, &v) in xhat[r * cols..(r + 1) * cols].iter_mut().zip(src) {
            *d = (v - mean) * inv;
        }
        inv_std.push(inv);
    }
    Ok((xhat, inv_std))
}

/// Scale each row to unit Euclidean norm. Returns the rows and their norms.
pub(crate) fn l2_rows<F: Scalar>(x: &[F], rows: usize, cols: usize) -> Result<(Vec<F>, Vec<F>)> {
    let mut out = vec![F::zero(); rows * cols];
    let mut norms = Vec::with_capacity(rows);
    for r in 0..rows {
        let src = &x[r * cols..(r + 1) * cols];
        let norm = src.iter().map(|&v| v * v).sum::<F>().sqrt();
        if !(norm > F::zero()) || !norm.is_finite() {
            return Err(Error::Degenerate {
                op: "layernorm_l2",
                reason: format!("row {r} is the zero vector"),
            });
        }
        for (d, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(src) {
            *d = v / norm;
        }
        norms.push(norm);
    }
    Ok((out, norms))
}
