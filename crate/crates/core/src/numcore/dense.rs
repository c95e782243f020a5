//! Plain dense kernels shared by the tape forward pass and the inference
//! paths. Keeping one implementation per operation makes the two paths agree
//! to the last bit where they compose the same way.
//!
//! Accumulation order invariant: every inner sum runs over ascending index,
//! and each output row depends only on its own input row(s), so batched and
//! sequential evaluation are bit-identical per row.

use super::scalar::Scalar;

/// `c = a (ra x k) * b (k x cb)`, `c` pre-sized `ra x cb`, overwritten.
pub fn matmul<T: Scalar>(a: &[T], ra: usize, k: usize, b: &[T], cb: usize, c: &mut [T]) {
    debug_assert_eq!(a.len(), ra * k);
    debug_assert_eq!(b.len(), k * cb);
    debug_assert_eq!(c.len(), ra * cb);
    c.iter_mut().for_each(|x| *x = T::zero());
    matmul_acc(a, ra, k, b, cb, c);
}

/// `c += a * b` without zeroing `c` first.
pub fn matmul_acc<T: Scalar>(a: &[T], ra: usize, k: usize, b: &[T], cb: usize, c: &mut [T]) {
    for i in 0..ra {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * cb..(i + 1) * cb];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * cb..(kk + 1) * cb];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += aik * bv;
            }
        }
    }
}

/// `c = a (ra x k) * b^T`, with `b` stored `rb x k`; `c` is `ra x rb`.
pub fn matmul_nt<T: Scalar>(a: &[T], ra: usize, k: usize, b: &[T], rb: usize, c: &mut [T]) {
    debug_assert_eq!(a.len(), ra * k);
    debug_assert_eq!(b.len(), rb * k);
    debug_assert_eq!(c.len(), ra * rb);
    for i in 0..ra {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..rb {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for kk in 0..k {
                acc += arow[kk] * brow[kk];
            }
            c[i * rb + j] = acc;
        }
    }
}

/// `c += a^T (k x ra interpreted transposed) * b`: `a` is `n x k` used as
/// `k x n`. Concretely: `c (k x cb) += sum_i a[i,:]^T b[i,:]`.
pub fn matmul_tn_acc<T: Scalar>(a: &[T], ra: usize, k: usize, b: &[T], cb: usize, c: &mut [T]) {
    debug_assert_eq!(a.len(), ra * k);
    debug_assert_eq!(b.len(), ra * cb);
    debug_assert_eq!(c.len(), k * cb);
    for i in 0..ra {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * cb..(i + 1) * cb];
        for (kk, &av) in arow.iter().enumerate() {
            let crow = &mut c[kk * cb..(kk + 1) * cb];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += av * bv;
            }
        }
    }
}

/// Adds the `1 x n` row `b` to every row of `a` in place.
pub fn add_row_inplace<T: Scalar>(a: &mut [T], rows: usize, b: &[T]) {
    let n = b.len();
    debug_assert_eq!(a.len(), rows * n);
    for i in 0..rows {
        let arow = &mut a[i * n..(i + 1) * n];
        for (av, &bv) in arow.iter_mut().zip(b.iter()) {
            *av += bv;
        }
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

pub fn l2_norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Normalizes each row to unit L2 norm; rows with norm below `tiny` are
/// zeroed instead of divided.
pub fn l2_normalize_rows<T: Scalar>(a: &mut [T], rows: usize, cols: usize) {
    let tiny = T::from(1e-30).unwrap();
    for i in 0..rows {
        let row = &mut a[i * cols..(i + 1) * cols];
        let n = l2_norm(row);
        if n < tiny {
            row.iter_mut().for_each(|x| *x = T::zero());
        } else {
            row.iter_mut().for_each(|x| *x = *x / n);
        }
    }
}
