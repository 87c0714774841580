//! Plain loops over row-major buffers. Loop orders keep the innermost access
//! contiguous so the compiler can vectorize.

use super::Real;

/// `out[m,n] += a[m,k] * b[k,n]`
pub(crate) fn gemm_nn<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] * b[n,k]^T`
pub(crate) fn gemm_nt<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] += dot(a_row, b_row);
        }
    }
}

/// `out[m,n] += a[k,m]^T * b[k,n]`
pub(crate) fn gemm_tn<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    // Four partial sums let the loop vectorize without fast-math.
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[c * 4 + l] * b[c * 4 + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// In-place softmax; masked-out entries (mask false) become exactly zero.
/// A fully masked row is left as all zeros.
pub(crate) fn softmax_in_place<T: Real>(row: &mut [T], mask: Option<&[bool]>) {
    let keep = |i: usize| mask.map_or(true, |m| m[i]);
    let mut max = T::neg_infinity();
    for (i, &x) in row.iter().enumerate() {
        if keep(i) && x > max {
            max = x;
        }
    }
    if max == T::neg_infinity() {
        row.iter_mut().for_each(|x| *x = T::zero());
        return;
    }
    let mut total = T::zero();
    for (i, x) in row.iter_mut().enumerate() {
        if keep(i) {
            *x = (*x - max).exp();
            total += *x;
        } else {
            *x = T::zero();
        }
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

pub(crate) fn logsumexp<T: Real>(row: &[T]) -> T {
    let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln()
}
