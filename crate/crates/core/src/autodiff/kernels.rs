//! Matrix inner loops shared by forward and backward passes.
//!
//! Written with fixed-width accumulator blocks and contiguous inner loops so
//! the compiler can vectorize them without reassociation flags.

use super::real::Real;

/// Dot product with eight parallel accumulators.
#[inline]
pub fn dot<F: Real>(x: &[F], y: &[F]) -> F {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = [F::zero(); 8];
    let mut xc = x.chunks_exact(8);
    let mut yc = y.chunks_exact(8);
    for (xs, ys) in (&mut xc).zip(&mut yc) {
        for l in 0..8 {
            acc[l] = acc[l] + xs[l] * ys[l];
        }
    }
    let mut tail = F::zero();
    for (xv, yv) in xc.remainder().iter().zip(yc.remainder()) {
        tail = tail + *xv * *yv;
    }
    let s01 = acc[0] + acc[1];
    let s23 = acc[2] + acc[3];
    let s45 = acc[4] + acc[5];
    let s67 = acc[6] + acc[7];
    ((s01 + s23) + (s45 + s67)) + tail
}

/// `y += alpha * x`.
#[inline]
pub fn axpy<F: Real>(alpha: F, x: &[F], y: &mut [F]) {
    debug_assert_eq!(x.len(), y.len());
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv = *yv + alpha * *xv;
    }
}

/// `out[n,m] += a[n,k] * b[k,m]`.
#[inline]
pub fn mm_nn<F: Real>(a: &[F], b: &[F], out: &mut [F], n: usize, k: usize, m: usize) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(out.len(), n * m);
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (l, &alpha) in arow.iter().enumerate() {
            axpy(alpha, &b[l * m..(l + 1) * m], orow);
        }
    }
}

/// `out[n,m] += a[n,k] * b[m,k]^T`.
#[inline]
pub fn mm_nt<F: Real>(a: &[F], b: &[F], out: &mut [F], n: usize, k: usize, m: usize) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), m * k);
    debug_assert_eq!(out.len(), n * m);
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (j, ov) in orow.iter_mut().enumerate() {
            *ov = *ov + dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out[n,m] += a[r,n]^T * b[r,m]`.
#[inline]
pub fn mm_tn<F: Real>(a: &[F], b: &[F], out: &mut [F], r: usize, n: usize, m: usize) {
    debug_assert_eq!(a.len(), r * n);
    debug_assert_eq!(b.len(), r * m);
    debug_assert_eq!(out.len(), n * m);
    for l in 0..r {
        let arow = &a[l * n..(l + 1) * n];
        let brow = &b[l * m..(l + 1) * m];
        for (i, &alpha) in arow.iter().enumerate() {
            axpy(alpha, brow, &mut out[i * m..(i + 1) * m]);
        }
    }
}
