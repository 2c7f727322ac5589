// Row-major matrix kernels. All of them accumulate into `c`.

use crate::Real;

/// c[p,r] += a[p,q] · b[q,r]
pub(crate) fn matmul_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let a_row = &a[i * q..(i + 1) * q];
        let c_row = &mut c[i * r..(i + 1) * r];
        for (k, &aik) in a_row.iter().enumerate() {
            let b_row = &b[k * r..(k + 1) * r];
            for (cij, &bkj) in c_row.iter_mut().zip(b_row) {
                *cij += aik * bkj;
            }
        }
    }
}

/// c[p,q] += a[p,r] · b[q,r]ᵀ
pub(crate) fn matmul_nt_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let a_row = &a[i * r..(i + 1) * r];
        for k in 0..q {
            c[i * q + k] += dot(a_row, &b[k * r..(k + 1) * r]);
        }
    }
}

/// Dot product over eight independent partial sums so it vectorises.
fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let xc = x.chunks_exact(8);
    let yc = y.chunks_exact(8);
    let tail: T = xc.remainder().iter().zip(yc.remainder()).map(|(&a, &b)| a * b).sum();
    for (xs, ys) in xc.zip(yc) {
        for l in 0..8 {
            acc[l] += xs[l] * ys[l];
        }
    }
    acc.iter().copied().sum::<T>() + tail
}

/// c[q,r] += a[p,q]ᵀ · d[p,r]
pub(crate) fn matmul_tn_acc<T: Real>(a: &[T], d: &[T], c: &mut [T], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let a_row = &a[i * q..(i + 1) * q];
        let d_row = &d[i * r..(i + 1) * r];
        for (k, &aik) in a_row.iter().enumerate() {
            let c_row = &mut c[k * r..(k + 1) * r];
            for (ckj, &dij) in c_row.iter_mut().zip(d_row) {
                *ckj += aik * dij;
            }
        }
    }
}
