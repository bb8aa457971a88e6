//! Dense kernels shared by the graph ops and by inference-only code paths.
//! All matrices are row-major slices with explicit dimensions.

use super::real::Real;

/// out += a · b, a: m×k, b: k×n, out: m×n
pub fn matmul_acc<S: Real>(out: &mut [S], a: &[S], b: &[S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &ap) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += ap * brow[j];
            }
        }
    }
}

/// out += a · bᵀ, a: m×k, b: n×k, out: m×n
pub fn matmul_nt_acc<S: Real>(out: &mut [S], a: &[S], b: &[S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = S::ZERO;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            orow[j] += acc;
        }
    }
}

/// out += aᵀ · b, a: m×k, b: m×n, out: k×n
pub fn matmul_tn_acc<S: Real>(out: &mut [S], a: &[S], b: &[S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &ap) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += ap * brow[j];
            }
        }
    }
}

/// In-place row softmax with max subtraction.
pub fn softmax_row_inplace<S: Real>(row: &mut [S]) {
    let mut m = S::neg_infinity();
    for &v in row.iter() {
        m = m.maxv(v);
    }
    let mut sum = S::ZERO;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row log-softmax into a fresh vector.
pub fn log_softmax_row<S: Real>(row: &[S]) -> Vec<S> {
    let mut m = S::neg_infinity();
    for &v in row.iter() {
        m = m.maxv(v);
    }
    let mut sum = S::ZERO;
    for &v in row.iter() {
        sum += (v - m).exp();
    }
    let lse = sum.ln() + m;
    row.iter().map(|&v| v - lse).collect()
}

/// Squared Euclidean distance.
pub fn sq_dist<S: Real>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = S::ZERO;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let d = x - y;
        acc += d * d;
    }
    acc
}
