//! Naive but cache-friendly dense matrix products with a fixed summation order.

use super::Scalar;

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_acc<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_ip * b_pj;
            }
        }
    }
}

pub(crate) fn transpose<T: Scalar>(rows: usize, cols: usize, a: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// `c[m×n] += aᵀ · b` where `a` is stored `[k×m]`.
pub(crate) fn gemm_tn_acc<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    let at = transpose(k, m, a);
    gemm_acc(m, k, n, &at, b, c);
}

/// `c[m×n] += a · bᵀ` where `b` is stored `[n×k]`.
pub(crate) fn gemm_nt_acc<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    let bt = transpose(n, k, b);
    gemm_acc(m, k, n, a, &bt, c);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_variants_agree() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm_acc(2, 3, 4, &a, &b, &mut c);

        let at = transpose(2, 3, &a);
        let mut c2 = vec![0.0; 8];
        gemm_tn_acc(2, 3, 4, &at, &b, &mut c2);
        assert_eq!(c, c2);

        let bt = transpose(3, 4, &b);
        let mut c3 = vec![0.0; 8];
        gemm_nt_acc(2, 3, 4, &a, &bt, &mut c3);
        assert_eq!(c, c3);
        // row 0: [0,1,2] · columns of b
        assert_eq!(c[0], 0.0 * 0.0 + 1.0 * 2.0 + 2.0 * 4.0);
    }
}
