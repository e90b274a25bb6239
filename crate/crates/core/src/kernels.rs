//! Dense matrix kernels on row-major slices. Loop order is fixed so results
//! are bit-reproducible for identical inputs.

const MR: usize = 4;
const NR: usize = 16;

/// `c[m×n] += A · b[d×n]` where `A[r][p] = a[r * rs + p * ds]`. Every output
/// accumulates its products in ascending `p`, starting from the old value.
fn gemm_acc(a: &[f64], rs: usize, ds: usize, b: &[f64], c: &mut [f64], m: usize, d: usize, n: usize) {
    let mut i = 0;
    while i < m {
        let mr = MR.min(m - i);
        let mut j = 0;
        while j < n {
            let nr = NR.min(n - j);
            if mr == MR && nr == NR {
                tile(a, rs, ds, b, c, i, j, d, n);
            } else {
                for r in i..i + mr {
                    for col in j..j + nr {
                        let mut acc = c[r * n + col];
                        for p in 0..d {
                            acc += a[r * rs + p * ds] * b[p * n + col];
                        }
                        c[r * n + col] = acc;
                    }
                }
            }
            j += nr;
        }
        i += mr;
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn tile(a: &[f64], rs: usize, ds: usize, b: &[f64], c: &mut [f64], i: usize, j: usize, d: usize, n: usize) {
    let mut acc = [[0.0f64; NR]; MR];
    for (r, row) in acc.iter_mut().enumerate() {
        row.copy_from_slice(&c[(i + r) * n + j..(i + r) * n + j + NR]);
    }
    for p in 0..d {
        let bv: &[f64; NR] = b[p * n + j..p * n + j + NR].try_into().unwrap();
        for (r, row) in acc.iter_mut().enumerate() {
            let x = a[(i + r) * rs + p * ds];
            for q in 0..NR {
                row[q] += x * bv[q];
            }
        }
    }
    for (r, row) in acc.iter().enumerate() {
        c[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(row);
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    gemm_acc(a, k, 1, b, c, m, k, n);
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`
pub(crate) fn matmul_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    gemm_acc(a, 1, k, b, c, k, m, n);
}

/// Row-major transpose of an `m×n` matrix.
pub(crate) fn transpose(a: &[f64], m: usize, n: usize) -> alloc::vec::Vec<f64> {
    let mut out = alloc::vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn matmul_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    let bt = transpose(b, n, k);
    matmul_acc(a, &bt, c, m, k, n);
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn fill(len: usize, seed: u64) -> Vec<f64> {
        (0..len)
            .map(|i| (((i as u64 * 2654435761 + seed) % 1000) as f64) / 500.0 - 1.0)
            .collect()
    }

    #[test]
    fn kernels_agree_with_triple_loop() {
        for &(m, k, n) in &[(1, 1, 1), (3, 4, 2), (5, 7, 3), (9, 2, 6), (4, 4, 4)] {
            let a = fill(m * k, 1);
            let b = fill(k * n, 2);
            let want = naive(&a, &b, m, k, n);
            let mut c = vec![0.0; m * n];
            matmul_acc(&a, &b, &mut c, m, k, n);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
            // aᵀ stored as k×m, so tn(aᵀ) must reproduce a·b
            let at = transpose(&a, m, k);
            let mut c2 = vec![0.0; m * n];
            matmul_tn_acc(&at, &b, &mut c2, k, m, n);
            for (x, y) in c2.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
            let bt = transpose(&b, k, n);
            let mut c3 = vec![0.0; m * n];
            matmul_nt_acc(&a, &bt, &mut c3, m, k, n);
            for (x, y) in c3.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
