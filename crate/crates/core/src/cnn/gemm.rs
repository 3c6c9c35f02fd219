//! Blocked single-threaded matrix kernels. All matrices are dense row-major
//! and every routine accumulates into `c`.

use crate::tensor::Real;

const NB: usize = 256;
const KB: usize = 256;

/// `c[m×n] += A·b[k×n]`, where `A[i][p] = a[i*rs + p*cs]`.
fn gemm_strided<T: Real>(m: usize, n: usize, k: usize, a: &[T], rs: usize, cs: usize, b: &[T], c: &mut [T]) {
    assert!(b.len() >= k * n && c.len() >= m * n);
    for j0 in (0..n).step_by(NB) {
        let j1 = (j0 + NB).min(n);
        for p0 in (0..k).step_by(KB) {
            let p1 = (p0 + KB).min(k);
            let mut i = 0;
            while i + 4 <= m {
                let (r0, rest) = c[i * n..(i + 4) * n].split_at_mut(n);
                let (r1, rest) = rest.split_at_mut(n);
                let (r2, r3) = rest.split_at_mut(n);
                let (c0, c1, c2, c3) = (&mut r0[j0..j1], &mut r1[j0..j1], &mut r2[j0..j1], &mut r3[j0..j1]);
                for p in p0..p1 {
                    let a0 = a[i * rs + p * cs];
                    let a1 = a[(i + 1) * rs + p * cs];
                    let a2 = a[(i + 2) * rs + p * cs];
                    let a3 = a[(i + 3) * rs + p * cs];
                    let bp = &b[p * n + j0..p * n + j1];
                    for ((((x0, x1), x2), x3), &bv) in c0
                        .iter_mut()
                        .zip(c1.iter_mut())
                        .zip(c2.iter_mut())
                        .zip(c3.iter_mut())
                        .zip(bp)
                    {
                        *x0 += a0 * bv;
                        *x1 += a1 * bv;
                        *x2 += a2 * bv;
                        *x3 += a3 * bv;
                    }
                }
                i += 4;
            }
            while i < m {
                let ci = &mut c[i * n + j0..i * n + j1];
                for p in p0..p1 {
                    let av = a[i * rs + p * cs];
                    let bp = &b[p * n + j0..p * n + j1];
                    for (x, &bv) in ci.iter_mut().zip(bp) {
                        *x += av * bv;
                    }
                }
                i += 1;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn<T: Real>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    gemm_strided(m, n, k, a, k, 1, b, c);
}

/// `c[m×n] += aᵀ · b`, with `a` stored as `[k×m]` and `b` as `[k×n]`.
pub fn gemm_tn<T: Real>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    gemm_strided(m, n, k, a, 1, m, b, c);
}

/// Dot product with eight independent partial sums.
#[inline]
pub fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = x.len() / 8;
    for (xc, yc) in x[..chunks * 8].chunks_exact(8).zip(y[..chunks * 8].chunks_exact(8)) {
        for l in 0..8 {
            acc[l] += xc[l] * yc[l];
        }
    }
    let mut tail = T::zero();
    for (&a, &b) in x[chunks * 8..].iter().zip(&y[chunks * 8..]) {
        tail += a * b;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `c[m×n] += a[m×k] · bᵀ`, with `b` stored as `[n×k]`.
pub fn gemm_nt<T: Real>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let ai = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(ai, &b[j * k..(j + 1) * k]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, n: usize, k: usize, a: impl Fn(usize, usize) -> f64, b: impl Fn(usize, usize) -> f64) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| a(i, p) * b(p, j)).sum();
            }
        }
        c
    }

    fn seq(len: usize, salt: u64) -> Vec<f64> {
        (0..len)
            .map(|i| (crate::rng::mix64(i as u64 ^ salt) % 1000) as f64 / 500.0 - 1.0)
            .collect()
    }

    #[test]
    fn kernels_match_naive_product() {
        for &(m, n, k) in &[(1, 1, 1), (3, 5, 7), (9, 300, 270), (17, 33, 513)] {
            let a = seq(m * k, 1);
            let b = seq(k * n, 2);
            let expect = naive(m, n, k, |i, p| a[i * k + p], |p, j| b[p * n + j]);

            let mut c = vec![0.0; m * n];
            gemm_nn(m, n, k, &a, &b, &mut c);
            for (x, y) in c.iter().zip(&expect) {
                assert!((x - y).abs() < 1e-9);
            }

            // same product through the transposed layouts
            let mut at = vec![0.0; k * m];
            for i in 0..m {
                for p in 0..k {
                    at[p * m + i] = a[i * k + p];
                }
            }
            let mut c = vec![0.0; m * n];
            gemm_tn(m, n, k, &at, &b, &mut c);
            for (x, y) in c.iter().zip(&expect) {
                assert!((x - y).abs() < 1e-9);
            }

            let mut bt = vec![0.0; n * k];
            for p in 0..k {
                for j in 0..n {
                    bt[j * k + p] = b[p * n + j];
                }
            }
            let mut c = vec![0.0; m * n];
            gemm_nt(m, n, k, &a, &bt, &mut c);
            for (x, y) in c.iter().zip(&expect) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn accumulates_into_output() {
        let mut c = vec![1.0f32; 4];
        gemm_nn(2, 2, 1, &[1.0, 2.0], &[3.0, 4.0], &mut c);
        assert_eq!(c, vec![4.0, 5.0, 7.0, 9.0]);
    }
}
