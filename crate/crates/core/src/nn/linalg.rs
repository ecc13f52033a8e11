//! Thin wrappers over `matrixmultiply::dgemm` for row-major buffers.

/// `c = a · b + beta · c` where `a` is `m×k` and `b` is `k×n`.
///
/// `a_t` / `b_t` mean the buffer is stored transposed (i.e. `a` is held as
/// `k×m` row-major).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover the strided extents asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Squared Euclidean distances from every query row to every corpus row,
/// `queries` is `q×d`, `corpus` is `n×d`, `corpus_norms[j] = ‖corpus_j‖²`.
/// Returns a `q×n` row-major buffer, clamped at zero.
pub fn pairwise_sq_distances(queries: &[f64], corpus: &[f64], corpus_norms: &[f64], d: usize) -> Vec<f64> {
    let q = queries.len() / d;
    let n = corpus_norms.len();
    let mut out = vec![0.0; q * n];
    gemm(q, d, n, queries, false, corpus, true, 0.0, &mut out);
    for (i, row) in out.chunks_exact_mut(n).enumerate() {
        let qn = dot(&queries[i * d..(i + 1) * d], &queries[i * d..(i + 1) * d]);
        for (v, cn) in row.iter_mut().zip(corpus_norms) {
            *v = (qn + cn - 2.0 * *v).max(0.0);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    }

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        c
    }

    fn transpose(r: usize, c: usize, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn gemm_matches_naive_for_all_transpose_flags() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let expected = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (aa, af) in [(&a, false), (&at, true)] {
            for (bb, bf) in [(&b, false), (&bt, true)] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, aa, af, bb, bf, 0.0, &mut c);
                for (x, y) in c.iter().zip(&expected) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn pairwise_distances_match_direct() {
        let d = 3;
        let q = [0.0, 1.0, 2.0, -1.0, 0.5, 0.0];
        let c = [1.0, 1.0, 1.0, 0.0, 1.0, 2.0, 3.0, -2.0, 0.5];
        let norms: Vec<f64> = c.chunks(d).map(|r| dot(r, r)).collect();
        let out = pairwise_sq_distances(&q, &c, &norms, d);
        for i in 0..2 {
            for j in 0..3 {
                let direct = squared_distance(&q[i * d..(i + 1) * d], &c[j * d..(j + 1) * d]);
                assert!((out[i * 3 + j] - direct).abs() < 1e-12);
            }
        }
    }
}
