use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// `out += a · b` for row-major `a: [m×k]`, `b: [k×n]`, `out: [m×n]`.
///
/// Accumulation runs over `k` in increasing order for every output element.
pub fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for (a_row, out_row) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (&a_ip, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
            if a_ip == 0.0 {
                continue;
            }
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * bv;
            }
        }
    }
}

/// `out += aᵀ · b` for `a: [m×k]`, `b: [m×n]`, `out: [k×n]`.
pub fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for (a_row, b_row) in a.chunks_exact(k).zip(b.chunks_exact(n)) {
        for (&a_ip, out_row) in a_row.iter().zip(out.chunks_exact_mut(n)) {
            if a_ip == 0.0 {
                continue;
            }
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * bv;
            }
        }
    }
}

/// `out += a · bᵀ` for `a: [m×n]`, `b: [k×n]`, `out: [m×k]`.
pub fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for (a_row, out_row) in a.chunks_exact(n).zip(out.chunks_exact_mut(k)) {
        for (o, b_row) in out_row.iter_mut().zip(b.chunks_exact(n)) {
            let mut acc = 0.0;
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            *o += acc;
        }
    }
}

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

/// `d/dx [x·Φ(x)] = Φ(x) + x·φ(x)`.
pub fn gelu_grad(x: f64) -> f64 {
    std_normal_cdf(x) + x * std_normal_pdf(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn gemm_matches_triple_loop_seed1() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (m, k, n) = (5, 7, 3);
        let a = rand_vec(&mut rng, m * k);
        let b = rand_vec(&mut rng, k * n);
        let mut out = vec![0.0; m * n];
        gemm(&a, &b, &mut out, m, k, n);
        for (x, y) in out.iter().zip(naive(&a, &b, m, k, n)) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn transposed_variants_match_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (m, k, n) = (4, 6, 5);
        let a = rand_vec(&mut rng, m * k);
        let b = rand_vec(&mut rng, m * n);
        // aᵀ explicit
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut out = vec![0.0; k * n];
        gemm_tn(&a, &b, &mut out, m, k, n);
        for (x, y) in out.iter().zip(naive(&at, &b, k, m, n)) {
            assert!((x - y).abs() <= 1e-12);
        }

        let c = rand_vec(&mut rng, k * n);
        let mut ct = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                ct[j * k + p] = c[p * n + j];
            }
        }
        let mut out = vec![0.0; m * k];
        gemm_nt(&b, &c, &mut out, m, k, n);
        for (x, y) in out.iter().zip(naive(&b, &ct, m, n, k)) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    /// Maclaurin series of erf; accurate to ~1e-15 for |x| <= 3.
    fn erf_series(x: f64) -> f64 {
        let mut term = x;
        let mut sum = x;
        for n in 1..80 {
            term *= -x * x / n as f64;
            sum += term / (2 * n + 1) as f64;
        }
        sum * 2.0 / std::f64::consts::PI.sqrt()
    }

    #[test]
    fn gelu_against_series_erf() {
        for &x in &[-3.0, -1.0, -0.2, 0.0, 0.5, 1.0, 2.5] {
            let oracle = x * 0.5 * (1.0 + erf_series(x / 2f64.sqrt()));
            assert!((gelu(x) - oracle).abs() < 1e-14, "x={x}");
        }
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
    }

    #[test]
    fn gelu_grad_central_difference() {
        for &x in &[-2.0, -0.7, 0.0, 0.3, 1.7] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_grad(x) - fd).abs() < 1e-8);
        }
    }
}
