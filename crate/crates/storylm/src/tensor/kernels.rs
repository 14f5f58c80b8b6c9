//! Raw numeric kernels over `f64` slices.
//!
//! Each kernel has a sequential implementation; matrix multiply additionally
//! has a rayon row-parallel variant used when the `parallel` feature is on
//! and the problem is big enough. Parallelism is over independent output
//! rows, with a fixed accumulation order inside each row, so parallel and
//! sequential results are bit-identical.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Work threshold (m·k·n) below which the parallel matmul falls back to the
/// sequential kernel.
pub const MATMUL_PAR_THRESHOLD: usize = 64 * 64 * 32;

/// `C = A·B` with `A` m×k and `B` k×n, sequential.
pub fn matmul_seq(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    for (i, c_row) in c.chunks_mut(n).enumerate() {
        matmul_row(&a[i * k..(i + 1) * k], b, n, c_row);
    }
    c
}

/// `C = A·B`, parallel over output rows.
#[cfg(feature = "parallel")]
pub fn matmul_par(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    c.par_chunks_mut(n).enumerate().for_each(|(i, c_row)| {
        matmul_row(&a[i * k..(i + 1) * k], b, n, c_row);
    });
    c
}

/// `C = A·B`, dispatching to the parallel kernel when available and worth it.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    if m * k * n >= MATMUL_PAR_THRESHOLD && m > 1 {
        return matmul_par(a, b, m, k, n);
    }
    matmul_seq(a, b, m, k, n)
}

#[inline]
fn matmul_row(a_row: &[f64], b: &[f64], n: usize, c_row: &mut [f64]) {
    for (l, &a_il) in a_row.iter().enumerate() {
        if a_il == 0.0 {
            continue;
        }
        let b_row = &b[l * n..(l + 1) * n];
        for (c_ij, &b_lj) in c_row.iter_mut().zip(b_row) {
            *c_ij += a_il * b_lj;
        }
    }
}

/// Transpose of an m×n row-major matrix.
pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut t = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

/// Row-wise numerically stable softmax of an r×c matrix, in place.
pub fn softmax_rows_inplace(x: &mut [f64], cols: usize) {
    for row in x.chunks_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Row-wise layer normalization. Returns `(mean, rstd)` per row for backward.
pub fn layer_norm_rows(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    cols: usize,
    eps: f64,
    out: &mut [f64],
) -> Vec<(f64, f64)> {
    let rows = x.len() / cols;
    let mut stats = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        let out_row = &mut out[r * cols..(r + 1) * cols];
        for j in 0..cols {
            out_row[j] = (row[j] - mean) * rstd * gain[j] + bias[j];
        }
        stats.push((mean, rstd));
    }
    stats
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU: `0.5·x·(1 + erf(x/√2))`, i.e. `x·Φ(x)` with the Gaussian CDF.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

/// Derivative of exact GELU: `Φ(x) + x·φ(x)`.
pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = FRAC_1_SQRT_2PI * (-0.5 * x * x).exp();
    cdf + x * pdf
}

/// Log-sum-exp of a slice, stable under large magnitudes.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_hand_example() {
        // [1 2; 3 4] · [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        assert_eq!(matmul_seq(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_matmul_is_bit_identical_to_sequential() {
        use rand::Rng;
        let mut rng = crate::derive_rng(11, "kernel-test", 0);
        let (m, k, n) = (33, 47, 29);
        let a: Vec<f64> = (0..m * k).map(|_| rng.random::<f64>() - 0.5).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.random::<f64>() - 0.5).collect();
        let seq = matmul_seq(&a, &b, m, k, n);
        let par = matmul_par(&a, &b, m, k, n);
        assert_eq!(seq, par);
    }

    #[test]
    fn transpose_round_trips() {
        let a: Vec<f64> = (0..12).map(f64::from).collect();
        let t = transpose(&a, 3, 4);
        assert_eq!(transpose(&t, 4, 3), a);
    }

    #[test]
    fn gelu_known_values() {
        // GELU(0) = 0, GELU(x) → x for large x, → 0 for very negative x.
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(10.0) - 10.0).abs() < 1e-12);
        assert!(gelu(-10.0).abs() < 1e-12);
        // Φ(1) = 0.841344746068543, so GELU(1) = 0.841344746068543.
        assert!((gelu(1.0) - 0.841_344_746_068_543).abs() < 1e-12);
    }
}
