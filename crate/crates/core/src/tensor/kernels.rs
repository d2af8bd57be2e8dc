// Raw row-major kernels. Every reduction accumulates left to right in index
// order so a fixed input always produces bit-identical output.

use std::f64::consts::PI;

const GELU_CUBIC: f64 = 0.044715;

/// `A[r×k] · B[k×c]`.
pub fn matmul_raw(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), r * k);
    debug_assert_eq!(b.len(), k * c);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let out_row = &mut out[i * c..(i + 1) * c];
        let a_row = &a[i * k..(i + 1) * k];
        for (t, &av) in a_row.iter().enumerate() {
            let b_row = &b[t * c..(t + 1) * c];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `A[r×k] · B[c×k]ᵀ`.
pub fn matmul_nt(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), r * k);
    debug_assert_eq!(b.len(), c * k);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..c {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * c + j] = acc;
        }
    }
    out
}

/// `A[r×k]ᵀ · B[r×c]`, producing `k×c`.
pub fn matmul_tn(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), r * k);
    debug_assert_eq!(b.len(), r * c);
    let mut out = vec![0.0; k * c];
    for i in 0..r {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * c..(i + 1) * c];
        for (t, &av) in a_row.iter().enumerate() {
            let out_row = &mut out[t * c..(t + 1) * c];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

pub fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

/// Row softmax. With `causal`, entry `(i, j)` for `j > i` is masked to zero.
pub fn softmax_rows(x: &[f64], r: usize, c: usize, causal: bool) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let width = if causal { (i + 1).min(c) } else { c };
        let row = &x[i * c..i * c + width];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let out_row = &mut out[i * c..i * c + width];
        let mut total = 0.0;
        for (o, &v) in out_row.iter_mut().zip(row) {
            *o = (v - max).exp();
            total += *o;
        }
        for o in out_row.iter_mut() {
            *o /= total;
        }
    }
    out
}

/// `-log softmax` of one row, computed through log-sum-exp.
pub fn neg_log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for &v in row {
        total += (v - max).exp();
    }
    let lse = max + total.ln();
    row.iter().map(|&v| lse - v).collect()
}

pub struct LayerNormOut {
    pub out: Vec<f64>,
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

/// Per-row normalization with biased variance.
pub fn layer_norm(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    r: usize,
    c: usize,
    eps: f64,
) -> LayerNormOut {
    let mut out = vec![0.0; r * c];
    let mut xhat = vec![0.0; r * c];
    let mut rstd = vec![0.0; r];
    let n = c as f64;
    for i in 0..r {
        let row = &x[i * c..(i + 1) * c];
        let mut sum = 0.0;
        for &v in row {
            sum += v;
        }
        let mean = sum / n;
        let mut sq = 0.0;
        for &v in row {
            sq += (v - mean) * (v - mean);
        }
        let inv = 1.0 / (sq / n + eps).sqrt();
        rstd[i] = inv;
        for j in 0..c {
            let h = (row[j] - mean) * inv;
            xhat[i * c + j] = h;
            out[i * c + j] = h * gamma[j] + beta[j];
        }
    }
    LayerNormOut { out, xhat, rstd }
}

fn gelu_inner(x: f64) -> f64 {
    (2.0 / PI).sqrt() * (x + GELU_CUBIC * x * x * x)
}

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + gelu_inner(x).tanh())
}

pub fn gelu_derivative(x: f64) -> f64 {
    let t = gelu_inner(x).tanh();
    let du = (2.0 / PI).sqrt() * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nt_and_tn_agree_with_explicit_transpose() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect(); // 2×3
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // 4×3
        let bt = transpose(&b, 4, 3);
        assert_eq!(matmul_nt(&a, &b, 2, 3, 4), matmul_raw(&a, &bt, 2, 3, 4));

        let g: Vec<f64> = (0..8).map(|v| (v as f64).cos()).collect(); // 2×4
        let at = transpose(&a, 2, 3);
        assert_eq!(matmul_tn(&a, &g, 2, 3, 4), matmul_raw(&at, &g, 3, 2, 4));
    }

    #[test]
    fn causal_softmax_masks_future() {
        let p = softmax_rows(&[1.0, 2.0, 3.0, 4.0], 2, 2, true);
        assert_eq!(p[0], 1.0);
        assert_eq!(p[1], 0.0);
        assert!((p[2] + p[3] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(10.0) - 10.0).abs() < 1e-6);
        assert!(gelu(-10.0).abs() < 1e-6);
    }
}
