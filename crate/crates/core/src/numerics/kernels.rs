//! Slice-level dense kernels shared by the forward and backward rules.
//!
//! All loops run in a fixed order so results are bit-reproducible.

#[inline]
fn axpy(out: &mut [f32], alpha: f32, x: &[f32]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

/// `out[m,n] += a[m,k] · b[k,n]`
pub fn matmul_acc(out: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if n == 0 || k == 0 {
        return;
    }
    for (a_row, o_row) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (&av, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
            if av != 0.0 {
                axpy(o_row, av, b_row);
            }
        }
    }
}

/// `a[m,k] · b[k,n]`
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0; m * n];
    matmul_acc(&mut out, a, b, m, k, n);
    out
}

pub fn transpose(x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// `out[m,n] += a[m,k] · b[n,k]ᵀ`
pub fn matmul_nt_acc(out: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    let bt = transpose(b, n, k);
    matmul_acc(out, a, &bt, m, k, n);
}

/// `out[k,n] += a[m,k]ᵀ · c[m,n]`
pub fn matmul_tn_acc(out: &mut [f32], a: &[f32], c: &[f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for (a_row, c_row) in a.chunks_exact(k).zip(c.chunks_exact(n)) {
        for (&av, o_row) in a_row.iter().zip(out.chunks_exact_mut(n)) {
            if av != 0.0 {
                axpy(o_row, av, c_row);
            }
        }
    }
}

pub const GELU_COEF: f32 = 0.044_715;
pub const SQRT_2_OVER_PI: f32 = 0.797_884_6;

/// Tanh-approximated GELU.
#[inline]
pub fn gelu(x: f32) -> f32 {
    let inner = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

#[inline]
pub fn gelu_grad(x: f32) -> f32 {
    let inner = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = inner.tanh();
    let d_inner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

/// In-place softmax of one row. With `visible < row.len()`, entries at and
/// after `visible` are masked to exactly zero.
pub fn softmax_row(row: &mut [f32], visible: usize) {
    let (live, masked) = row.split_at_mut(visible);
    let max = live.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in live.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in live.iter_mut() {
        *v *= inv;
    }
    masked.fill(0.0);
}
