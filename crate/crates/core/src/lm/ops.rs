//! Dense kernels on row-major `f64` buffers.

/// A strided matrix operand: element `(i, j)` lives at `off + i*rs + j*cs`.
#[derive(Clone, Copy)]
pub(crate) struct Mat {
    pub off: usize,
    pub rs: usize,
    pub cs: usize,
}

impl Mat {
    pub fn rows(rs: usize) -> Self {
        Mat { off: 0, rs, cs: 1 }
    }

    pub fn at(off: usize, rs: usize) -> Self {
        Mat { off, rs, cs: 1 }
    }

    /// Transposed view of a row-major block with row stride `rs`.
    pub fn t(off: usize, rs: usize) -> Self {
        Mat { off, rs: 1, cs: rs }
    }

    fn last(&self, rows: usize, cols: usize) -> usize {
        self.off + (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// `C = alpha * A·B + beta * C` with `A: m×k`, `B: k×n`, `C: m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    am: Mat,
    b: &[f64],
    bm: Mat,
    beta: f64,
    c: &mut [f64],
    cm: Mat,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(cm.last(m, n) < c.len(), "gemm: C out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = cm.off + i * cm.rs + j * cm.cs;
                c[idx] = if beta == 0.0 { 0.0 } else { beta * c[idx] };
            }
        }
        return;
    }
    assert!(am.last(m, k) < a.len(), "gemm: A out of bounds");
    assert!(bm.last(k, n) < b.len(), "gemm: B out of bounds");
    // SAFETY: every index touched is bounded by the asserts above, and `c`
    // is borrowed mutably so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(am.off),
            am.rs as isize,
            am.cs as isize,
            b.as_ptr().add(bm.off),
            bm.rs as isize,
            bm.cs as isize,
            beta,
            c.as_mut_ptr().add(cm.off),
            cm.rs as isize,
            cm.cs as isize,
        );
    }
}

pub(crate) const LN_EPS: f64 = 1e-5;

/// Row-wise layer norm. Writes the normalized input to `xhat`, the output to
/// `y` and the reciprocal standard deviations to `rstd`.
pub(crate) fn layer_norm(
    x: &[f64],
    d: usize,
    gamma: &[f64],
    beta: &[f64],
    xhat: &mut [f64],
    rstd: &mut [f64],
    y: &mut [f64],
) {
    for (t, row) in x.chunks_exact(d).enumerate() {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[t] = r;
        for j in 0..d {
            let h = (row[j] - mean) * r;
            xhat[t * d + j] = h;
            y[t * d + j] = gamma[j] * h + beta[j];
        }
    }
}

/// Accumulates layer-norm parameter gradients and adds the input gradient to `dx`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm_backward(
    dy: &[f64],
    d: usize,
    gamma: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
    dx: &mut [f64],
) {
    let mut dxhat = vec![0.0; d];
    for (t, dyr) in dy.chunks_exact(d).enumerate() {
        let xh = &xhat[t * d..(t + 1) * d];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            dgamma[j] += dyr[j] * xh[j];
            dbeta[j] += dyr[j];
            dxhat[j] = dyr[j] * gamma[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let r = rstd[t];
        for j in 0..d {
            dx[t * d + j] += r * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

pub(crate) fn add_bias(y: &mut [f64], bias: &[f64]) {
    for row in y.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

pub(crate) fn add_col_sums(dbias: &mut [f64], dy: &[f64]) {
    for row in dy.chunks_exact(dbias.len()) {
        for (g, v) in dbias.iter_mut().zip(row) {
            *g += v;
        }
    }
}

/// Numerically stable `log(sum(exp(row)))`.
pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

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

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|v| v as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|v| (v as f64).sin()).collect();
        let want = naive(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        gemm(m, k, n, 1.0, &a, Mat::rows(k), &b, Mat::rows(n), 0.0, &mut c, Mat::rows(n));
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        // A^T stored k×m, B^T stored n×k
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c2 = vec![1.0; m * n];
        gemm(m, k, n, 1.0, &at, Mat::t(0, m), &bt, Mat::t(0, k), 0.0, &mut c2, Mat::rows(n));
        for (x, y) in c2.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.3, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn log_sum_exp_is_stable() {
        let v = [1000.0, 1000.0];
        assert!((log_sum_exp(&v) - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }
}
