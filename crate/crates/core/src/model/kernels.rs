//! Dense kernels for the network. Matrices are row-major slices; every
//! routine accumulates into its output.

// Float math for no_std; shadowed by inherent methods whenever std is linked.
#[allow(unused_imports)]
use num_traits::Float;

/// `c[m x n] += a[m x k] * b[k x n]`
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert!(a.len() == m * k && b.len() == k * n && c.len() == m * n);
    // SAFETY: the strides describe exactly the asserted buffer sizes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// `c[m x n] += a[m x k] * b[n x k]^T`
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert!(a.len() == m * k && b.len() == n * k && c.len() == m * n);
    // SAFETY: as in `gemm_nn`, with `b` read column-wise.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// `c[m x n] += a[k x m]^T * b[k x n]`
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert!(a.len() == k * m && b.len() == k * n && c.len() == m * n);
    // SAFETY: as in `gemm_nn`, with `a` read column-wise.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Spatial grid of the convolutional trunk (`rows x cols`, square kernel,
/// stride 1, zero "same" padding).
#[derive(Debug, Clone, Copy)]
pub(crate) struct Grid {
    pub rows: usize,
    pub cols: usize,
    pub kernel: usize,
}

impl Grid {
    pub fn positions(&self) -> usize {
        self.rows * self.cols
    }

    fn pad(&self) -> isize {
        (self.kernel / 2) as isize
    }

    /// Calls `f(dst_index, src_index)` for every in-bounds (patch, position)
    /// pair of one input channel. `dst` indexes the patch-major column
    /// matrix row `(dy, dx)` offset by `b * positions + pos`.
    fn for_each_tap(&self, batch: usize, mut f: impl FnMut(usize, usize, usize)) {
        let pad = self.pad();
        let positions = self.positions();
        let k = self.kernel;
        for dy in 0..k {
            for dx in 0..k {
                let tap = dy * k + dx;
                for b in 0..batch {
                    for r in 0..self.rows {
                        let sr = r as isize + dy as isize - pad;
                        if sr < 0 || sr >= self.rows as isize {
                            continue;
                        }
                        for c in 0..self.cols {
                            let sc = c as isize + dx as isize - pad;
                            if sc < 0 || sc >= self.cols as isize {
                                continue;
                            }
                            let pos = b * positions + r * self.cols + c;
                            let src = b * positions + sr as usize * self.cols + sc as usize;
                            f(tap, pos, src);
                        }
                    }
                }
            }
        }
    }
}

/// Unfolds `input[c_in][batch * positions]` into
/// `cols[c_in * k * k][batch * positions]`.
pub(crate) fn im2col(input: &[f64], c_in: usize, batch: usize, grid: Grid, cols: &mut [f64]) {
    let n = batch * grid.positions();
    let kk = grid.kernel * grid.kernel;
    cols.iter_mut().for_each(|v| *v = 0.0);
    for ci in 0..c_in {
        let src = &input[ci * n..(ci + 1) * n];
        let dst = &mut cols[ci * kk * n..(ci + 1) * kk * n];
        grid.for_each_tap(batch, |tap, pos, s| dst[tap * n + pos] = src[s]);
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub(crate) fn col2im(cols: &[f64], c_in: usize, batch: usize, grid: Grid, input: &mut [f64]) {
    let n = batch * grid.positions();
    let kk = grid.kernel * grid.kernel;
    for ci in 0..c_in {
        let src = &cols[ci * kk * n..(ci + 1) * kk * n];
        let dst = &mut input[ci * n..(ci + 1) * n];
        grid.for_each_tap(batch, |tap, pos, s| dst[s] += src[tap * n + pos]);
    }
}

pub(crate) const BN_EPS: f64 = 1e-5;

/// Batch-norm forward over rows of `x[features][n]` using batch
/// statistics. Writes `xhat`, returns per-feature `(mean, biased var)`.
pub(crate) fn bn_train_forward(
    x: &mut [f64],
    n: usize,
    gamma: &[f64],
    beta: &[f64],
    xhat: &mut [f64],
    inv_std: &mut [f64],
    stats: &mut [(f64, f64)],
) {
    for (f, row) in x.chunks_mut(n).enumerate() {
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let is = 1.0 / (var + BN_EPS).sqrt();
        inv_std[f] = is;
        stats[f] = (mean, var);
        let xh = &mut xhat[f * n..(f + 1) * n];
        for (v, h) in row.iter_mut().zip(xh.iter_mut()) {
            *h = (*v - mean) * is;
            *v = gamma[f] * *h + beta[f];
        }
    }
}

/// Batch-norm forward using fixed running statistics.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_eval_forward(
    x: &mut [f64],
    n: usize,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
    xhat: &mut [f64],
    inv_std: &mut [f64],
) {
    for (f, row) in x.chunks_mut(n).enumerate() {
        let is = 1.0 / (running_var[f] + BN_EPS).sqrt();
        inv_std[f] = is;
        let mean = running_mean[f];
        let xh = &mut xhat[f * n..(f + 1) * n];
        for (v, h) in row.iter_mut().zip(xh.iter_mut()) {
            *h = (*v - mean) * is;
            *v = gamma[f] * *h + beta[f];
        }
    }
}

/// Batch-norm backward. `dy` is overwritten with `dx`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_backward(
    dy: &mut [f64],
    n: usize,
    gamma: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    batch_stats: bool,
    d_gamma: &mut [f64],
    d_beta: &mut [f64],
) {
    for (f, row) in dy.chunks_mut(n).enumerate() {
        let xh = &xhat[f * n..(f + 1) * n];
        let sum_dy: f64 = row.iter().sum();
        let sum_dy_xh = dot(row, xh);
        d_gamma[f] += sum_dy_xh;
        d_beta[f] += sum_dy;
        let g = gamma[f] * inv_std[f];
        if batch_stats {
            let nf = n as f64;
            let mean_dy = sum_dy / nf;
            let mean_dy_xh = sum_dy_xh / nf;
            for (d, h) in row.iter_mut().zip(xh) {
                *d = g * (*d - mean_dy - h * mean_dy_xh);
            }
        } else {
            row.iter_mut().for_each(|d| *d *= g);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;

    fn naive_mm(
        m: usize,
        k: usize,
        n: usize,
        a: impl Fn(usize, usize) -> f64,
        b: impl Fn(usize, usize) -> f64,
    ) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|l| a(i, l) * b(l, j)).sum();
            }
        }
        c
    }

    #[test]
    fn gemm_variants_agree_with_naive() {
        let (m, k, n) = (3, 7, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive_mm(m, k, n, |i, l| a[i * k + l], |l, j| b[l * n + j]);
        let mut c = vec![0.0; m * n];
        gemm_nn(m, k, n, &a, &b, &mut c);
        assert!(c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));

        let bt: Vec<f64> = (0..n * k).map(|i| b[(i % k) * n + i / k]).collect();
        let mut c = vec![0.0; m * n];
        gemm_nt(m, k, n, &a, &bt, &mut c);
        assert!(c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));

        let at: Vec<f64> = (0..k * m).map(|i| a[(i % m) * k + i / m]).collect();
        let mut c = vec![0.0; m * n];
        gemm_tn(m, k, n, &at, &b, &mut c);
        assert!(c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let grid = Grid { rows: 4, cols: 3, kernel: 3 };
        let (c_in, batch) = (2, 2);
        let n = batch * grid.positions();
        let x: Vec<f64> = (0..c_in * n).map(|i| (i as f64 * 0.7).sin()).collect();
        let y: Vec<f64> = (0..c_in * 9 * n).map(|i| (i as f64 * 0.3).cos()).collect();
        let mut cols = vec![0.0; c_in * 9 * n];
        im2col(&x, c_in, batch, grid, &mut cols);
        let mut back = vec![0.0; c_in * n];
        col2im(&y, c_in, batch, grid, &mut back);
        let lhs = dot(&cols, &y);
        let rhs = dot(&x, &back);
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
