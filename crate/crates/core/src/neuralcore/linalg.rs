//! Dense row-major kernels. Sums use four independent accumulators so the
//! compiler can vectorize them; the summation order is fixed, which keeps
//! results bit-reproducible.

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..n {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += a * x`
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// `out[r] += W[r, cols_range] · x` for a row-major `W` with `stride` columns.
#[inline]
pub fn matvec_add(w: &[f64], stride: usize, col_offset: usize, x: &[f64], out: &mut [f64]) {
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * stride + col_offset..r * stride + col_offset + x.len()];
        *o += dot(row, x);
    }
}

/// `dx += W[:, cols_range]^T · dy`
#[inline]
pub fn matvec_t_add(w: &[f64], stride: usize, col_offset: usize, dy: &[f64], dx: &mut [f64]) {
    let n = dx.len();
    for (r, &g) in dy.iter().enumerate() {
        if g != 0.0 {
            axpy(
                g,
                &w[r * stride + col_offset..r * stride + col_offset + n],
                dx,
            );
        }
    }
}

/// `G[:, cols_range] += dy ⊗ x`
#[inline]
pub fn outer_add(g: &mut [f64], stride: usize, col_offset: usize, dy: &[f64], x: &[f64]) {
    let n = x.len();
    for (r, &d) in dy.iter().enumerate() {
        if d != 0.0 {
            axpy(
                d,
                x,
                &mut g[r * stride + col_offset..r * stride + col_offset + n],
            );
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
