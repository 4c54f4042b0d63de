//! Dense row-major kernels used by the forward and backward passes.

pub const LN_EPS: f64 = 1e-5;

/// `out[m x n] += a[m x k] * b[k x n]`
pub fn matmul_add(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m x k] += a[m x n] * b[k x n]^T`
pub fn matmul_bt_add(out: &mut [f64], a: &[f64], b: &[f64], m: usize, n: usize, k: usize) {
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] += dot(arow, &b[p * n..(p + 1) * n]);
        }
    }
}

/// `out[k x n] += a[m x k]^T * b[m x n]`
pub fn matmul_at_add(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in out[p * n..(p + 1) * n].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn add_bias(out: &mut [f64], bias: &[f64]) {
    for row in out.chunks_mut(bias.len()) {
        for (o, b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

pub fn sum_rows_into(out: &mut [f64], x: &[f64]) {
    for row in x.chunks(out.len()) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

/// Normalizes each row of `x`; returns (normalized rows, 1/std per row) and
/// writes the affine output into `y`.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], y: &mut [f64]) -> (Vec<f64>, Vec<f64>) {
    let d = gain.len();
    let rows = x.len() / d;
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for i in 0..d {
            let h = (row[i] - mean) * rs;
            xhat[r * d + i] = h;
            y[r * d + i] = h * gain[i] + bias[i];
        }
    }
    (xhat, rstd)
}

/// Accumulates gain/bias gradients (when given) and adds dx into `dx`.
pub fn layer_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    gain: &[f64],
    mut dgain: Option<&mut [f64]>,
    mut dbias: Option<&mut [f64]>,
    dx: &mut [f64],
) {
    let d = gain.len();
    let mut dxhat = vec![0.0; d];
    for (r, &rs) in rstd.iter().enumerate() {
        let dyr = &dy[r * d..(r + 1) * d];
        let xr = &xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_x = 0.0;
        for i in 0..d {
            dxhat[i] = dyr[i] * gain[i];
            mean_dxhat += dxhat[i];
            mean_dxhat_x += dxhat[i] * xr[i];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_x /= d as f64;
        for i in 0..d {
            dx[r * d + i] += rs * (dxhat[i] - mean_dxhat - xr[i] * mean_dxhat_x);
        }
        if let Some(g) = dgain.as_deref_mut() {
            for i in 0..d {
                g[i] += dyr[i] * xr[i];
            }
        }
        if let Some(b) = dbias.as_deref_mut() {
            for i in 0..d {
                b[i] += dyr[i];
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Tanh-approximated GELU, as in GPT-2.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, -1.0, 2.0, 0.5, 1.0]; // 3x2
        let mut ab = [0.0; 4];
        matmul_add(&mut ab, &a, &b, 2, 3, 2);
        assert_eq!(ab, [0.5, 7.0, 2.0, 16.0]);
        // a * (b^T)^T via bt with bt = b^T (2x3)
        let bt = [1.0, -1.0, 0.5, 0.0, 2.0, 1.0];
        let mut ab2 = [0.0; 4];
        matmul_bt_add(&mut ab2, &a, &bt, 2, 3, 2);
        assert_eq!(ab, ab2);
        // a^T * ab  (3x2)
        let mut atc = [0.0; 6];
        matmul_at_add(&mut atc, &a, &ab, 2, 3, 2);
        assert_eq!(atc[0], 1.0 * 0.5 + 4.0 * 2.0);
    }

    #[test]
    fn gelu_grad_matches_difference_quotient() {
        for &x in &[-3.0, -0.7, 0.0, 0.3, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
        assert_eq!(gelu(0.0), 0.0);
    }

    #[test]
    fn softmax_normalizes() {
        let mut v = vec![1000.0, 1001.0, -5.0];
        softmax_in_place(&mut v);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
