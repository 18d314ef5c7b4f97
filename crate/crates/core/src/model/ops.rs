//! Row-wise numeric kernels.
//!
//! Every path through the model (batch forward, traced forward for training,
//! cached incremental decoding) is built from these functions, applied one
//! frame at a time, so all three produce bit-identical activations.

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Dot product with four independent accumulators (fixed summation order).
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let (ca, ra) = a.split_at(a.len() / 4 * 4);
    let (cb, rb) = b.split_at(ca.len());
    for (x, y) in ca.chunks_exact(4).zip(cb.chunks_exact(4)) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha * x`
#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out = W x + b` with `W` stored row-major as `(out.len(), x.len())`.
pub(crate) fn linear(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let n_in = x.len();
    debug_assert_eq!(w.len(), out.len() * n_in);
    for (o, y) in out.iter_mut().enumerate() {
        *y = b[o] + dot(&w[o * n_in..(o + 1) * n_in], x);
    }
}

/// Accumulates gradients of [`linear`] for one row. Reference for the blocked kernel.
#[cfg(test)]
pub(crate) fn linear_backward(
    w: &[f64],
    x: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    dx: &mut [f64],
) {
    let n_in = x.len();
    for (o, &g) in dy.iter().enumerate() {
        db[o] += g;
        axpy(g, x, &mut dw[o * n_in..(o + 1) * n_in]);
        axpy(g, &w[o * n_in..(o + 1) * n_in], dx);
    }
}

/// Rows processed together by the blocked kernels.
const BLOCK: usize = 4;

/// Four dot products against a shared `w`, each accumulated exactly like [`dot`].
#[inline]
fn dot4(w: &[f64], x: [&[f64]; BLOCK]) -> [f64; BLOCK] {
    let n = w.len() / 4 * 4;
    let mut acc = [[0.0f64; 4]; BLOCK];
    let mut j = 0;
    while j < n {
        for (r, xr) in x.iter().enumerate() {
            acc[r][0] += xr[j] * w[j];
            acc[r][1] += xr[j + 1] * w[j + 1];
            acc[r][2] += xr[j + 2] * w[j + 2];
            acc[r][3] += xr[j + 3] * w[j + 3];
        }
        j += 4;
    }
    let mut out = [0.0; BLOCK];
    for (r, xr) in x.iter().enumerate() {
        let mut tail = 0.0;
        for k in n..w.len() {
            tail += xr[k] * w[k];
        }
        out[r] = (acc[r][0] + acc[r][1]) + (acc[r][2] + acc[r][3]) + tail;
    }
    out
}

/// [`linear`] applied to every row of `xs` (width `n_in`), writing rows of
/// width `b.len()` into `out`. Bit-identical to the row-at-a-time kernel.
pub(crate) fn linear_rows(w: &[f64], b: &[f64], xs: &[f64], n_in: usize, out: &mut [f64]) {
    let n_out = b.len();
    let rows = xs.len() / n_in;
    debug_assert_eq!(out.len(), rows * n_out);
    let full = rows / BLOCK * BLOCK;
    for t0 in (0..full).step_by(BLOCK) {
        let x: [&[f64]; BLOCK] = std::array::from_fn(|r| &xs[(t0 + r) * n_in..(t0 + r + 1) * n_in]);
        for o in 0..n_out {
            let d = dot4(&w[o * n_in..(o + 1) * n_in], x);
            for r in 0..BLOCK {
                out[(t0 + r) * n_out + o] = b[o] + d[r];
            }
        }
    }
    for t in full..rows {
        linear(w, b, &xs[t * n_in..(t + 1) * n_in], &mut out[t * n_out..(t + 1) * n_out]);
    }
}

/// [`linear_backward`] over every row, accumulating in the same order as
/// calling it for rows `0, 1, 2, ...`.
pub(crate) fn linear_rows_backward(
    w: &[f64],
    xs: &[f64],
    dys: &[f64],
    n_in: usize,
    dw: &mut [f64],
    db: &mut [f64],
    dxs: &mut [f64],
) {
    let n_out = db.len();
    let rows = xs.len() / n_in;
    debug_assert_eq!(dys.len(), rows * n_out);
    let mut t0 = 0;
    while t0 < rows {
        let t1 = (t0 + BLOCK).min(rows);
        if t1 - t0 == BLOCK {
            let x: [&[f64]; BLOCK] = std::array::from_fn(|r| &xs[(t0 + r) * n_in..(t0 + r + 1) * n_in]);
            for o in 0..n_out {
                let g: [f64; BLOCK] = std::array::from_fn(|r| dys[(t0 + r) * n_out + o]);
                for &gr in &g {
                    db[o] += gr;
                }
                let dw_row = &mut dw[o * n_in..(o + 1) * n_in];
                for (i, d) in dw_row.iter_mut().enumerate() {
                    *d = *d + g[0] * x[0][i] + g[1] * x[1][i] + g[2] * x[2][i] + g[3] * x[3][i];
                }
            }
        } else {
            for t in t0..t1 {
                for o in 0..n_out {
                    let g = dys[t * n_out + o];
                    db[o] += g;
                    axpy(g, &xs[t * n_in..(t + 1) * n_in], &mut dw[o * n_in..(o + 1) * n_in]);
                }
            }
        }
        for t in t0..t1 {
            let dy = &dys[t * n_out..(t + 1) * n_out];
            let dx = &mut dxs[t * n_in..(t + 1) * n_in];
            let full = n_out / BLOCK * BLOCK;
            for o in (0..full).step_by(BLOCK) {
                let w_rows: [&[f64]; BLOCK] = std::array::from_fn(|r| &w[(o + r) * n_in..(o + r + 1) * n_in]);
                for (i, d) in dx.iter_mut().enumerate() {
                    *d = *d
                        + dy[o] * w_rows[0][i]
                        + dy[o + 1] * w_rows[1][i]
                        + dy[o + 2] * w_rows[2][i]
                        + dy[o + 3] * w_rows[3][i];
                }
            }
            for o in full..n_out {
                axpy(dy[o], &w[o * n_in..(o + 1) * n_in], dx);
            }
        }
        t0 = t1;
    }
}

/// Layer norm of one row. Returns `(mean, rstd)` for the backward pass.
pub(crate) fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], out: &mut [f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * rstd * gain[i] + bias[i];
    }
    (mean, rstd)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm_backward(
    x: &[f64],
    mean: f64,
    rstd: f64,
    gain: &[f64],
    dy: &[f64],
    dx: &mut [f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) {
    let n = x.len() as f64;
    let mut mean_dxhat = 0.0;
    let mut mean_dxhat_xhat = 0.0;
    for i in 0..x.len() {
        let xhat = (x[i] - mean) * rstd;
        let dxhat = dy[i] * gain[i];
        dgain[i] += dy[i] * xhat;
        dbias[i] += dy[i];
        mean_dxhat += dxhat;
        mean_dxhat_xhat += dxhat * xhat;
    }
    mean_dxhat /= n;
    mean_dxhat_xhat /= n;
    for i in 0..x.len() {
        let xhat = (x[i] - mean) * rstd;
        let dxhat = dy[i] * gain[i];
        dx[i] += rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
    }
}

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Numerically stable in-place softmax.
pub(crate) fn softmax_in_place(v: &mut [f64]) {
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

/// Adds the sinusoidal position code for position `pos` to `x`.
pub(crate) fn add_position(pos: usize, x: &mut [f64]) {
    let dim = x.len();
    for i in (0..dim).step_by(2) {
        let freq = 1.0 / 10000f64.powf(i as f64 / dim as f64);
        let angle = pos as f64 * freq;
        x[i] += angle.sin();
        if i + 1 < dim {
            x[i + 1] += angle.cos();
        }
    }
}

/// Causal attention for one query row over `n` cached keys/values.
///
/// `k` and `v` hold `n` rows of width `q.len()`. Attention probabilities are
/// written to `probs` as `num_heads` blocks of `n`.
pub(crate) fn attend(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    n: usize,
    num_heads: usize,
    probs: &mut [f64],
    out: &mut [f64],
) {
    let width = q.len();
    let head_dim = width / num_heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    out.fill(0.0);
    for h in 0..num_heads {
        let hs = h * head_dim..(h + 1) * head_dim;
        let p = &mut probs[h * n..(h + 1) * n];
        for j in 0..n {
            p[j] = dot(&q[hs.clone()], &k[j * width + hs.start..j * width + hs.end]) * scale;
        }
        softmax_in_place(p);
        for j in 0..n {
            axpy(
                p[j],
                &v[j * width + hs.start..j * width + hs.end],
                &mut out[hs.clone()],
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn finite_diff(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn gelu_derivative_matches_finite_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.3, 1.9] {
            assert!((gelu_grad(x) - finite_diff(gelu, x)).abs() < 1e-8);
        }
    }

    #[test]
    fn dot_handles_tails() {
        let a: Vec<f64> = (0..7).map(f64::from).collect();
        assert_eq!(dot(&a, &a), 91.0);
    }

    #[test]
    fn blocked_kernels_match_row_kernels() {
        let (n_in, n_out, rows) = (10, 7, 11);
        let val = |i: usize| ((i * 37 % 101) as f64 - 50.0) / 17.0;
        let w: Vec<f64> = (0..n_in * n_out).map(val).collect();
        let b: Vec<f64> = (0..n_out).map(|i| val(i + 3)).collect();
        let xs: Vec<f64> = (0..rows * n_in).map(|i| val(i + 7)).collect();
        let dys: Vec<f64> = (0..rows * n_out).map(|i| if i % 5 == 0 { 0.0 } else { val(i + 11) }).collect();

        let mut blocked = vec![0.0; rows * n_out];
        linear_rows(&w, &b, &xs, n_in, &mut blocked);
        let mut single = vec![0.0; rows * n_out];
        for t in 0..rows {
            linear(&w, &b, &xs[t * n_in..(t + 1) * n_in], &mut single[t * n_out..(t + 1) * n_out]);
        }
        assert_eq!(blocked, single);

        let (mut dw_a, mut db_a, mut dx_a) = (vec![0.0; w.len()], vec![0.0; n_out], vec![0.0; xs.len()]);
        linear_rows_backward(&w, &xs, &dys, n_in, &mut dw_a, &mut db_a, &mut dx_a);
        let (mut dw_b, mut db_b, mut dx_b) = (vec![0.0; w.len()], vec![0.0; n_out], vec![0.0; xs.len()]);
        for t in 0..rows {
            linear_backward(
                &w,
                &xs[t * n_in..(t + 1) * n_in],
                &dys[t * n_out..(t + 1) * n_out],
                &mut dw_b,
                &mut db_b,
                &mut dx_b[t * n_in..(t + 1) * n_in],
            );
        }
        assert_eq!((dw_a, db_a, dx_a), (dw_b, db_b, dx_b));
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut v = vec![1000.0, 1001.0, 999.0];
        softmax_in_place(&mut v);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(v[1] > v[0] && v[0] > v[2]);
    }

    #[test]
    fn layer_norm_backward_matches_finite_difference() {
        let x = [0.3, -1.2, 2.0, 0.7];
        let g = [1.1, 0.9, -0.5, 1.3];
        let b = [0.0, 0.1, 0.2, -0.3];
        let w = [0.5, -1.0, 0.25, 2.0];
        let obj = |x: &[f64]| {
            let mut out = [0.0; 4];
            layer_norm(x, &g, &b, &mut out);
            dot(&out, &w)
        };
        let mut out = [0.0; 4];
        let (m, r) = layer_norm(&x, &g, &b, &mut out);
        let mut dx = [0.0; 4];
        let (mut dg, mut db) = ([0.0; 4], [0.0; 4]);
        layer_norm_backward(&x, m, r, &g, &w, &mut dx, &mut dg, &mut db);
        for i in 0..4 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += 1e-6;
            xm[i] -= 1e-6;
            let fd = (obj(&xp) - obj(&xm)) / 2e-6;
            assert!((fd - dx[i]).abs() < 1e-7, "{i}: {fd} vs {}", dx[i]);
        }
    }
}
