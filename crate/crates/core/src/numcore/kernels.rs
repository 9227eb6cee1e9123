//! Slice-level numeric kernels shared by the autodiff graph and the
//! cache-based inference path.

/// Additive mask applied to attention scores of future positions. `exp` of it
/// is exactly zero, so masked keys receive no probability mass.
pub const CAUSAL_MASK: f64 = f64::NEG_INFINITY;

/// Epsilon inside the RMS normalizer.
pub const RMS_EPS: f64 = 1e-6;

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands.
///
/// `a` is `[m, k]` (or `[k, m]` when `trans_a`), `b` is `[k, n]` (or `[n, k]`
/// when `trans_b`), `c` is `[m, n]`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the m*k, k*n and m*n elements
    // of the slices, whose lengths are checked in debug builds.
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

pub fn matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a, false, b, false, &mut out, 0.0);
    out
}

/// Numerically stable in-place softmax of one contiguous row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Row-wise RMS normalization with a learned gain. Returns the output and the
/// per-row inverse RMS needed by the backward pass.
pub fn rmsnorm(x: &[f64], gain: &[f64], rows: usize) -> (Vec<f64>, Vec<f64>) {
    let d = gain.len();
    let mut out = vec![0.0; rows * d];
    let mut inv = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let ms = xr.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let s = 1.0 / (ms + RMS_EPS).sqrt();
        inv[r] = s;
        for ((o, &xv), &g) in out[r * d..(r + 1) * d].iter_mut().zip(xr).zip(gain) {
            *o = xv * s * g;
        }
    }
    (out, inv)
}

/// Causal multi-head attention over `[t, d]` query/key/value matrices.
/// Returns the `[t, d]` output and the `[heads, t, t]` attention
/// probabilities (zero above the diagonal).
pub fn causal_attention(q: &[f64], k: &[f64], v: &[f64], t: usize, d: usize, heads: usize) -> (Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; t * d];
    let mut probs = vec![0.0; heads * t * t];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..t {
            let p = &mut probs[(h * t + i) * t..(h * t + i + 1) * t];
            let qi = &q[i * d + off..i * d + off + dh];
            for (j, pj) in p.iter_mut().enumerate() {
                *pj = if j <= i {
                    let kj = &k[j * d + off..j * d + off + dh];
                    qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale
                } else {
                    CAUSAL_MASK
                };
            }
            softmax_in_place(p);
            let oi = &mut out[i * d + off..i * d + off + dh];
            for (j, &pj) in p.iter().enumerate().take(i + 1) {
                let vj = &v[j * d + off..j * d + off + dh];
                for (o, &vv) in oi.iter_mut().zip(vj) {
                    *o += pj * vv;
                }
            }
        }
    }
    (out, probs)
}

/// Attention of a single new query row against `len` cached key/value rows.
pub fn attend_one(q: &[f64], keys: &[f64], values: &[f64], len: usize, d: usize, heads: usize) -> Vec<f64> {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; d];
    let mut p = vec![0.0; len];
    for h in 0..heads {
        let off = h * dh;
        let qh = &q[off..off + dh];
        for (j, pj) in p.iter_mut().enumerate() {
            let kj = &keys[j * d + off..j * d + off + dh];
            *pj = qh.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
        }
        softmax_in_place(&mut p);
        let oh = &mut out[off..off + dh];
        for (j, &pj) in p.iter().enumerate() {
            let vj = &values[j * d + off..j * d + off + dh];
            for (o, &vv) in oh.iter_mut().zip(vj) {
                *o += pj * vv;
            }
        }
    }
    out
}
