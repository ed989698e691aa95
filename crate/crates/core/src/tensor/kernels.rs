//! Plain slice kernels shared by the taped ops and the inference paths.
//!
//! Every kernel computes each output row from its own input row in a fixed
//! order, so a row's value never depends on how many other rows are in the
//! batch. The incremental decoder relies on that.

/// `c[m x n] = a[m x k] * b[k x n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `c[k x n] += a[m x k]^T * g[m x n]`.
pub fn matmul_tn_acc(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &gv) in crow.iter_mut().zip(grow) {
                *cv += av * gv;
            }
        }
    }
}

/// `c[m x k] += g[m x n] * b[k x n]^T`.
pub fn matmul_nt_acc(g: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let crow = &mut c[i * k..(i + 1) * k];
        for (p, cv) in crow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            *cv += dot(grow, brow);
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
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

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Tanh-approximated GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Softmax along `axis` of a row-major tensor with the given shape.
pub fn softmax_axis(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for j in 0..n {
                mx = mx.max(x[at(j)]);
            }
            let mut s = 0.0;
            for j in 0..n {
                let e = (x[at(j)] - mx).exp();
                y[at(j)] = e;
                s += e;
            }
            for j in 0..n {
                y[at(j)] /= s;
            }
        }
    }
    y
}

/// In-place softmax of one contiguous slice.
pub fn softmax_in_place(v: &mut [f64]) {
    let mx = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - mx).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let mx = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    mx + v.iter().map(|x| (x - mx).exp()).sum::<f64>().ln()
}

/// Normalizes each row of `x` (`cols` wide); returns `(y, xhat, rstd)`.
pub fn layer_norm(
    x: &[f64],
    cols: usize,
    gain: &[f64],
    bias: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / cols;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let mean = xr.iter().sum::<f64>() / cols as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..cols {
            let h = (xr[c] - mean) * rs;
            xhat[r * cols + c] = h;
            y[r * cols + c] = h * gain[c] + bias[c];
        }
    }
    (y, xhat, rstd)
}

/// Rotary phase rotation of query/key rows. `sign = -1.0` applies the inverse.
pub fn rotary(x: &[f64], cols: usize, pos: &[usize], heads: usize, sign: f64) -> Vec<f64> {
    let dh = cols / heads;
    let half = dh / 2;
    let mut y = x.to_vec();
    for (r, &p) in pos.iter().enumerate() {
        for h in 0..heads {
            let base = r * cols + h * dh;
            for i in 0..half {
                let theta = p as f64 * ROPE_BASE.powf(-2.0 * i as f64 / dh as f64);
                let (s, c) = (sign * theta).sin_cos();
                let a = x[base + 2 * i];
                let b = x[base + 2 * i + 1];
                y[base + 2 * i] = a * c - b * s;
                y[base + 2 * i + 1] = a * s + b * c;
            }
        }
    }
    y
}

pub const ROPE_BASE: f64 = 10_000.0;

/// Number of keys visible to a query at `qp` when key positions are sorted.
#[inline]
pub fn visible_keys(k_pos: &[usize], qp: usize) -> usize {
    k_pos.partition_point(|&kp| kp <= qp)
}

/// Multi-head causal attention by position. `k_pos` must be ascending.
/// Returns the `[tq x d]` output and per-head probabilities laid out as
/// `[heads][tq][tk]` (zero where masked).
pub fn attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: usize,
    q_pos: &[usize],
    k_pos: &[usize],
    heads: usize,
    keep_probs: bool,
) -> (Vec<f64>, Vec<f64>) {
    let tq = q_pos.len();
    let tk = k_pos.len();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; tq * d];
    let mut probs = if keep_probs { vec![0.0; heads * tq * tk] } else { Vec::new() };
    let mut p = vec![0.0; tk];
    for i in 0..tq {
        let nvis = visible_keys(k_pos, q_pos[i]);
        if nvis == 0 {
            continue;
        }
        for h in 0..heads {
            let qh = &q[i * d + h * dh..i * d + (h + 1) * dh];
            for j in 0..nvis {
                p[j] = dot(qh, &k[j * d + h * dh..j * d + (h + 1) * dh]) * scale;
            }
            softmax_in_place(&mut p[..nvis]);
            let oh = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
            for j in 0..nvis {
                let vh = &v[j * d + h * dh..j * d + (h + 1) * dh];
                let pj = p[j];
                for (o, &vv) in oh.iter_mut().zip(vh) {
                    *o += pj * vv;
                }
            }
            if keep_probs {
                probs[(h * tq + i) * tk..(h * tq + i) * tk + nvis].copy_from_slice(&p[..nvis]);
            }
        }
    }
    (out, probs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_closed_forms() {
        let y = softmax_axis(&[0.0, 0.0], &[2], 0);
        assert_eq!(y, vec![0.5, 0.5]);
        let y = softmax_axis(&[1f64.ln(), 3f64.ln()], &[2], 0);
        assert!((y[0] - 0.25).abs() < 1e-15 && (y[1] - 0.75).abs() < 1e-15);
        let y = softmax_axis(&[1000.0, 0.0], &[2], 0);
        assert!(y.iter().all(|v| v.is_finite()));
        assert!((y[0] - 1.0).abs() < 1e-12 && y[1] < 1e-300);
    }

    #[test]
    fn softmax_middle_axis() {
        // shape [2, 3, 2]: softmax over the 3-axis
        let x: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let y = softmax_axis(&x, &[2, 3, 2], 1);
        for o in 0..2 {
            for i in 0..2 {
                let s: f64 = (0..3).map(|j| y[o * 6 + j * 2 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(3f64.ln()) - 0.75).abs() < 1e-15);
        assert!((sigmoid(-(3f64.ln())) - 0.25).abs() < 1e-15);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn layer_norm_cases() {
        let (y, _, _) = layer_norm(&[2.0, 2.0, 2.0], 3, &[1.0; 3], &[0.0; 3], 1e-5);
        assert_eq!(y, vec![0.0; 3]);
        let (y, _, _) = layer_norm(&[1.0, -1.0], 2, &[1.0; 2], &[0.0; 2], 0.0);
        assert_eq!(y, vec![1.0, -1.0]);
        let (y, _, _) = layer_norm(&[3.0, -1.0, 7.0], 3, &[0.0; 3], &[0.5, 0.25, -2.0], 1e-5);
        assert_eq!(y, vec![0.5, 0.25, -2.0]);
    }

    #[test]
    fn rotary_inverse_round_trips() {
        let x: Vec<f64> = (0..16).map(|i| i as f64 - 7.5).collect();
        let pos = [3, 11];
        let y = rotary(&x, 8, &pos, 2, 1.0);
        let z = rotary(&y, 8, &pos, 2, -1.0);
        for (a, b) in x.iter().zip(&z) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_single_key_copies_value() {
        let q = vec![0.3, -0.2];
        let k = vec![1.0, 1.0];
        let v = vec![5.0, -4.0];
        let (o, _) = attention(&q, &k, &v, 2, &[0], &[0], 1, false);
        assert_eq!(o, vec![5.0, -4.0]);
    }
}
