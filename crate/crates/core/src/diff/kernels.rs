//! Raw numeric kernels shared by the operator graph and the inference fast paths.

use std::f64::consts::TAU;

/// `c = alpha * a * b + beta * c` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[i * rsc + j * csc] *= beta;
            }
        }
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: a out of bounds");
    assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: b out of bounds");
    assert!((m - 1) * rsc + (n - 1) * csc < c.len(), "gemm: c out of bounds");
    // SAFETY: every index reachable from the given strides and extents was
    // bounds-checked against the slice lengths above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Unfold one batch element `x[c_in, h]` into `cols[c_in * k, out_hi - out_lo]`
/// for output columns `out_lo..out_hi` with zero padding `(k - 1) / 2`.
fn im2col(x: &[f64], c_in: usize, h: usize, k: usize, out_lo: usize, out_hi: usize, cols: &mut [f64]) {
    let pad = (k - 1) / 2;
    let w = out_hi - out_lo;
    for i in 0..c_in {
        let xi = &x[i * h..(i + 1) * h];
        for kk in 0..k {
            let row = &mut cols[(i * k + kk) * w..(i * k + kk + 1) * w];
            for (j, slot) in row.iter_mut().enumerate() {
                let src = (out_lo + j + kk) as isize - pad as isize;
                *slot = if src >= 0 && (src as usize) < h {
                    xi[src as usize]
                } else {
                    0.0
                };
            }
        }
    }
}

fn col2im_add(cols: &[f64], c_in: usize, h: usize, k: usize, dx: &mut [f64]) {
    let pad = (k - 1) / 2;
    for i in 0..c_in {
        let dxi = &mut dx[i * h..(i + 1) * h];
        for kk in 0..k {
            let row = &cols[(i * k + kk) * h..(i * k + kk + 1) * h];
            for (j, &v) in row.iter().enumerate() {
                let src = (j + kk) as isize - pad as isize;
                if src >= 0 && (src as usize) < h {
                    dxi[src as usize] += v;
                }
            }
        }
    }
}

/// Same-length 1-D cross-correlation over a batch, restricted to output
/// columns `out_lo..h`. `x` is `[batch, c_in, h]`; returns `[batch, c_out, h - out_lo]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv1d_forward(
    x: &[f64],
    batch: usize,
    c_in: usize,
    h: usize,
    weight: &[f64],
    bias: &[f64],
    c_out: usize,
    k: usize,
    out_lo: usize,
) -> Vec<f64> {
    let w = h - out_lo;
    let mut out = vec![0.0; batch * c_out * w];
    let mut cols = vec![0.0; c_in * k * w];
    for b in 0..batch {
        im2col(&x[b * c_in * h..(b + 1) * c_in * h], c_in, h, k, out_lo, h, &mut cols);
        let ob = &mut out[b * c_out * w..(b + 1) * c_out * w];
        for (o, row) in ob.chunks_mut(w).enumerate() {
            row.fill(bias[o]);
        }
        gemm(c_out, c_in * k, w, 1.0, weight, c_in * k, 1, &cols, w, 1, 1.0, ob, w, 1);
    }
    out
}

/// Gradients of [`conv1d_forward`] over full columns. Each output buffer is
/// accumulated into when present.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv1d_backward(
    x: &[f64],
    batch: usize,
    c_in: usize,
    h: usize,
    weight: &[f64],
    c_out: usize,
    k: usize,
    dout: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let ck = c_in * k;
    if let Some(db) = db {
        for b in 0..batch {
            for o in 0..c_out {
                let s: f64 = dout[(b * c_out + o) * h..(b * c_out + o + 1) * h].iter().sum();
                db[o] += s;
            }
        }
    }
    let mut cols = vec![0.0; ck * h];
    if let Some(dw) = dw {
        for b in 0..batch {
            im2col(&x[b * c_in * h..(b + 1) * c_in * h], c_in, h, k, 0, h, &mut cols);
            let db_ = &dout[b * c_out * h..(b + 1) * c_out * h];
            // dw[c_out, ck] += dout_b[c_out, h] * cols^T[h, ck]
            gemm(c_out, h, ck, 1.0, db_, h, 1, &cols, 1, h, 1.0, dw, ck, 1);
        }
    }
    if let Some(dx) = dx {
        for b in 0..batch {
            let db_ = &dout[b * c_out * h..(b + 1) * c_out * h];
            // dcols[ck, h] = weight^T[ck, c_out] * dout_b[c_out, h]
            gemm(ck, c_out, h, 1.0, weight, 1, ck, db_, h, 1, 0.0, &mut cols, h, 1);
            col2im_add(&cols, c_in, h, k, &mut dx[b * c_in * h..(b + 1) * c_in * h]);
        }
    }
}

pub(crate) fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

/// Batch-norm statistics per channel over batch and length axes.
/// `x` is `[batch, channels, len]`; returns population mean and variance.
pub(crate) fn channel_stats(x: &[f64], batch: usize, channels: usize, len: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (batch * len) as f64;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for c in 0..channels {
        let mut s = 0.0;
        for b in 0..batch {
            s += x[(b * channels + c) * len..(b * channels + c + 1) * len].iter().sum::<f64>();
        }
        let m = s / n;
        let mut v = 0.0;
        for b in 0..batch {
            v += x[(b * channels + c) * len..(b * channels + c + 1) * len]
                .iter()
                .map(|&e| (e - m) * (e - m))
                .sum::<f64>();
        }
        mean[c] = m;
        var[c] = v / n;
    }
    (mean, var)
}

/// Per-channel affine normalization `gamma * (x - mean) * inv_std + beta`, in place.
#[allow(clippy::too_many_arguments)]
pub(crate) fn channel_affine(
    x: &mut [f64],
    batch: usize,
    channels: usize,
    len: usize,
    mean: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    beta: &[f64],
) {
    for b in 0..batch {
        for c in 0..channels {
            let (m, s, g, bt) = (mean[c], inv_std[c], gamma[c], beta[c]);
            for v in &mut x[(b * channels + c) * len..(b * channels + c + 1) * len] {
                *v = g * ((*v - m) * s) + bt;
            }
        }
    }
}

/// Cosine and sine tables `[bins, h]` for the unnormalized real DFT.
pub(crate) fn dft_tables(h: usize) -> (Vec<f64>, Vec<f64>) {
    let bins = h / 2 + 1;
    let mut cos = vec![0.0; bins * h];
    let mut sin = vec![0.0; bins * h];
    for k in 0..bins {
        for n in 0..h {
            // reduce k*n mod h before scaling to keep the angle exact
            let ang = TAU * ((k * n) % h) as f64 / h as f64;
            cos[k * h + n] = ang.cos();
            sin[k * h + n] = ang.sin();
        }
    }
    (cos, sin)
}
