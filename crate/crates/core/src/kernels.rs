//! Raw numeric kernels shared by the tape ops and by test oracles.
//!
//! All buffers are flat row-major `f64`. Shape checking happens at the tape
//! level; kernels assume conforming sizes.

/// `C[m,n] = A[m,k] * B[k,n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// `dA[m,k] += go[m,n] * B^T`, `dB[k,n] += A^T * go`.
#[allow(clippy::too_many_arguments)]
pub fn matmul_backward(
    a: &[f64],
    b: &[f64],
    go: &[f64],
    m: usize,
    k: usize,
    n: usize,
    da: &mut [f64],
    db: &mut [f64],
) {
    for i in 0..m {
        for p in 0..k {
            let mut acc = 0.0;
            let grow = &go[i * n..(i + 1) * n];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                acc += grow[j] * brow[j];
            }
            da[i * k + p] += acc;
        }
    }
    for p in 0..k {
        for i in 0..m {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let grow = &go[i * n..(i + 1) * n];
            let drow = &mut db[p * n..(p + 1) * n];
            for j in 0..n {
                drow[j] += av * grow[j];
            }
        }
    }
}

/// Output spatial extent of a convolution/pool window sweep.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Output positions whose window taps input column `kx` in bounds:
/// `ix = ox*stride + kx - pad` must land in `[0, extent)`.
fn valid_out_range(extent: usize, out_extent: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi_input = extent + pad;
    let hi = if hi_input > k {
        ((hi_input - k - 1) / stride + 1).min(out_extent)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Zero-padded strided 2-D convolution (cross-correlation, the usual
/// network convention). x: [b, cin, h, w], w: [cout, cin, kh, kw].
/// Loops are ordered kernel-tap-outer so the inner sweep is a tight
/// multiply-add over one row.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    w: &[f64],
    batch: usize,
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = conv_out_extent(h, kh, stride, pad);
    let ow = conv_out_extent(wd, kw, stride, pad);
    let mut out = vec![0.0; batch * cout * oh * ow];
    for b in 0..batch {
        for co in 0..cout {
            let out_base = (b * cout + co) * oh * ow;
            for ci in 0..cin {
                let x_base = (b * cin + ci) * h * wd;
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = valid_out_range(h, oh, ky, stride, pad);
                    for kx in 0..kw {
                        let wv = w[((co * cin + ci) * kh + ky) * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = valid_out_range(wd, ow, kx, stride, pad);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let xrow = x_base + iy * wd;
                            let orow = out_base + oy * ow;
                            for ox in ox_lo..ox_hi {
                                let ix = ox * stride + kx - pad;
                                out[orow + ox] += wv * x[xrow + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of `conv2d` with respect to input and weight.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    go: &[f64],
    batch: usize,
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dx: &mut [f64],
    dw: &mut [f64],
) {
    let oh = conv_out_extent(h, kh, stride, pad);
    let ow = conv_out_extent(wd, kw, stride, pad);
    for b in 0..batch {
        for co in 0..cout {
            let go_base = (b * cout + co) * oh * ow;
            for ci in 0..cin {
                let x_base = (b * cin + ci) * h * wd;
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = valid_out_range(h, oh, ky, stride, pad);
                    for kx in 0..kw {
                        let widx = ((co * cin + ci) * kh + ky) * kw + kx;
                        let wv = w[widx];
                        let (ox_lo, ox_hi) = valid_out_range(wd, ow, kx, stride, pad);
                        let mut wacc = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let xrow = x_base + iy * wd;
                            let grow = go_base + oy * ow;
                            for ox in ox_lo..ox_hi {
                                let ix = ox * stride + kx - pad;
                                let g = go[grow + ox];
                                wacc += g * x[xrow + ix];
                                dx[xrow + ix] += g * wv;
                            }
                        }
                        dw[widx] += wacc;
                    }
                }
            }
        }
    }
}

/// Non-overlapping average pooling with window = stride = `k`, no padding.
pub fn avg_pool2d(
    x: &[f64],
    batch: usize,
    chans: usize,
    h: usize,
    w: usize,
    k: usize,
) -> Vec<f64> {
    let oh = conv_out_extent(h, k, k, 0);
    let ow = conv_out_extent(w, k, k, 0);
    let inv = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; batch * chans * oh * ow];
    for bc in 0..batch * chans {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ky in 0..k {
                    for kx in 0..k {
                        acc += x[(bc * h + oy * k + ky) * w + ox * k + kx];
                    }
                }
                out[(bc * oh + oy) * ow + ox] = acc * inv;
            }
        }
    }
    out
}

pub fn avg_pool2d_backward(
    go: &[f64],
    batch: usize,
    chans: usize,
    h: usize,
    w: usize,
    k: usize,
    dx: &mut [f64],
) {
    let oh = conv_out_extent(h, k, k, 0);
    let ow = conv_out_extent(w, k, k, 0);
    let inv = 1.0 / (k * k) as f64;
    for bc in 0..batch * chans {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = go[(bc * oh + oy) * ow + ox] * inv;
                for ky in 0..k {
                    for kx in 0..k {
                        dx[(bc * h + oy * k + ky) * w + ox * k + kx] += g;
                    }
                }
            }
        }
    }
}

/// Numerically stable softmax over the last axis of a [rows, cols] buffer.
pub fn softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in &mut out[r * cols..(r + 1) * cols] {
            *o /= sum;
        }
    }
    out
}
