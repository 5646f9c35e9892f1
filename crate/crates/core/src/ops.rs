//! Numerical kernels behind the tape ops.
//!
//! Kernels are plain functions over flat buffers so they can be unit
//! tested in isolation. Batch-parallel kernels partition work so that
//! every output element is written by exactly one task and every
//! reduction runs in a fixed order; results do not depend on the thread
//! count.

use crate::error::{Error, Result};
use rayon::prelude::*;

/// Output spatial size of a cross-correlation.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> i64 {
    ((input + 2 * padding) as i64 - kernel as i64) / stride as i64 + 1
}

pub fn conv_out_dims(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be positive"));
    }
    let ho = conv_out_dim(h, kh, stride, padding);
    if ho < 1 {
        return Err(Error::DegenerateConvOutput {
            dim: "height",
            value: ho,
            input: h,
            kernel: kh,
            stride,
            padding,
        });
    }
    let wo = conv_out_dim(w, kw, stride, padding);
    if wo < 1 {
        return Err(Error::DegenerateConvOutput {
            dim: "width",
            value: wo,
            input: w,
            kernel: kw,
            stride,
            padding,
        });
    }
    Ok((ho as usize, wo as usize))
}

#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub n: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvDims {
    fn col_rows(&self) -> usize {
        self.ci * self.kh * self.kw
    }
    fn out_spatial(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unrolls one sample into a [ci*kh*kw, ho*wo] patch matrix.
fn im2col(x: &[f32], d: &ConvDims, col: &mut [f32]) {
    let spatial = d.out_spatial();
    debug_assert_eq!(col.len(), d.col_rows() * spatial);
    for ci in 0..d.ci {
        let plane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for kh in 0..d.kh {
            for kw in 0..d.kw {
                let row = ((ci * d.kh + kh) * d.kw + kw) * spatial;
                for oy in 0..d.ho {
                    let iy = (oy * d.stride + kh) as i64 - d.padding as i64;
                    let base = row + oy * d.wo;
                    if iy < 0 || iy >= d.h as i64 {
                        col[base..base + d.wo].fill(0.0);
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..d.wo {
                        let ix = (ox * d.stride + kw) as i64 - d.padding as i64;
                        col[base + ox] = if ix < 0 || ix >= d.w as i64 {
                            0.0
                        } else {
                            plane[iy * d.w + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a patch matrix back onto one input sample.
fn col2im(col: &[f32], d: &ConvDims, dx: &mut [f32]) {
    let spatial = d.out_spatial();
    for ci in 0..d.ci {
        let plane = &mut dx[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for kh in 0..d.kh {
            for kw in 0..d.kw {
                let row = ((ci * d.kh + kh) * d.kw + kw) * spatial;
                for oy in 0..d.ho {
                    let iy = (oy * d.stride + kh) as i64 - d.padding as i64;
                    if iy < 0 || iy >= d.h as i64 {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..d.wo {
                        let ix = (ox * d.stride + kw) as i64 - d.padding as i64;
                        if ix < 0 || ix >= d.w as i64 {
                            continue;
                        }
                        plane[iy * d.w + ix as usize] += col[row + oy * d.wo + ox];
                    }
                }
            }
        }
    }
}

/// Cross-correlation forward: y[n,co] = sum_q k[co,q] * col_n[q].
pub fn conv2d_forward(x: &[f32], k: &[f32], d: &ConvDims) -> Vec<f32> {
    let spatial = d.out_spatial();
    let rows = d.col_rows();
    let sample_in = d.ci * d.h * d.w;
    let sample_out = d.co * spatial;
    let mut y = vec![0.0f32; d.n * sample_out];

    y.par_chunks_mut(sample_out)
        .zip(x.par_chunks(sample_in))
        .for_each(|(yn, xn)| {
            let mut col = vec![0.0f32; rows * spatial];
            im2col(xn, d, &mut col);
            for co in 0..d.co {
                let out = &mut yn[co * spatial..(co + 1) * spatial];
                let krow = &k[co * rows..(co + 1) * rows];
                for (q, &kv) in krow.iter().enumerate() {
                    if kv == 0.0 {
                        continue;
                    }
                    let crow = &col[q * spatial..(q + 1) * spatial];
                    for (o, c) in out.iter_mut().zip(crow) {
                        *o += kv * c;
                    }
                }
            }
        });
    y
}

/// Gradient w.r.t. the kernel. Reduction over samples runs in sample
/// order inside each output-channel task.
pub fn conv2d_backward_kernel(x: &[f32], gy: &[f32], d: &ConvDims) -> Vec<f32> {
    let spatial = d.out_spatial();
    let rows = d.col_rows();
    let sample_in = d.ci * d.h * d.w;
    let sample_out = d.co * spatial;

    let cols: Vec<Vec<f32>> = x
        .par_chunks(sample_in)
        .map(|xn| {
            let mut col = vec![0.0f32; rows * spatial];
            im2col(xn, d, &mut col);
            col
        })
        .collect();

    let mut dk = vec![0.0f32; d.co * rows];
    dk.par_chunks_mut(rows).enumerate().for_each(|(co, dkrow)| {
        for (n, col) in cols.iter().enumerate() {
            let g = &gy[n * sample_out + co * spatial..n * sample_out + (co + 1) * spatial];
            for (q, slot) in dkrow.iter_mut().enumerate() {
                let crow = &col[q * spatial..(q + 1) * spatial];
                let mut acc = 0.0f32;
                for (gv, cv) in g.iter().zip(crow) {
                    acc += gv * cv;
                }
                *slot += acc;
            }
        }
    });
    dk
}

/// Gradient w.r.t. the input.
pub fn conv2d_backward_input(k: &[f32], gy: &[f32], d: &ConvDims) -> Vec<f32> {
    let spatial = d.out_spatial();
    let rows = d.col_rows();
    let sample_in = d.ci * d.h * d.w;
    let sample_out = d.co * spatial;
    let mut dx = vec![0.0f32; d.n * sample_in];

    dx.par_chunks_mut(sample_in)
        .zip(gy.par_chunks(sample_out))
        .for_each(|(dxn, gn)| {
            // dcol = K^T * gy_n, then fold patches back onto the image.
            let mut dcol = vec![0.0f32; rows * spatial];
            for co in 0..d.co {
                let g = &gn[co * spatial..(co + 1) * spatial];
                let krow = &k[co * rows..(co + 1) * rows];
                for (q, &kv) in krow.iter().enumerate() {
                    if kv == 0.0 {
                        continue;
                    }
                    let drow = &mut dcol[q * spatial..(q + 1) * spatial];
                    for (dv, gv) in drow.iter_mut().zip(g) {
                        *dv += kv * gv;
                    }
                }
            }
            col2im(&dcol, d, dxn);
        });
    dx
}

/// Per-channel batch statistics over an [N, C, S] layout, accumulated in
/// f64 and cast down once.
pub struct BatchStats {
    pub mean: Vec<f32>,
    /// Biased variance (divisor N*S).
    pub var: Vec<f32>,
}

pub fn batch_stats(x: &[f32], n: usize, c: usize, s: usize) -> BatchStats {
    let m = (n * s) as f64;
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    for ch in 0..c {
        let mut sum = 0.0f64;
        for i in 0..n {
            let base = (i * c + ch) * s;
            for v in &x[base..base + s] {
                sum += *v as f64;
            }
        }
        let mu = sum / m;
        let mut sq = 0.0f64;
        for i in 0..n {
            let base = (i * c + ch) * s;
            for v in &x[base..base + s] {
                let d = *v as f64 - mu;
                sq += d * d;
            }
        }
        mean[ch] = mu as f32;
        var[ch] = (sq / m) as f32;
    }
    BatchStats { mean, var }
}

/// Normalizes x with the given per-channel mean/invstd and applies the
/// affine transform. Returns (y, xhat).
pub fn bn_apply(
    x: &[f32],
    n: usize,
    c: usize,
    s: usize,
    mean: &[f32],
    invstd: &[f32],
    gamma: &[f32],
    beta: &[f32],
) -> (Vec<f32>, Vec<f32>) {
    let mut y = vec![0.0f32; x.len()];
    let mut xhat = vec![0.0f32; x.len()];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * s;
            let (m, is, g, b) = (mean[ch], invstd[ch], gamma[ch], beta[ch]);
            for j in base..base + s {
                let xh = (x[j] - m) * is;
                xhat[j] = xh;
                y[j] = g * xh + b;
            }
        }
    }
    (y, xhat)
}

/// Backward of batch normalization.
///
/// `train` selects the full formula (grads flow through the batch
/// statistics); eval mode treats mean/var as constants.
#[allow(clippy::too_many_arguments)]
pub fn bn_backward(
    gy: &[f32],
    xhat: &[f32],
    invstd: &[f32],
    gamma: &[f32],
    n: usize,
    c: usize,
    s: usize,
    train: bool,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let m = (n * s) as f64;
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    let mut dx = vec![0.0f32; gy.len()];

    for ch in 0..c {
        let mut sum_gy = 0.0f64;
        let mut sum_gy_xhat = 0.0f64;
        for i in 0..n {
            let base = (i * c + ch) * s;
            for j in base..base + s {
                sum_gy += gy[j] as f64;
                sum_gy_xhat += gy[j] as f64 * xhat[j] as f64;
            }
        }
        dbeta[ch] = sum_gy as f32;
        dgamma[ch] = sum_gy_xhat as f32;

        let g = gamma[ch] as f64;
        let is = invstd[ch] as f64;
        if train {
            let mean_gy = sum_gy / m;
            let mean_gy_xhat = sum_gy_xhat / m;
            for i in 0..n {
                let base = (i * c + ch) * s;
                for j in base..base + s {
                    let t = gy[j] as f64 - mean_gy - xhat[j] as f64 * mean_gy_xhat;
                    dx[j] = (g * is * t) as f32;
                }
            }
        } else {
            for i in 0..n {
                let base = (i * c + ch) * s;
                for j in base..base + s {
                    dx[j] = (g * is * gy[j] as f64) as f32;
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// y = x * w + b for x: [n, ci], w: [ci, k], b: [k].
pub fn linear_forward(x: &[f32], w: &[f32], b: &[f32], n: usize, ci: usize, k: usize) -> Vec<f32> {
    let mut y = vec![0.0f32; n * k];
    for i in 0..n {
        let xr = &x[i * ci..(i + 1) * ci];
        let yr = &mut y[i * k..(i + 1) * k];
        yr.copy_from_slice(b);
        for (q, &xv) in xr.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wr = &w[q * k..(q + 1) * k];
            for (yv, wv) in yr.iter_mut().zip(wr) {
                *yv += xv * wv;
            }
        }
    }
    y
}

pub fn linear_backward(
    x: &[f32],
    w: &[f32],
    gy: &[f32],
    n: usize,
    ci: usize,
    k: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let mut dx = vec![0.0f32; n * ci];
    let mut dw = vec![0.0f32; ci * k];
    let mut db = vec![0.0f32; k];
    for i in 0..n {
        let xr = &x[i * ci..(i + 1) * ci];
        let gr = &gy[i * k..(i + 1) * k];
        for (j, &gv) in gr.iter().enumerate() {
            db[j] += gv;
        }
        for q in 0..ci {
            let wr = &w[q * k..(q + 1) * k];
            let mut acc = 0.0f32;
            for (wv, gv) in wr.iter().zip(gr) {
                acc += wv * gv;
            }
            dx[i * ci + q] = acc;
            let dwr = &mut dw[q * k..(q + 1) * k];
            let xv = xr[q];
            for (dv, gv) in dwr.iter_mut().zip(gr) {
                *dv += xv * gv;
            }
        }
    }
    (dx, dw, db)
}

/// Softmax cross-entropy over logits [n, k]; returns (mean loss, probs).
pub fn softmax_ce_forward(logits: &[f32], labels: &[usize], n: usize, k: usize) -> (f32, Vec<f32>) {
    let mut probs = vec![0.0f32; n * k];
    let mut total = 0.0f64;
    for i in 0..n {
        let row = &logits[i * k..(i + 1) * k];
        let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut denom = 0.0f64;
        for &v in row {
            denom += ((v - mx) as f64).exp();
        }
        let log_denom = denom.ln();
        for (j, &v) in row.iter().enumerate() {
            probs[i * k + j] = ((((v - mx) as f64) - log_denom).exp()) as f32;
        }
        total += log_denom - (row[labels[i]] - mx) as f64;
    }
    ((total / n as f64) as f32, probs)
}
