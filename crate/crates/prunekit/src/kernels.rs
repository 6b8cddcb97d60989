//! Raw forward/backward compute kernels on plain `f32` buffers.
//!
//! Convolution lowers to im2col plus a row-major matmul. Parallel execution
//! splits work so that every output element is produced by exactly one task
//! with a fixed sequential inner reduction, so results are bit-identical
//! whether the parallel flag is on or off.

use rayon::prelude::*;
use std::sync::atomic::{AtomicBool, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

static PARALLEL: AtomicBool = AtomicBool::new(true);

/// Enable or disable rayon-backed kernels. Off means strictly single-threaded.
pub fn set_parallel_kernels(on: bool) {
    PARALLEL.store(on, Ordering::SeqCst);
}

pub fn parallel_kernels() -> bool {
    PARALLEL.load(Ordering::SeqCst)
}

/// Output spatial extent of a convolution/pool along one axis.
pub fn conv_out_extent(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

fn check_conv_shapes(input: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<(usize, usize)> {
    let (_, ci, h, w) = input.dims4();
    let (_, wci, kh, kw) = weight.dims4();
    if weight.rank() != 4 || kh != kw {
        return Err(Error::Shape(format!(
            "conv weight must be 4-D with square kernel, got {:?}",
            weight.shape()
        )));
    }
    if ci != wci {
        return Err(Error::Shape(format!(
            "conv input has {ci} channels but weight expects {wci}"
        )));
    }
    if stride == 0 {
        return Err(Error::Shape("conv stride must be positive".into()));
    }
    if kh > h + 2 * pad || kh > w + 2 * pad {
        return Err(Error::Shape(format!(
            "kernel {kh} exceeds padded input {}x{}",
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    Ok((conv_out_extent(h, kh, stride, pad), conv_out_extent(w, kh, stride, pad)))
}

/// Expand one image (ci,h,w) into a (ci*k*k) x (oh*ow) patch matrix.
fn im2col(
    x: &[f32],
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    col: &mut [f32],
) {
    let osz = oh * ow;
    for c in 0..ci {
        let xc = &x[c * h * w..(c + 1) * h * w];
        for kh in 0..k {
            for kw in 0..k {
                let base = ((c * k + kh) * k + kw) * osz;
                for oy in 0..oh {
                    let iy = (oy * stride + kh) as isize - pad as isize;
                    let dst = &mut col[base + oy * ow..base + (oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let xrow = &xc[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kw) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize { 0.0 } else { xrow[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Scatter-add a patch matrix back onto one image's gradient.
fn col2im_add(
    col: &[f32],
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dx: &mut [f32],
) {
    let osz = oh * ow;
    for c in 0..ci {
        let xc = &mut dx[c * h * w..(c + 1) * h * w];
        for kh in 0..k {
            for kw in 0..k {
                let base = ((c * k + kh) * k + kw) * osz;
                for oy in 0..oh {
                    let iy = (oy * stride + kh) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &col[base + oy * ow..base + (oy + 1) * ow];
                    let xrow = &mut xc[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &s) in src.iter().enumerate() {
                        let ix = (ox * stride + kw) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            xrow[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

/// out[m x n] = a[m x kk] * b[kk x n]. The k loop is blocked four wide to
/// cut write traffic on the output row, but each output element still
/// accumulates as a strict left-to-right fold over k, so the result is
/// bit-identical to the scalar loop (adding an exactly-zero term is a
/// no-op, which the mask/compact equivalence relies on).
fn matmul_into(a: &[f32], b: &[f32], m: usize, kk: usize, n: usize, out: &mut [f32]) {
    let k4 = kk / 4 * 4;
    for i in 0..m {
        let arow = &a[i * kk..(i + 1) * kk];
        let orow = &mut out[i * n..(i + 1) * n];
        orow.fill(0.0);
        let mut k = 0;
        while k < k4 {
            let (a0, a1, a2, a3) = (arow[k], arow[k + 1], arow[k + 2], arow[k + 3]);
            let b0 = &b[k * n..(k + 1) * n];
            let b1 = &b[(k + 1) * n..(k + 2) * n];
            let b2 = &b[(k + 2) * n..(k + 3) * n];
            let b3 = &b[(k + 3) * n..(k + 4) * n];
            for o in 0..n {
                let mut t = orow[o];
                t += a0 * b0[o];
                t += a1 * b1[o];
                t += a2 * b2[o];
                t += a3 * b3[o];
                orow[o] = t;
            }
            k += 4;
        }
        for k in k4..kk {
            let av = arow[k];
            let brow = &b[k * n..(k + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Dot product over eight fixed accumulator lanes so the reduction can use
/// SIMD; the lane layout never changes, so results are reproducible.
fn dot8(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let ai = &a[c * 8..c * 8 + 8];
        let bi = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += ai[l] * bi[l];
        }
    }
    let mut s = 0.0f32;
    for l in 0..8 {
        s += acc[l];
    }
    for i in chunks * 8..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Bias-free 2-D convolution over NCHW input with an OIHW weight.
pub fn conv2d_forward(input: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (oh, ow) = check_conv_shapes(input, weight, stride, pad)?;
    let (n, ci, h, w) = input.dims4();
    let (co, _, k, _) = weight.dims4();
    let osz = oh * ow;
    let cikk = ci * k * k;
    let mut out = vec![0.0f32; n * co * osz];
    let item = |col: &mut Vec<f32>, xi: &[f32], oi: &mut [f32]| {
        im2col(xi, ci, h, w, k, stride, pad, oh, ow, col);
        matmul_into(weight.data(), col, co, cikk, osz, oi);
    };
    if parallel_kernels() && n > 1 {
        out.par_chunks_mut(co * osz)
            .enumerate()
            .for_each_init(
                || vec![0.0f32; cikk * osz],
                |col, (ni, oi)| item(col, &input.data()[ni * ci * h * w..(ni + 1) * ci * h * w], oi),
            );
    } else {
        let mut col = vec![0.0f32; cikk * osz];
        for ni in 0..n {
            let (xs, os) = (ni * ci * h * w, ni * co * osz);
            item(&mut col, &input.data()[xs..xs + ci * h * w], &mut out[os..os + co * osz]);
        }
    }
    Tensor::new(&[n, co, oh, ow], out)
}

/// Gradients of a convolution w.r.t. its input and weight.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
    pad: usize,
    dout: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (oh, ow) = check_conv_shapes(input, weight, stride, pad)?;
    let (n, ci, h, w) = input.dims4();
    let (co, _, k, _) = weight.dims4();
    let osz = oh * ow;
    let cikk = ci * k * k;
    debug_assert_eq!(dout.shape(), &[n, co, oh, ow]);

    // d/dinput: per item, dcol = W^T * dout_n, then scatter back.
    let mut dx = vec![0.0f32; n * ci * h * w];
    let wdata = weight.data();
    let mut wt = vec![0.0f32; cikk * co];
    for c in 0..co {
        for kidx in 0..cikk {
            wt[kidx * co + c] = wdata[c * cikk + kidx];
        }
    }
    let item_dx = |dcol: &mut Vec<f32>, dyi: &[f32], dxi: &mut [f32]| {
        matmul_into(&wt, dyi, cikk, co, osz, dcol);
        col2im_add(dcol, ci, h, w, k, stride, pad, oh, ow, dxi);
    };
    if parallel_kernels() && n > 1 {
        dx.par_chunks_mut(ci * h * w)
            .enumerate()
            .for_each_init(
                || vec![0.0f32; cikk * osz],
                |dcol, (ni, dxi)| item_dx(dcol, &dout.data()[ni * co * osz..(ni + 1) * co * osz], dxi),
            );
    } else {
        let mut dcol = vec![0.0f32; cikk * osz];
        for ni in 0..n {
            item_dx(
                &mut dcol,
                &dout.data()[ni * co * osz..(ni + 1) * co * osz],
                &mut dx[ni * ci * h * w..(ni + 1) * ci * h * w],
            );
        }
    }

    // d/dweight: per-chunk partials reduced in fixed chunk order so the
    // summation order is independent of thread count.
    let chunks: Vec<(usize, usize)> = {
        let nchunks = 8.min(n);
        let base = n / nchunks;
        let rem = n % nchunks;
        let mut v = Vec::with_capacity(nchunks);
        let mut start = 0;
        for i in 0..nchunks {
            let len = base + usize::from(i < rem);
            v.push((start, start + len));
            start += len;
        }
        v
    };
    let chunk_dw = |range: &(usize, usize)| -> Vec<f32> {
        let mut part = vec![0.0f32; co * cikk];
        let mut col = vec![0.0f32; cikk * osz];
        for ni in range.0..range.1 {
            let xi = &input.data()[ni * ci * h * w..(ni + 1) * ci * h * w];
            im2col(xi, ci, h, w, k, stride, pad, oh, ow, &mut col);
            let dyi = &dout.data()[ni * co * osz..(ni + 1) * co * osz];
            for c in 0..co {
                let dyrow = &dyi[c * osz..(c + 1) * osz];
                let prow = &mut part[c * cikk..(c + 1) * cikk];
                for (kidx, p) in prow.iter_mut().enumerate() {
                    *p += dot8(dyrow, &col[kidx * osz..(kidx + 1) * osz]);
                }
            }
        }
        part
    };
    let partials: Vec<Vec<f32>> = if parallel_kernels() && chunks.len() > 1 {
        chunks.par_iter().map(chunk_dw).collect()
    } else {
        chunks.iter().map(chunk_dw).collect()
    };
    let mut dw = vec![0.0f32; co * cikk];
    for part in &partials {
        for (d, &p) in dw.iter_mut().zip(part) {
            *d += p;
        }
    }

    Ok((
        Tensor::new(&[n, ci, h, w], dx)?,
        Tensor::new(weight.shape(), dw)?,
    ))
}

/// Per-channel batch statistics of an NCHW tensor (biased variance).
pub fn batch_stats(input: &Tensor) -> (Vec<f32>, Vec<f32>) {
    let (n, c, h, w) = input.dims4();
    let m = (n * h * w) as f64;
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    let chw = c * h * w;
    let hw = h * w;
    for ch in 0..c {
        let mut s = 0.0f64;
        for ni in 0..n {
            let base = ni * chw + ch * hw;
            for &v in &input.data()[base..base + hw] {
                s += v as f64;
            }
        }
        let mu = s / m;
        let mut sq = 0.0f64;
        for ni in 0..n {
            let base = ni * chw + ch * hw;
            for &v in &input.data()[base..base + hw] {
                let d = v as f64 - mu;
                sq += d * d;
            }
        }
        mean[ch] = mu as f32;
        var[ch] = (sq / m) as f32;
    }
    (mean, var)
}

/// Normalize with the given per-channel statistics and affine parameters.
pub fn batchnorm_apply(
    input: &Tensor,
    mean: &[f32],
    var: &[f32],
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
) -> Tensor {
    let (n, c, h, w) = input.dims4();
    let hw = h * w;
    let chw = c * hw;
    let mut out = vec![0.0f32; input.numel()];
    let scale: Vec<f32> = (0..c)
        .map(|ch| gamma[ch] / (var[ch] + eps).sqrt())
        .collect();
    let shift: Vec<f32> = (0..c).map(|ch| beta[ch] - scale[ch] * mean[ch]).collect();
    for ni in 0..n {
        for ch in 0..c {
            let base = ni * chw + ch * hw;
            let (sc, sh) = (scale[ch], shift[ch]);
            for (o, &v) in out[base..base + hw].iter_mut().zip(&input.data()[base..base + hw]) {
                *o = v * sc + sh;
            }
        }
    }
    Tensor::new(input.shape(), out).expect("batchnorm_apply shape")
}

/// Backward through train-mode batch normalization (batch statistics).
pub fn batchnorm_backward_train(
    input: &Tensor,
    mean: &[f32],
    var: &[f32],
    gamma: &[f32],
    eps: f32,
    dout: &Tensor,
) -> (Tensor, Vec<f32>, Vec<f32>) {
    let (n, c, h, w) = input.dims4();
    let hw = h * w;
    let chw = c * hw;
    let m = (n * hw) as f64;
    let mut dx = vec![0.0f32; input.numel()];
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    for ch in 0..c {
        let inv_std = 1.0 / ((var[ch] as f64) + eps as f64).sqrt();
        let mu = mean[ch] as f64;
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for ni in 0..n {
            let base = ni * chw + ch * hw;
            for i in 0..hw {
                let dy = dout.data()[base + i] as f64;
                let xhat = (input.data()[base + i] as f64 - mu) * inv_std;
                sum_dy += dy;
                sum_dy_xhat += dy * xhat;
            }
        }
        dbeta[ch] = sum_dy as f32;
        dgamma[ch] = sum_dy_xhat as f32;
        let g = gamma[ch] as f64;
        for ni in 0..n {
            let base = ni * chw + ch * hw;
            for i in 0..hw {
                let dy = dout.data()[base + i] as f64;
                let xhat = (input.data()[base + i] as f64 - mu) * inv_std;
                dx[base + i] =
                    ((g * inv_std) * (dy - sum_dy / m - xhat * sum_dy_xhat / m)) as f32;
            }
        }
    }
    (
        Tensor::new(input.shape(), dx).expect("bn backward shape"),
        dgamma,
        dbeta,
    )
}

/// Backward through eval-mode batch normalization (fixed running statistics).
pub fn batchnorm_backward_eval(
    input: &Tensor,
    mean: &[f32],
    var: &[f32],
    gamma: &[f32],
    eps: f32,
    dout: &Tensor,
) -> (Tensor, Vec<f32>, Vec<f32>) {
    let (n, c, h, w) = input.dims4();
    let hw = h * w;
    let chw = c * hw;
    let mut dx = vec![0.0f32; input.numel()];
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    for ch in 0..c {
        let inv_std = 1.0 / (var[ch] + eps).sqrt();
        let k = gamma[ch] * inv_std;
        let mut dg = 0.0f64;
        let mut db = 0.0f64;
        for ni in 0..n {
            let base = ni * chw + ch * hw;
            for i in 0..hw {
                let dy = dout.data()[base + i];
                let xhat = (input.data()[base + i] - mean[ch]) * inv_std;
                dg += (dy * xhat) as f64;
                db += dy as f64;
                dx[base + i] = dy * k;
            }
        }
        dgamma[ch] = dg as f32;
        dbeta[ch] = db as f32;
    }
    (
        Tensor::new(input.shape(), dx).expect("bn backward shape"),
        dgamma,
        dbeta,
    )
}

/// y = x W^T + b with weight (out, in) and input (n, in).
pub fn linear_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, d_in) = (input.extent(0), input.extent(1));
    let (d_out, wd_in) = (weight.extent(0), weight.extent(1));
    if input.rank() != 2 || weight.rank() != 2 || d_in != wd_in || bias.numel() != d_out {
        return Err(Error::Shape(format!(
            "linear: input {:?} weight {:?} bias {:?}",
            input.shape(),
            weight.shape(),
            bias.shape()
        )));
    }
    let mut out = vec![0.0f32; n * d_out];
    for ni in 0..n {
        let xrow = &input.data()[ni * d_in..(ni + 1) * d_in];
        let orow = &mut out[ni * d_out..(ni + 1) * d_out];
        for (o, or) in orow.iter_mut().enumerate() {
            let wrow = &weight.data()[o * d_in..(o + 1) * d_in];
            let mut acc = bias.data()[o];
            for (&x, &wv) in xrow.iter().zip(wrow) {
                acc += x * wv;
            }
            *or = acc;
        }
    }
    Tensor::new(&[n, d_out], out)
}

pub fn linear_backward(
    input: &Tensor,
    weight: &Tensor,
    dout: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, d_in) = (input.extent(0), input.extent(1));
    let d_out = weight.extent(0);
    let mut dx = vec![0.0f32; n * d_in];
    let mut dw = vec![0.0f32; d_out * d_in];
    let mut db = vec![0.0f32; d_out];
    for ni in 0..n {
        let xrow = &input.data()[ni * d_in..(ni + 1) * d_in];
        let dyrow = &dout.data()[ni * d_out..(ni + 1) * d_out];
        let dxrow = &mut dx[ni * d_in..(ni + 1) * d_in];
        for (o, &dy) in dyrow.iter().enumerate() {
            db[o] += dy;
            let wrow = &weight.data()[o * d_in..(o + 1) * d_in];
            let dwrow = &mut dw[o * d_in..(o + 1) * d_in];
            for i in 0..d_in {
                dxrow[i] += dy * wrow[i];
                dwrow[i] += dy * xrow[i];
            }
        }
    }
    (
        Tensor::new(&[n, d_in], dx).expect("linear dx shape"),
        Tensor::new(&[d_out, d_in], dw).expect("linear dw shape"),
        Tensor::new(&[d_out], db).expect("linear db shape"),
    )
}

/// Mean over the spatial axes: (N,C,H,W) -> (N,C).
pub fn global_avg_pool_forward(input: &Tensor) -> Tensor {
    let (n, c, h, w) = input.dims4();
    let hw = h * w;
    let mut out = vec![0.0f32; n * c];
    for ni in 0..n {
        for ch in 0..c {
            let base = ni * c * hw + ch * hw;
            let mut acc = 0.0f32;
            for &v in &input.data()[base..base + hw] {
                acc += v;
            }
            out[ni * c + ch] = acc / hw as f32;
        }
    }
    Tensor::new(&[n, c], out).expect("gap shape")
}

pub fn global_avg_pool_backward(input_shape: &[usize], dout: &Tensor) -> Tensor {
    let t = Tensor::zeros(input_shape);
    let (n, c, h, w) = t.dims4();
    let hw = h * w;
    let mut dx = t.into_data();
    for ni in 0..n {
        for ch in 0..c {
            let g = dout.data()[ni * c + ch] / hw as f32;
            let base = ni * c * hw + ch * hw;
            for d in &mut dx[base..base + hw] {
                *d = g;
            }
        }
    }
    Tensor::new(input_shape, dx).expect("gap backward shape")
}

/// Max pooling; returns the output and per-cell argmax (flat input offsets).
pub fn max_pool_forward(
    input: &Tensor,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = input.dims4();
    if k > h + 2 * pad || k > w + 2 * pad {
        return Err(Error::Shape(format!("max_pool kernel {k} exceeds padded input")));
    }
    let oh = conv_out_extent(h, k, stride, pad);
    let ow = conv_out_extent(w, k, stride, pad);
    let mut out = vec![0.0f32; n * c * oh * ow];
    let mut arg = vec![0usize; n * c * oh * ow];
    let hw = h * w;
    for ni in 0..n {
        for ch in 0..c {
            let ibase = (ni * c + ch) * hw;
            let obase = (ni * c + ch) * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = ibase + iy as usize * w + ix as usize;
                            let v = input.data()[idx];
                            if v > best {
                                best = v;
                                best_idx = idx;
                            }
                        }
                    }
                    out[obase + oy * ow + ox] = best;
                    arg[obase + oy * ow + ox] = best_idx;
                }
            }
        }
    }
    Ok((Tensor::new(&[n, c, oh, ow], out)?, arg))
}

pub fn max_pool_backward(input_shape: &[usize], argmax: &[usize], dout: &Tensor) -> Tensor {
    let numel: usize = input_shape.iter().product();
    let mut dx = vec![0.0f32; numel];
    for (i, &g) in dout.data().iter().enumerate() {
        dx[argmax[i]] += g;
    }
    Tensor::new(input_shape, dx).expect("max_pool backward shape")
}

/// Average pooling over fully contained windows (no padding).
pub fn avg_pool_forward(input: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4();
    if k > h || k > w {
        return Err(Error::Shape(format!("avg_pool kernel {k} exceeds input {h}x{w}")));
    }
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut out = vec![0.0f32; n * c * oh * ow];
    let hw = h * w;
    let inv = 1.0 / (k * k) as f32;
    for ni in 0..n {
        for ch in 0..c {
            let ibase = (ni * c + ch) * hw;
            let obase = (ni * c + ch) * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f32;
                    for ky in 0..k {
                        let row = ibase + (oy * stride + ky) * w + ox * stride;
                        for kx in 0..k {
                            acc += input.data()[row + kx];
                        }
                    }
                    out[obase + oy * ow + ox] = acc * inv;
                }
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

pub fn avg_pool_backward(input_shape: &[usize], k: usize, stride: usize, dout: &Tensor) -> Tensor {
    let t = Tensor::zeros(input_shape);
    let (n, c, h, w) = t.dims4();
    let mut dx = t.into_data();
    let (_, _, oh, ow) = dout.dims4();
    let hw = h * w;
    let inv = 1.0 / (k * k) as f32;
    for ni in 0..n {
        for ch in 0..c {
            let ibase = (ni * c + ch) * hw;
            let obase = (ni * c + ch) * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = dout.data()[obase + oy * ow + ox] * inv;
                    for ky in 0..k {
                        let row = ibase + (oy * stride + ky) * w + ox * stride;
                        for kx in 0..k {
                            dx[row + kx] += g;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(input_shape, dx).expect("avg_pool backward shape")
}

/// Batch-averaged softmax cross entropy; also returns the softmax probabilities.
pub fn softmax_cross_entropy_forward(logits: &Tensor, labels: &[usize]) -> Result<(f32, Tensor)> {
    let (n, classes) = (logits.extent(0), logits.extent(1));
    if logits.rank() != 2 {
        return Err(Error::Shape(format!("logits must be 2-D, got {:?}", logits.shape())));
    }
    if labels.len() != n {
        return Err(Error::Shape(format!("{n} logits rows but {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Numeric(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let mut probs = vec![0.0f32; n * classes];
    let mut loss = 0.0f64;
    for ni in 0..n {
        let row = &logits.data()[ni * classes..(ni + 1) * classes];
        let maxv = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut denom = 0.0f64;
        for &v in row {
            denom += ((v - maxv) as f64).exp();
        }
        let log_denom = denom.ln();
        for (c, &v) in row.iter().enumerate() {
            probs[ni * classes + c] = (((v - maxv) as f64 - log_denom).exp()) as f32;
        }
        loss -= (row[labels[ni]] - maxv) as f64 - log_denom;
    }
    Ok((
        (loss / n as f64) as f32,
        Tensor::new(&[n, classes], probs)?,
    ))
}

pub fn softmax_cross_entropy_backward(probs: &Tensor, labels: &[usize], upstream: f32) -> Tensor {
    let (n, classes) = (probs.extent(0), probs.extent(1));
    let scale = upstream / n as f32;
    let mut dl = probs.data().to_vec();
    for (ni, &lab) in labels.iter().enumerate() {
        dl[ni * classes + lab] -= 1.0;
    }
    for v in &mut dl {
        *v *= scale;
    }
    Tensor::new(&[n, classes], dl).expect("ce backward shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_identity_kernel_passes_input_through() {
        let input = Tensor::ones(&[1, 1, 3, 3]);
        let weight = Tensor::ones(&[1, 1, 1, 1]);
        let out = conv2d_forward(&input, &weight, 1, 0).unwrap();
        assert_eq!(out.shape(), &[1, 1, 3, 3]);
        assert!(out.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn conv_output_shape_arithmetic() {
        let input = Tensor::zeros(&[1, 2, 8, 8]);
        let weight = Tensor::zeros(&[4, 2, 3, 3]);
        let out = conv2d_forward(&input, &weight, 1, 1).unwrap();
        assert_eq!(out.shape(), &[1, 4, 8, 8]);
        let strided = conv2d_forward(&input, &weight, 2, 1).unwrap();
        assert_eq!(strided.shape(), &[1, 4, 4, 4]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let input = Tensor::zeros(&[1, 3, 8, 8]);
        let weight = Tensor::zeros(&[4, 2, 3, 3]);
        assert!(conv2d_forward(&input, &weight, 1, 1).is_err());
    }

    #[test]
    fn conv_parallel_and_sequential_agree_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = Tensor::randn(&[5, 3, 9, 9], 1.0, &mut rng);
        let weight = Tensor::randn(&[4, 3, 3, 3], 0.5, &mut rng);
        let dout = Tensor::randn(&[5, 4, 9, 9], 1.0, &mut rng);
        set_parallel_kernels(true);
        let out_p = conv2d_forward(&input, &weight, 1, 1).unwrap();
        let (dx_p, dw_p) = conv2d_backward(&input, &weight, 1, 1, &dout).unwrap();
        set_parallel_kernels(false);
        let out_s = conv2d_forward(&input, &weight, 1, 1).unwrap();
        let (dx_s, dw_s) = conv2d_backward(&input, &weight, 1, 1, &dout).unwrap();
        set_parallel_kernels(true);
        assert_eq!(out_p.data(), out_s.data());
        assert_eq!(dx_p.data(), dx_s.data());
        assert_eq!(dw_p.data(), dw_s.data());
    }

    #[test]
    fn batchnorm_identity_on_normalized_input() {
        // Channel values chosen with zero mean and unit (biased) variance.
        let vals = [1.0f32, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0];
        let input = Tensor::new(&[2, 1, 2, 2], vals.to_vec()).unwrap();
        let (mean, var) = batch_stats(&input);
        let out = batchnorm_apply(&input, &mean, &var, &[1.0], &[0.0], 1e-5);
        for (o, i) in out.data().iter().zip(input.data()) {
            assert!((o - i).abs() < 1e-4);
        }
    }

    #[test]
    fn batchnorm_constant_channel_maps_to_beta() {
        let input = Tensor::full(&[2, 1, 3, 3], 4.2);
        let (mean, var) = batch_stats(&input);
        assert!(var[0].abs() < 1e-9);
        let out = batchnorm_apply(&input, &mean, &var, &[1.5], &[0.7], 1e-5);
        for &o in out.data() {
            assert!((o - 0.7).abs() < 1e-4);
        }
    }

    #[test]
    fn softmax_ce_uniform_logits_is_ln_classes() {
        let logits = Tensor::zeros(&[3, 10]);
        let (loss, _) = softmax_cross_entropy_forward(&logits, &[0, 5, 9]).unwrap();
        assert!((loss - (10f32).ln()).abs() < 1e-5, "loss {loss}");
    }

    #[test]
    fn softmax_ce_rejects_out_of_range_label() {
        let logits = Tensor::zeros(&[1, 4]);
        assert!(softmax_cross_entropy_forward(&logits, &[4]).is_err());
    }

    #[test]
    fn max_pool_tracks_argmax() {
        let input = Tensor::new(&[1, 1, 2, 2], vec![1.0, 5.0, 3.0, 2.0]).unwrap();
        let (out, arg) = max_pool_forward(&input, 2, 2, 0).unwrap();
        assert_eq!(out.data(), &[5.0]);
        assert_eq!(arg, vec![1]);
        let dx = max_pool_backward(&[1, 1, 2, 2], &arg, &Tensor::ones(&[1, 1, 1, 1]));
        assert_eq!(dx.data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn avg_pool_halves_even_extent() {
        let input = Tensor::ones(&[1, 2, 4, 4]);
        let out = avg_pool_forward(&input, 2, 2).unwrap();
        assert_eq!(out.shape(), &[1, 2, 2, 2]);
        assert!(out.data().iter().all(|&v| (v - 1.0).abs() < 1e-6));
    }
}
