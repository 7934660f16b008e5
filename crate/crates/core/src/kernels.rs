//! Forward and backward kernels for every primitive, as plain functions on
//! [`Tensor`]s. The autograd graph in [`crate::graph`] dispatches here.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

// ── small dense matrix products (row-major, fixed summation order) ──────

/// `out[m×n] += a[m×k] · b[k×n]`
fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[k×n] += aᵀ · b` where `a` is `m×k` and `b` is `m×n`.
fn gemm_at_b_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            let row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×k] += a · bᵀ` where `a` is `m×n` and `b` is `k×n`.
fn gemm_a_bt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * k + p] += s;
        }
    }
}

// ── convolution ──────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad: usize,
}

pub fn conv_output_hw(h: usize, w: usize, kh: usize, kw: usize, g: ConvGeometry) -> Option<(usize, usize)> {
    let hp = h + 2 * g.pad;
    let wp = w + 2 * g.pad;
    if g.stride == 0 || kh == 0 || kw == 0 || hp < kh || wp < kw {
        return None;
    }
    Some(((hp - kh) / g.stride + 1, (wp - kw) / g.stride + 1))
}

fn check_conv(x: Shape, k: Shape, g: ConvGeometry) -> Result<(usize, usize)> {
    if x.c() != k.c() {
        return Err(Error::ChannelMismatch {
            op: "conv2d",
            expected: k.c(),
            got: x.c(),
        });
    }
    match conv_output_hw(x.h(), x.w(), k.h(), k.w(), g) {
        Some((ho, wo)) if ho > 0 && wo > 0 => Ok((ho, wo)),
        _ => Err(Error::EmptyOutput { op: "conv2d", input: x }),
    }
}

fn is_pointwise(k: Shape, g: ConvGeometry) -> bool {
    k.h() == 1 && k.w() == 1 && g.stride == 1 && g.pad == 0
}

/// Patch matrix `[C·kh·kw × Ho·Wo]` for batch item `n`.
fn im2col(x: &Tensor, n: usize, kh: usize, kw: usize, g: ConvGeometry, ho: usize, wo: usize) -> Vec<f64> {
    let s = x.shape();
    let p = ho * wo;
    let mut cols = vec![0.0; s.c() * kh * kw * p];
    for c in 0..s.c() {
        let plane = x.plane(n, c);
        for i in 0..kh {
            for j in 0..kw {
                let row = &mut cols[((c * kh + i) * kw + j) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= s.h() as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * s.w()..][..s.w()];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        if ix >= 0 && ix < s.w() as isize {
                            row[oy * wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im_acc(cols: &[f64], dx: &mut Tensor, n: usize, kh: usize, kw: usize, g: ConvGeometry, ho: usize, wo: usize) {
    let s = dx.shape();
    let p = ho * wo;
    for c in 0..s.c() {
        let plane = dx.plane_mut(n, c);
        for i in 0..kh {
            for j in 0..kw {
                let row = &cols[((c * kh + i) * kw + j) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= s.h() as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * g.stride + j) as isize - g.pad as isize;
                        if ix >= 0 && ix < s.w() as isize {
                            plane[iy as usize * s.w() + ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation without bias. `kernel` has shape `F×C×kh×kw`.
pub fn conv2d(x: &Tensor, kernel: &Tensor, g: ConvGeometry) -> Result<Tensor> {
    let (xs, ks) = (x.shape(), kernel.shape());
    let (ho, wo) = check_conv(xs, ks, g)?;
    let (f, ckk, p) = (ks.n(), ks.c() * ks.h() * ks.w(), ho * wo);
    let mut out = Tensor::zeros(Shape::new(xs.n(), f, ho, wo));
    for n in 0..xs.n() {
        let dst = &mut out.data_mut()[n * f * p..(n + 1) * f * p];
        if is_pointwise(ks, g) {
            let src = &x.data()[n * ckk * p..(n + 1) * ckk * p];
            gemm_acc(kernel.data(), src, dst, f, ckk, p);
        } else {
            let cols = im2col(x, n, ks.h(), ks.w(), g, ho, wo);
            gemm_acc(kernel.data(), &cols, dst, f, ckk, p);
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input and kernel.
pub fn conv2d_backward(x: &Tensor, kernel: &Tensor, g: ConvGeometry, dy: &Tensor) -> (Tensor, Tensor) {
    let (xs, ks) = (x.shape(), kernel.shape());
    let (ho, wo) = (dy.shape().h(), dy.shape().w());
    let (f, ckk, p) = (ks.n(), ks.c() * ks.h() * ks.w(), ho * wo);
    let mut dx = Tensor::zeros(xs);
    let mut dk = Tensor::zeros(ks);
    for n in 0..xs.n() {
        let dyn_ = &dy.data()[n * f * p..(n + 1) * f * p];
        if is_pointwise(ks, g) {
            let src = &x.data()[n * ckk * p..(n + 1) * ckk * p];
            gemm_a_bt_acc(dyn_, src, dk.data_mut(), f, ckk, p);
            let dst = &mut dx.data_mut()[n * ckk * p..(n + 1) * ckk * p];
            gemm_at_b_acc(kernel.data(), dyn_, dst, f, ckk, p);
        } else {
            let cols = im2col(x, n, ks.h(), ks.w(), g, ho, wo);
            gemm_a_bt_acc(dyn_, &cols, dk.data_mut(), f, ckk, p);
            let mut dcols = vec![0.0; ckk * p];
            gemm_at_b_acc(kernel.data(), dyn_, &mut dcols, f, ckk, p);
            col2im_acc(&dcols, &mut dx, n, ks.h(), ks.w(), g, ho, wo);
        }
    }
    (dx, dk)
}

// ── batch normalization ─────────────────────────────────────────────────

/// Per-channel statistics captured by a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance of the batch.
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
    /// Number of elements per channel.
    pub count: usize,
}

fn check_bn(x: Shape, scale: &[f64], shift: &[f64]) -> Result<usize> {
    if scale.len() != x.c() || shift.len() != x.c() {
        return Err(Error::ChannelMismatch {
            op: "batch_norm",
            expected: x.c(),
            got: scale.len().min(shift.len()),
        });
    }
    let m = x.n() * x.plane();
    if m == 0 {
        return Err(Error::EmptyNormalization);
    }
    Ok(m)
}

pub fn batch_norm_train(x: &Tensor, scale: &[f64], shift: &[f64], eps: f64) -> Result<(Tensor, BatchStats)> {
    let s = x.shape();
    let m = check_bn(s, scale, shift)?;
    let mut mean = vec![0.0; s.c()];
    let mut var = vec![0.0; s.c()];
    for c in 0..s.c() {
        let mut acc = 0.0;
        for n in 0..s.n() {
            acc += x.plane(n, c).iter().sum::<f64>();
        }
        mean[c] = acc / m as f64;
        let mut sq = 0.0;
        for n in 0..s.n() {
            sq += x.plane(n, c).iter().map(|v| (v - mean[c]) * (v - mean[c])).sum::<f64>();
        }
        var[c] = sq / m as f64;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut y = Tensor::zeros(s);
    for n in 0..s.n() {
        for c in 0..s.c() {
            let (mu, is, g, b) = (mean[c], inv_std[c], scale[c], shift[c]);
            for (o, &v) in y.plane_mut(n, c).iter_mut().zip(x.plane(n, c)) {
                *o = g * ((v - mu) * is) + b;
            }
        }
    }
    Ok((y, BatchStats { mean, var, inv_std, count: m }))
}

pub fn batch_norm_eval(x: &Tensor, scale: &[f64], shift: &[f64], running_mean: &[f64], running_var: &[f64], eps: f64) -> Result<Tensor> {
    let s = x.shape();
    check_bn(s, scale, shift)?;
    let mut y = Tensor::zeros(s);
    for c in 0..s.c() {
        let is = 1.0 / (running_var[c] + eps).sqrt();
        for n in 0..s.n() {
            for (o, &v) in y.plane_mut(n, c).iter_mut().zip(x.plane(n, c)) {
                *o = scale[c] * ((v - running_mean[c]) * is) + shift[c];
            }
        }
    }
    Ok(y)
}

/// Returns `(dx, dscale, dshift)` for a training-mode forward pass.
pub fn batch_norm_train_backward(x: &Tensor, scale: &[f64], stats: &BatchStats, dy: &Tensor) -> (Tensor, Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let m = stats.count as f64;
    let mut dx = Tensor::zeros(s);
    let mut dscale = vec![0.0; s.c()];
    let mut dshift = vec![0.0; s.c()];
    for c in 0..s.c() {
        let (mu, is) = (stats.mean[c], stats.inv_std[c]);
        let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
        for n in 0..s.n() {
            for (&g, &v) in dy.plane(n, c).iter().zip(x.plane(n, c)) {
                sum_dy += g;
                sum_dy_xhat += g * (v - mu) * is;
            }
        }
        dshift[c] = sum_dy;
        dscale[c] = sum_dy_xhat;
        let k = scale[c] * is / m;
        for n in 0..s.n() {
            let (dyp, xp) = (dy.plane(n, c), x.plane(n, c));
            for ((o, &g), &v) in dx.plane_mut(n, c).iter_mut().zip(dyp).zip(xp) {
                let xhat = (v - mu) * is;
                *o = k * (m * g - sum_dy - xhat * sum_dy_xhat);
            }
        }
    }
    (dx, dscale, dshift)
}

pub fn batch_norm_eval_backward(x: &Tensor, scale: &[f64], running_mean: &[f64], running_var: &[f64], eps: f64, dy: &Tensor) -> (Tensor, Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let mut dx = Tensor::zeros(s);
    let mut dscale = vec![0.0; s.c()];
    let mut dshift = vec![0.0; s.c()];
    for c in 0..s.c() {
        let is = 1.0 / (running_var[c] + eps).sqrt();
        for n in 0..s.n() {
            let (dyp, xp) = (dy.plane(n, c), x.plane(n, c));
            for ((o, &g), &v) in dx.plane_mut(n, c).iter_mut().zip(dyp).zip(xp) {
                dshift[c] += g;
                dscale[c] += g * (v - running_mean[c]) * is;
                *o = scale[c] * is * g;
            }
        }
    }
    (dx, dscale, dshift)
}

// ── elementwise and channel bookkeeping ─────────────────────────────────

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Subgradient 0 at the kink.
pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (g, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
    dx
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "add",
            detail: format!("{} vs {}", a.shape(), b.shape()),
        });
    }
    let mut out = a.clone();
    out.add_assign(b);
    Ok(out)
}

pub fn channel_concat(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if !sa.same_nhw(&sb) {
        return Err(Error::ShapeMismatch {
            op: "channel_concat",
            detail: format!("{sa} vs {sb}"),
        });
    }
    let p = sa.plane();
    let (la, lb) = (sa.c() * p, sb.c() * p);
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    for n in 0..sa.n() {
        data.extend_from_slice(&a.data()[n * la..(n + 1) * la]);
        data.extend_from_slice(&b.data()[n * lb..(n + 1) * lb]);
    }
    Tensor::from_vec(sa.with_c(sa.c() + sb.c()), data)
}

fn check_add_at(base: Shape, delta: Shape, offset: usize) -> Result<()> {
    if !base.same_nhw(&delta) {
        return Err(Error::ShapeMismatch {
            op: "channel_add_at",
            detail: format!("{base} vs {delta}"),
        });
    }
    if offset + delta.c() > base.c() {
        return Err(Error::RangeOverflow {
            offset,
            end: offset + delta.c(),
            width: base.c(),
        });
    }
    Ok(())
}

/// `base` with `delta` added into channels `[offset, offset + delta.c)`.
pub fn channel_add_at(base: &Tensor, delta: &Tensor, offset: usize) -> Result<Tensor> {
    let (sb, sd) = (base.shape(), delta.shape());
    check_add_at(sb, sd, offset)?;
    let mut out = base.clone();
    for n in 0..sb.n() {
        for c in 0..sd.c() {
            for (o, &d) in out.plane_mut(n, offset + c).iter_mut().zip(delta.plane(n, c)) {
                *o += d;
            }
        }
    }
    Ok(out)
}

// ── pooling ─────────────────────────────────────────────────────────────

pub fn avg_pool(x: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    let s = x.shape();
    if window == 0 || stride == 0 || window > s.h() || window > s.w() {
        return Err(Error::EmptyOutput { op: "avg_pool", input: s });
    }
    let (ho, wo) = ((s.h() - window) / stride + 1, (s.w() - window) / stride + 1);
    let inv = 1.0 / (window * window) as f64;
    let mut out = Tensor::zeros(Shape::new(s.n(), s.c(), ho, wo));
    for n in 0..s.n() {
        for c in 0..s.c() {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for i in 0..window {
                        for j in 0..window {
                            acc += src[(oy * stride + i) * s.w() + ox * stride + j];
                        }
                    }
                    dst[oy * wo + ox] = acc * inv;
                }
            }
        }
    }
    Ok(out)
}

pub fn avg_pool_backward(xs: Shape, window: usize, stride: usize, dy: &Tensor) -> Tensor {
    let (ho, wo) = (dy.shape().h(), dy.shape().w());
    let inv = 1.0 / (window * window) as f64;
    let mut dx = Tensor::zeros(xs);
    for n in 0..xs.n() {
        for c in 0..xs.c() {
            let g = dy.plane(n, c);
            let dst = dx.plane_mut(n, c);
            for oy in 0..ho {
                for ox in 0..wo {
                    let v = g[oy * wo + ox] * inv;
                    for i in 0..window {
                        for j in 0..window {
                            dst[(oy * stride + i) * xs.w() + ox * stride + j] += v;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Max pooling over a `-inf` padded input. Returns the output and, per
/// output element, the flat input offset that won; ties go to the first
/// element in row-major scan order.
pub fn max_pool(x: &Tensor, window: usize, stride: usize, pad: usize) -> Result<(Tensor, Vec<usize>)> {
    let s = x.shape();
    let g = ConvGeometry { stride, pad };
    let (ho, wo) = match conv_output_hw(s.h(), s.w(), window, window, g) {
        Some(hw) if pad < window => hw,
        _ => return Err(Error::EmptyOutput { op: "max_pool", input: s }),
    };
    let mut out = Tensor::zeros(Shape::new(s.n(), s.c(), ho, wo));
    let mut arg = vec![0usize; out.numel()];
    let mut k = 0;
    for n in 0..s.n() {
        for c in 0..s.c() {
            let base = x.offset([n, c, 0, 0]);
            let src = x.plane(n, c);
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = usize::MAX;
                    for i in 0..window {
                        let iy = (oy * stride + i) as isize - pad as isize;
                        if iy < 0 || iy >= s.h() as isize {
                            continue;
                        }
                        for j in 0..window {
                            let ix = (ox * stride + j) as isize - pad as isize;
                            if ix < 0 || ix >= s.w() as isize {
                                continue;
                            }
                            let at = iy as usize * s.w() + ix as usize;
                            if best_at == usize::MAX || src[at] > best {
                                best = src[at];
                                best_at = at;
                            }
                        }
                    }
                    out.data_mut()[k] = best;
                    arg[k] = base + best_at;
                    k += 1;
                }
            }
        }
    }
    Ok((out, arg))
}

pub fn max_pool_backward(xs: Shape, argmax: &[usize], dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(xs);
    for (&at, &g) in argmax.iter().zip(dy.data()) {
        dx.data_mut()[at] += g;
    }
    dx
}

pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.plane() == 0 {
        return Err(Error::EmptyOutput { op: "global_avg_pool", input: s });
    }
    let count = s.plane() as f64;
    let mut out = Tensor::zeros(Shape::new(s.n(), s.c(), 1, 1));
    for n in 0..s.n() {
        for c in 0..s.c() {
            out[[n, c, 0, 0]] = x.plane(n, c).iter().sum::<f64>() / count;
        }
    }
    Ok(out)
}

pub fn global_avg_pool_backward(xs: Shape, dy: &Tensor) -> Tensor {
    let inv = 1.0 / xs.plane() as f64;
    let mut dx = Tensor::zeros(xs);
    for n in 0..xs.n() {
        for c in 0..xs.c() {
            let v = dy[[n, c, 0, 0]] * inv;
            dx.plane_mut(n, c).iter_mut().for_each(|o| *o = v);
        }
    }
    dx
}

// ── classifier ──────────────────────────────────────────────────────────

/// Affine map `N×C×1×1 → N×K×1×1`. `weight` is stored as `K×C×1×1`, `bias`
/// as `1×K×1×1`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (xs, ws) = (x.shape(), weight.shape());
    if xs.h() != 1 || xs.w() != 1 || ws.h() != 1 || ws.w() != 1 {
        return Err(Error::ShapeMismatch {
            op: "linear",
            detail: format!("expects N×C×1×1 input and K×C weight, got {xs} and {ws}"),
        });
    }
    if ws.c() != xs.c() {
        return Err(Error::ChannelMismatch {
            op: "linear",
            expected: ws.c(),
            got: xs.c(),
        });
    }
    if bias.numel() != ws.n() {
        return Err(Error::ShapeMismatch {
            op: "linear",
            detail: format!("bias has {} elements for {} outputs", bias.numel(), ws.n()),
        });
    }
    let (k, c) = (ws.n(), ws.c());
    let mut out = Tensor::zeros(Shape::new(xs.n(), k, 1, 1));
    for n in 0..xs.n() {
        let xr = &x.data()[n * c..(n + 1) * c];
        for j in 0..k {
            let wr = &weight.data()[j * c..(j + 1) * c];
            let mut acc = 0.0;
            for (a, b) in wr.iter().zip(xr) {
                acc += a * b;
            }
            out.data_mut()[n * k + j] = acc + bias.data()[j];
        }
    }
    Ok(out)
}

/// Returns `(dx, dweight, dbias)`.
pub fn linear_backward(x: &Tensor, weight: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let ws = weight.shape();
    let (k, c, nb) = (ws.n(), ws.c(), x.shape().n());
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(ws);
    let mut db = Tensor::zeros(Shape::new(1, k, 1, 1));
    gemm_at_b_acc(dy.data(), x.data(), dw.data_mut(), nb, k, c);
    gemm_acc(dy.data(), weight.data(), dx.data_mut(), nb, k, c);
    for n in 0..nb {
        for j in 0..k {
            db.data_mut()[j] += dy.data()[n * k + j];
        }
    }
    (dx, dw, db)
}

/// Row-wise softmax of `N×K×1×1` logits, stabilised by max subtraction.
pub fn softmax(logits: &Tensor) -> Tensor {
    let s = logits.shape();
    let k = s.c();
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    out
}

fn check_labels(s: Shape, labels: &[usize]) -> Result<()> {
    if s.h() != 1 || s.w() != 1 || labels.len() != s.n() {
        return Err(Error::ShapeMismatch {
            op: "softmax_cross_entropy",
            detail: format!("{} labels for logits {s}", labels.len()),
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= s.c()) {
        return Err(Error::LabelOutOfRange { label, classes: s.c() });
    }
    Ok(())
}

/// Mean negative log-likelihood of `labels` under the softmax of `logits`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let s = logits.shape();
    check_labels(s, labels)?;
    let k = s.c();
    let mut total = 0.0;
    for (row, &y) in logits.data().chunks(k).zip(labels) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() + mx;
        total += lse - row[y];
    }
    Ok(total / s.n() as f64)
}

/// `(softmax(logits) − one_hot(labels)) / N`
pub fn softmax_cross_entropy_backward(logits: &Tensor, labels: &[usize]) -> Tensor {
    let k = logits.shape().c();
    let inv_n = 1.0 / logits.shape().n() as f64;
    let mut g = softmax(logits);
    for (row, &y) in g.data_mut().chunks_mut(k).zip(labels) {
        row[y] -= 1.0;
        row.iter_mut().for_each(|v| *v *= inv_n);
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    fn same() -> ConvGeometry {
        ConvGeometry { stride: 1, pad: 1 }
    }

    #[test]
    fn pointwise_conv_scales() {
        let x = Tensor::full(Shape::new(1, 1, 3, 3), 1.0);
        let k = Tensor::full(Shape::new(1, 1, 1, 1), 2.0);
        let y = conv2d(&x, &k, ConvGeometry { stride: 1, pad: 0 }).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 3, 3));
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn same_padding_preserves_size() {
        let x = Tensor::from_fn(Shape::new(1, 1, 4, 4), |[_, _, h, w]| (h * 4 + w) as f64);
        let k = Tensor::full(Shape::new(1, 1, 3, 3), 1.0);
        let y = conv2d(&x, &k, same()).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 4, 4));
        // corner sees x[0..2, 0..2] = 0 + 1 + 4 + 5
        assert_eq!(y[[0, 0, 0, 0]], 10.0);
    }

    #[test]
    fn conv_matches_direct_loops() {
        let xs = Shape::new(2, 3, 5, 4);
        let ks = Shape::new(2, 3, 3, 3);
        let x = Tensor::from_fn(xs, |[n, c, h, w]| ((n * 7 + c * 5 + h * 3 + w) % 11) as f64 - 5.0);
        let k = Tensor::from_fn(ks, |[f, c, i, j]| ((f * 3 + c * 2 + i + j) % 5) as f64 - 2.0);
        let g = ConvGeometry { stride: 2, pad: 1 };
        let y = conv2d(&x, &k, g).unwrap();
        let (ho, wo) = (y.shape().h(), y.shape().w());
        for n in 0..2 {
            for f in 0..2 {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..3 {
                            for i in 0..3 {
                                for j in 0..3 {
                                    let iy = (oy * 2 + i) as isize - 1;
                                    let ix = (ox * 2 + j) as isize - 1;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < 5 && (ix as usize) < 4 {
                                        acc += x[[n, c, iy as usize, ix as usize]] * k[[f, c, i, j]];
                                    }
                                }
                            }
                        }
                        assert_eq!(y[[n, f, oy, ox]], acc);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_errors() {
        let x = Tensor::zeros(Shape::new(1, 2, 3, 3));
        let k = Tensor::zeros(Shape::new(1, 3, 1, 1));
        assert!(matches!(conv2d(&x, &k, same()), Err(Error::ChannelMismatch { .. })));
        let k = Tensor::zeros(Shape::new(1, 2, 5, 5));
        let g = ConvGeometry { stride: 1, pad: 0 };
        assert!(matches!(conv2d(&x, &k, g), Err(Error::EmptyOutput { .. })));
    }

    #[test]
    fn bn_fixed_point_and_constant_channel() {
        // zero mean, unit (biased) variance per channel
        let x = Tensor::from_vec(Shape::new(2, 1, 1, 2), vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        let (y, _) = batch_norm_train(&x, &[1.0], &[0.0], 1e-5).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-5);

        let x = Tensor::full(Shape::new(2, 1, 3, 3), 4.2);
        let (y, _) = batch_norm_train(&x, &[1.0], &[0.7], 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-12));

        let empty = Tensor::zeros(Shape::new(0, 1, 3, 3));
        assert_eq!(batch_norm_train(&empty, &[1.0], &[0.0], 1e-5).unwrap_err(), Error::EmptyNormalization);
    }

    #[test]
    fn relu_definition() {
        let x = Tensor::from_vec(Shape::new(1, 3, 1, 1), vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let neg = Tensor::full(Shape::new(1, 2, 2, 2), -3.0);
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
        let g = relu_backward(&neg, &Tensor::full(neg.shape(), 1.0));
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn concat_and_add_at() {
        let a = Tensor::full(Shape::new(2, 24, 2, 2), 1.0);
        let b = Tensor::full(Shape::new(2, 12, 2, 2), 2.0);
        let y = channel_concat(&a, &b).unwrap();
        assert_eq!(y.shape().c(), 36);
        assert!(y.channel_range(0, 24).unwrap().bit_eq(&a));
        let empty = Tensor::zeros(Shape::new(2, 0, 2, 2));
        assert!(channel_concat(&a, &empty).unwrap().bit_eq(&a));

        let z = channel_add_at(&a, &b, 12).unwrap();
        assert_eq!(z.shape().c(), 24);
        assert!(z.channel_range(0, 12).unwrap().bit_eq(&a.channel_range(0, 12).unwrap()));
        assert!(z.channel_range(12, 12).unwrap().data().iter().all(|&v| v == 3.0));
        assert!(matches!(channel_add_at(&a, &b, 13), Err(Error::RangeOverflow { .. })));
    }

    #[test]
    fn pooling_examples() {
        let x = Tensor::full(Shape::new(1, 1, 2, 2), 3.5);
        assert_eq!(avg_pool(&x, 2, 2).unwrap().data(), &[3.5]);
        assert!(avg_pool(&x, 3, 1).is_err());

        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, arg) = max_pool(&x, 2, 2, 0).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);

        let c = Tensor::full(Shape::new(1, 1, 2, 2), 1.0);
        let (_, arg) = max_pool(&c, 2, 2, 0).unwrap();
        let dx = max_pool_backward(c.shape(), &arg, &Tensor::full(Shape::new(1, 1, 1, 1), 1.0));
        assert_eq!(dx.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn padded_max_pool_halves_112() {
        let x = Tensor::zeros(Shape::new(1, 1, 112, 112));
        let (y, _) = max_pool(&x, 3, 2, 1).unwrap();
        assert_eq!((y.shape().h(), y.shape().w()), (56, 56));
    }

    #[test]
    fn global_pool_seven_by_seven() {
        let x = Tensor::from_fn(Shape::new(2, 3, 7, 7), |[_, c, _, _]| c as f64);
        let y = global_avg_pool(&x).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 3, 1, 1));
        assert_eq!(y[[1, 2, 0, 0]], 2.0);
        let g = global_avg_pool_backward(x.shape(), &Tensor::full(y.shape(), 1.0));
        assert!(g.data().iter().all(|&v| v == 1.0 / 49.0));
    }

    #[test]
    fn linear_identity() {
        let x = Tensor::from_vec(Shape::new(2, 3, 1, 1), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let w = Tensor::from_fn(Shape::new(3, 3, 1, 1), |[i, j, _, _]| if i == j { 1.0 } else { 0.0 });
        let b = Tensor::zeros(Shape::new(1, 3, 1, 1));
        assert!(linear(&x, &w, &b).unwrap().bit_eq(&x));
        let bad = Tensor::zeros(Shape::new(3, 2, 1, 1));
        assert!(linear(&x, &bad, &b).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let k = 10;
        let logits = Tensor::zeros(Shape::new(3, k, 1, 1));
        let loss = softmax_cross_entropy(&logits, &[0, 4, 9]).unwrap();
        assert!((loss - (k as f64).ln()).abs() < 1e-12);

        let mut sat = Tensor::zeros(Shape::new(1, 4, 1, 1));
        sat.data_mut()[2] = 50.0;
        assert!(softmax_cross_entropy(&sat, &[2]).unwrap() < 1e-8);

        assert_eq!(
            softmax_cross_entropy(&logits, &[0, 10, 1]).unwrap_err(),
            Error::LabelOutOfRange { label: 10, classes: 10 }
        );
    }
}
