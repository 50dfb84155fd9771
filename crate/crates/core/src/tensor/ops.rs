//! Differentiable op constructors and their backward rules.
//!
//! Every constructor validates shapes, computes the forward value eagerly,
//! and records an [`Op`] node so [`Tensor::backward`] can dispatch to
//! [`backward_op`]. Reductions and scatters loop in fixed order; nothing
//! here depends on iteration order of a hash map.

use super::kernels;
use super::{Op, Scalar, Shape, Tensor};
use crate::error::{Error, Result};

fn check_same_shape<E: Scalar>(what: &str, a: &Tensor<E>, b: &Tensor<E>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim("shape", format!("{}: {} vs {}", what, a.shape(), b.shape())));
    }
    Ok(())
}

pub fn add<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    check_same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| *x + *y).collect();
    Ok(Tensor::from_op(a.shape(), data, Op::Add(a.clone(), b.clone())))
}

pub fn sub<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    check_same_shape("sub", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| *x - *y).collect();
    Ok(Tensor::from_op(a.shape(), data, Op::Sub(a.clone(), b.clone())))
}

/// Elementwise (Hadamard) product.
pub fn mul<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    check_same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| *x * *y).collect();
    Ok(Tensor::from_op(a.shape(), data, Op::Mul(a.clone(), b.clone())))
}

pub fn scale<E: Scalar>(a: &Tensor<E>, s: E) -> Tensor<E> {
    let data = a.data().iter().map(|x| *x * s).collect();
    Tensor::from_op(a.shape(), data, Op::Scale(a.clone(), s))
}

pub fn relu<E: Scalar>(a: &Tensor<E>) -> Tensor<E> {
    let data = a.data().iter().map(|x| if *x > E::zero() { *x } else { E::zero() }).collect();
    Tensor::from_op(a.shape(), data, Op::Relu(a.clone()))
}

pub fn sigmoid<E: Scalar>(a: &Tensor<E>) -> Tensor<E> {
    let data = a
        .data()
        .iter()
        .map(|x| {
            // Split on sign so the exponential never overflows.
            if *x >= E::zero() {
                E::one() / (E::one() + (-*x).exp())
            } else {
                let e = x.exp();
                e / (E::one() + e)
            }
        })
        .collect();
    Tensor::from_op(a.shape(), data, Op::Sigmoid(a.clone()))
}

/// Sum of every element, as a (1,1,1,1) tensor.
pub fn sum_all<E: Scalar>(a: &Tensor<E>) -> Tensor<E> {
    let mut s = E::zero();
    for v in a.data() {
        s += *v;
    }
    Tensor::from_op(Shape::scalar(), vec![s], Op::SumAll(a.clone()))
}

pub fn mean_all<E: Scalar>(a: &Tensor<E>) -> Tensor<E> {
    let n = E::from_f64(a.shape().numel() as f64);
    scale(&sum_all(a), E::one() / n)
}

/// Reduce (N,C,H,W) -> (N,1,H,W) by summing over channels.
pub fn sum_channels<E: Scalar>(a: &Tensor<E>) -> Tensor<E> {
    let s = a.shape();
    let out_shape = Shape::new(s.n, 1, s.h, s.w);
    let mut data = vec![E::zero(); out_shape.numel()];
    let plane = s.h * s.w;
    for n in 0..s.n {
        for c in 0..s.c {
            let src = &a.data()[(n * s.c + c) * plane..(n * s.c + c + 1) * plane];
            let dst = &mut data[n * plane..(n + 1) * plane];
            for (d, v) in dst.iter_mut().zip(src) {
                *d += *v;
            }
        }
    }
    Tensor::from_op(out_shape, data, Op::SumChannels(a.clone()))
}

/// 2-D convolution, square kernel, symmetric zero padding.
/// `w` is (Cout, Cin, K, K); `b`, when present, is (1, Cout, 1, 1).
pub fn conv2d<E: Scalar>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    b: Option<&Tensor<E>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<E>> {
    let xs = x.shape();
    let ws = w.shape();
    if ws.h != ws.w {
        return Err(Error::dim("K", format!("kernel must be square, got {}x{}", ws.h, ws.w)));
    }
    if xs.c != ws.c {
        return Err(Error::dim(
            "C",
            format!("input has {} channels, kernel expects {}", xs.c, ws.c),
        ));
    }
    if let Some(b) = b {
        let bs = b.shape();
        if bs != Shape::new(1, ws.n, 1, 1) {
            return Err(Error::dim(
                "C",
                format!("bias shape {} does not match {} output channels", bs, ws.n),
            ));
        }
    }
    let oh = kernels::conv_out_len(xs.h, ws.h, stride, pad).ok_or_else(|| {
        Error::dim("H", format!("conv output empty: H={} K={} pad={}", xs.h, ws.h, pad))
    })?;
    let ow = kernels::conv_out_len(xs.w, ws.w, stride, pad).ok_or_else(|| {
        Error::dim("W", format!("conv output empty: W={} K={} pad={}", xs.w, ws.w, pad))
    })?;
    let dims = kernels::ConvDims { k: ws.h, stride, pad, oh, ow };
    let data = kernels::conv2d_forward(x.data(), xs, w.data(), ws.n, &dims, b.map(|t| t.data()));
    Ok(Tensor::from_op(
        Shape::new(xs.n, ws.n, oh, ow),
        data,
        Op::Conv2d { x: x.clone(), w: w.clone(), b: b.cloned(), stride, pad },
    ))
}

/// Pixel-wise linear layer: a 1x1 convolution with bias.
pub fn linear_1x1<E: Scalar>(x: &Tensor<E>, w: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if w.shape().h != 1 || w.shape().w != 1 {
        return Err(Error::dim("K", format!("linear_1x1 wants a 1x1 kernel, got {}", w.shape())));
    }
    conv2d(x, w, Some(b), 1, 0)
}

/// Per-channel running statistics for batch normalization.
#[derive(Clone)]
pub struct BnState<E: Scalar> {
    pub running_mean: Vec<E>,
    pub running_var: Vec<E>,
    pub momentum: E,
    pub eps: E,
}

impl<E: Scalar> BnState<E> {
    pub fn new(channels: usize, momentum: E, eps: E) -> Self {
        BnState {
            running_mean: vec![E::zero(); channels],
            running_var: vec![E::one(); channels],
            momentum,
            eps,
        }
    }
}

fn bn_check<E: Scalar>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    state_c: usize,
) -> Result<()> {
    let c = x.shape().c;
    let want = Shape::new(1, c, 1, 1);
    if gamma.shape() != want || beta.shape() != want {
        return Err(Error::dim(
            "C",
            format!(
                "batchnorm affine shapes {} / {} do not match {} channels",
                gamma.shape(),
                beta.shape(),
                c
            ),
        ));
    }
    if state_c != c {
        return Err(Error::dim(
            "C",
            format!("batchnorm state has {} channels, input {}", state_c, c),
        ));
    }
    Ok(())
}

/// Batch norm in training mode: normalizes with batch statistics (biased
/// variance) and folds the batch into the running estimates (unbiased
/// variance, `new = (1-momentum)*old + momentum*batch`).
#[allow(clippy::needless_range_loop)]
pub fn batchnorm2d_train<E: Scalar>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    state: &mut BnState<E>,
) -> Result<Tensor<E>> {
    bn_check(x, gamma, beta, state.running_mean.len())?;
    let s = x.shape();
    let m = (s.n * s.h * s.w) as f64;
    if m < 1.0 {
        return Err(Error::Contract("batchnorm on empty batch".into()));
    }
    let plane = s.h * s.w;
    let inv_m = E::from_f64(1.0 / m);
    let mut data = vec![E::zero(); s.numel()];
    let mut xhat = vec![E::zero(); s.numel()];
    let mut inv_std = vec![E::zero(); s.c];
    for c in 0..s.c {
        let mut mean = E::zero();
        for n in 0..s.n {
            for v in &x.data()[(n * s.c + c) * plane..(n * s.c + c + 1) * plane] {
                mean += *v;
            }
        }
        mean *= inv_m;
        let mut var = E::zero();
        for n in 0..s.n {
            for v in &x.data()[(n * s.c + c) * plane..(n * s.c + c + 1) * plane] {
                let d = *v - mean;
                var += d * d;
            }
        }
        var *= inv_m;
        let istd = E::one() / (var + state.eps).sqrt();
        inv_std[c] = istd;
        let (g, b) = (gamma.data()[c], beta.data()[c]);
        for n in 0..s.n {
            let base = (n * s.c + c) * plane;
            for i in 0..plane {
                let xh = (x.data()[base + i] - mean) * istd;
                xhat[base + i] = xh;
                data[base + i] = g * xh + b;
            }
        }
        let unbias = if m > 1.0 { E::from_f64(m / (m - 1.0)) } else { E::one() };
        let mom = state.momentum;
        state.running_mean[c] = (E::one() - mom) * state.running_mean[c] + mom * mean;
        state.running_var[c] = (E::one() - mom) * state.running_var[c] + mom * var * unbias;
    }
    Ok(Tensor::from_op(
        s,
        data,
        Op::BatchNorm {
            x: x.clone(),
            gamma: gamma.clone(),
            beta: beta.clone(),
            xhat,
            inv_std,
            train: true,
        },
    ))
}

/// Batch norm in eval mode: normalizes with the running statistics and
/// leaves them untouched.
#[allow(clippy::needless_range_loop)]
pub fn batchnorm2d_eval<E: Scalar>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    state: &BnState<E>,
) -> Result<Tensor<E>> {
    bn_check(x, gamma, beta, state.running_mean.len())?;
    let s = x.shape();
    let plane = s.h * s.w;
    let mut data = vec![E::zero(); s.numel()];
    let mut xhat = vec![E::zero(); s.numel()];
    let mut inv_std = vec![E::zero(); s.c];
    for c in 0..s.c {
        let mean = state.running_mean[c];
        let istd = E::one() / (state.running_var[c] + state.eps).sqrt();
        inv_std[c] = istd;
        let (g, b) = (gamma.data()[c], beta.data()[c]);
        for n in 0..s.n {
            let base = (n * s.c + c) * plane;
            for i in 0..plane {
                let xh = (x.data()[base + i] - mean) * istd;
                xhat[base + i] = xh;
                data[base + i] = g * xh + b;
            }
        }
    }
    Ok(Tensor::from_op(
        s,
        data,
        Op::BatchNorm {
            x: x.clone(),
            gamma: gamma.clone(),
            beta: beta.clone(),
            xhat,
            inv_std,
            train: false,
        },
    ))
}

fn check_even_hw<E: Scalar>(what: &str, x: &Tensor<E>) -> Result<()> {
    let s = x.shape();
    if !s.h.is_multiple_of(2) {
        return Err(Error::dim("H", format!("{} needs even height, got {}", what, s.h)));
    }
    if !s.w.is_multiple_of(2) {
        return Err(Error::dim("W", format!("{} needs even width, got {}", what, s.w)));
    }
    Ok(())
}

pub fn avgpool2x2<E: Scalar>(x: &Tensor<E>) -> Result<Tensor<E>> {
    check_even_hw("avgpool2x2", x)?;
    let s = x.shape();
    let (oh, ow) = (s.h / 2, s.w / 2);
    let quarter = E::from_f64(0.25);
    let mut data = vec![E::zero(); s.n * s.c * oh * ow];
    for p in 0..s.n * s.c {
        let src = &x.data()[p * s.h * s.w..(p + 1) * s.h * s.w];
        let dst = &mut data[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let i = 2 * oy * s.w + 2 * ox;
                dst[oy * ow + ox] =
                    (src[i] + src[i + 1] + src[i + s.w] + src[i + s.w + 1]) * quarter;
            }
        }
    }
    Ok(Tensor::from_op(Shape::new(s.n, s.c, oh, ow), data, Op::AvgPool2(x.clone())))
}

/// 2x2/stride-2 max pool. Ties resolve to the first element in scan order
/// (top-left first), which keeps backward routing deterministic.
pub fn maxpool2x2<E: Scalar>(x: &Tensor<E>) -> Result<Tensor<E>> {
    check_even_hw("maxpool2x2", x)?;
    let s = x.shape();
    debug_assert!(s.numel() < u32::MAX as usize);
    let (oh, ow) = (s.h / 2, s.w / 2);
    let mut data = vec![E::zero(); s.n * s.c * oh * ow];
    let mut argmax = vec![0u32; s.n * s.c * oh * ow];
    for p in 0..s.n * s.c {
        let base = p * s.h * s.w;
        let src = &x.data()[base..base + s.h * s.w];
        for oy in 0..oh {
            for ox in 0..ow {
                let i = 2 * oy * s.w + 2 * ox;
                let cand = [i, i + 1, i + s.w, i + s.w + 1];
                let mut best = cand[0];
                for &j in &cand[1..] {
                    if src[j] > src[best] {
                        best = j;
                    }
                }
                let o = p * oh * ow + oy * ow + ox;
                data[o] = src[best];
                argmax[o] = (base + best) as u32;
            }
        }
    }
    Ok(Tensor::from_op(Shape::new(s.n, s.c, oh, ow), data, Op::MaxPool2 { x: x.clone(), argmax }))
}

/// Bilinear 2x upsample (half-pixel centers, edges clamped).
pub fn upsample_bilinear2x<E: Scalar>(x: &Tensor<E>) -> Tensor<E> {
    let s = x.shape();
    let data = kernels::upsample2_forward(x.data(), s);
    Tensor::from_op(Shape::new(s.n, s.c, 2 * s.h, 2 * s.w), data, Op::Upsample2(x.clone()))
}

pub fn concat_channels<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n != sb.n {
        return Err(Error::dim("N", format!("concat: {} vs {}", sa.n, sb.n)));
    }
    if sa.h != sb.h || sa.w != sb.w {
        return Err(Error::dim("HW", format!("concat: {}x{} vs {}x{}", sa.h, sa.w, sb.h, sb.w)));
    }
    let out = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
    let plane = sa.h * sa.w;
    let mut data = vec![E::zero(); out.numel()];
    for n in 0..sa.n {
        let dst = &mut data[n * out.c * plane..(n + 1) * out.c * plane];
        dst[..sa.c * plane].copy_from_slice(&a.data()[n * sa.c * plane..(n + 1) * sa.c * plane]);
        dst[sa.c * plane..].copy_from_slice(&b.data()[n * sb.c * plane..(n + 1) * sb.c * plane]);
    }
    Ok(Tensor::from_op(out, data, Op::ConcatChannels(a.clone(), b.clone())))
}

/// Bilinear sampling of `x` at `grid` positions. Grid layout is
/// (N, 2, GH, GW) with channel 0 = normalized x in [-1, 1] and channel 1 =
/// normalized y (align-corners convention). Samples outside the image read
/// as zero. The grid is treated as a constant: backward produces a gradient
/// for the image only.
pub fn grid_sample_bilinear<E: Scalar>(x: &Tensor<E>, grid: &Tensor<E>) -> Result<Tensor<E>> {
    let xs = x.shape();
    let gs = grid.shape();
    if gs.c != 2 {
        return Err(Error::dim("C", format!("grid needs 2 channels, got {}", gs.c)));
    }
    if gs.n != xs.n {
        return Err(Error::dim("N", format!("grid batch {} vs image batch {}", gs.n, xs.n)));
    }
    let data = kernels::grid_sample_forward(x.data(), xs, grid.data(), gs.h, gs.w);
    Ok(Tensor::from_op(
        Shape::new(xs.n, xs.c, gs.h, gs.w),
        data,
        Op::GridSample { x: x.clone(), grid: grid.clone() },
    ))
}

/// Numerically stable binary cross-entropy on logits, mean reduction:
/// mean(max(z,0) - z*t + ln(1 + exp(-|z|))).
pub fn bce_with_logits_mean<E: Scalar>(
    logits: &Tensor<E>,
    target: &Tensor<E>,
) -> Result<Tensor<E>> {
    check_same_shape("bce_with_logits", logits, target)?;
    let mut acc = E::zero();
    for (z, t) in logits.data().iter().zip(target.data()) {
        let pos = if *z > E::zero() { *z } else { E::zero() };
        acc += pos - *z * *t + (-z.abs()).exp().ln_1p();
    }
    let n = E::from_f64(logits.shape().numel() as f64);
    Ok(Tensor::from_op(
        Shape::scalar(),
        vec![acc / n],
        Op::BceWithLogitsMean { logits: logits.clone(), target: target.clone() },
    ))
}

fn sigmoid_val<E: Scalar>(z: E) -> E {
    if z >= E::zero() {
        E::one() / (E::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (E::one() + e)
    }
}

/// Push gradients of `op`'s parents given the upstream gradient `gout` of
/// `node`. `emit(parent, grad)` accumulates; it ignores constant parents.
#[allow(clippy::needless_range_loop)]
pub(crate) fn backward_op<E: Scalar>(
    node: &Tensor<E>,
    op: &Op<E>,
    gout: &[E],
    emit: &mut dyn FnMut(&Tensor<E>, Vec<E>),
) {
    match op {
        Op::Add(a, b) => {
            if a.requires_grad() {
                emit(a, gout.to_vec());
            }
            if b.requires_grad() {
                emit(b, gout.to_vec());
            }
        }
        Op::Sub(a, b) => {
            if a.requires_grad() {
                emit(a, gout.to_vec());
            }
            if b.requires_grad() {
                emit(b, gout.iter().map(|g| -*g).collect());
            }
        }
        Op::Mul(a, b) => {
            if a.requires_grad() {
                emit(a, gout.iter().zip(b.data()).map(|(g, v)| *g * *v).collect());
            }
            if b.requires_grad() {
                emit(b, gout.iter().zip(a.data()).map(|(g, v)| *g * *v).collect());
            }
        }
        Op::Scale(a, s) => {
            if a.requires_grad() {
                emit(a, gout.iter().map(|g| *g * *s).collect());
            }
        }
        Op::Relu(a) => {
            if a.requires_grad() {
                // Subgradient 0 at the kink.
                emit(
                    a,
                    gout.iter()
                        .zip(a.data())
                        .map(|(g, x)| if *x > E::zero() { *g } else { E::zero() })
                        .collect(),
                );
            }
        }
        Op::Sigmoid(a) => {
            if a.requires_grad() {
                emit(
                    a,
                    gout.iter().zip(node.data()).map(|(g, y)| *g * *y * (E::one() - *y)).collect(),
                );
            }
        }
        Op::SumAll(a) => {
            if a.requires_grad() {
                emit(a, vec![gout[0]; a.shape().numel()]);
            }
        }
        Op::SumChannels(a) => {
            if a.requires_grad() {
                let s = a.shape();
                let plane = s.h * s.w;
                let mut g = vec![E::zero(); s.numel()];
                for n in 0..s.n {
                    let src = &gout[n * plane..(n + 1) * plane];
                    for c in 0..s.c {
                        g[(n * s.c + c) * plane..(n * s.c + c + 1) * plane].copy_from_slice(src);
                    }
                }
                emit(a, g);
            }
        }
        Op::Conv2d { x, w, b, stride, pad } => {
            let xs = x.shape();
            let ws = w.shape();
            let ns = node.shape();
            let dims =
                kernels::ConvDims { k: ws.h, stride: *stride, pad: *pad, oh: ns.h, ow: ns.w };
            let grads = kernels::conv2d_backward(
                x.data(),
                xs,
                w.data(),
                ws.n,
                &dims,
                gout,
                x.requires_grad(),
                w.requires_grad(),
                b.as_ref().map(|b| b.requires_grad()).unwrap_or(false),
            );
            if let Some(dx) = grads.dx {
                emit(x, dx);
            }
            if let Some(dw) = grads.dw {
                emit(w, dw);
            }
            if let (Some(db), Some(b)) = (grads.db, b.as_ref()) {
                emit(b, db);
            }
        }
        Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
            let s = x.shape();
            let plane = s.h * s.w;
            let m = E::from_f64((s.n * plane) as f64);
            if gamma.requires_grad() {
                let mut dg = vec![E::zero(); s.c];
                for c in 0..s.c {
                    let mut acc = E::zero();
                    for n in 0..s.n {
                        let base = (n * s.c + c) * plane;
                        for i in 0..plane {
                            acc += gout[base + i] * xhat[base + i];
                        }
                    }
                    dg[c] = acc;
                }
                emit(gamma, dg);
            }
            if beta.requires_grad() {
                let mut db = vec![E::zero(); s.c];
                for c in 0..s.c {
                    let mut acc = E::zero();
                    for n in 0..s.n {
                        let base = (n * s.c + c) * plane;
                        for i in 0..plane {
                            acc += gout[base + i];
                        }
                    }
                    db[c] = acc;
                }
                emit(beta, db);
            }
            if x.requires_grad() {
                let mut dx = vec![E::zero(); s.numel()];
                for c in 0..s.c {
                    let g = gamma.data()[c];
                    let istd = inv_std[c];
                    if *train {
                        let mut sum_dy = E::zero();
                        let mut sum_dy_xhat = E::zero();
                        for n in 0..s.n {
                            let base = (n * s.c + c) * plane;
                            for i in 0..plane {
                                sum_dy += gout[base + i];
                                sum_dy_xhat += gout[base + i] * xhat[base + i];
                            }
                        }
                        let k = g * istd / m;
                        for n in 0..s.n {
                            let base = (n * s.c + c) * plane;
                            for i in 0..plane {
                                dx[base + i] = k
                                    * (m * gout[base + i] - sum_dy - xhat[base + i] * sum_dy_xhat);
                            }
                        }
                    } else {
                        let k = g * istd;
                        for n in 0..s.n {
                            let base = (n * s.c + c) * plane;
                            for i in 0..plane {
                                dx[base + i] = k * gout[base + i];
                            }
                        }
                    }
                }
                emit(x, dx);
            }
        }
        Op::AvgPool2(a) => {
            if a.requires_grad() {
                let s = a.shape();
                let (oh, ow) = (s.h / 2, s.w / 2);
                let quarter = E::from_f64(0.25);
                let mut g = vec![E::zero(); s.numel()];
                for p in 0..s.n * s.c {
                    let src = &gout[p * oh * ow..(p + 1) * oh * ow];
                    let dst = &mut g[p * s.h * s.w..(p + 1) * s.h * s.w];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gq = src[oy * ow + ox] * quarter;
                            let i = 2 * oy * s.w + 2 * ox;
                            dst[i] += gq;
                            dst[i + 1] += gq;
                            dst[i + s.w] += gq;
                            dst[i + s.w + 1] += gq;
                        }
                    }
                }
                emit(a, g);
            }
        }
        Op::MaxPool2 { x, argmax } => {
            if x.requires_grad() {
                let mut g = vec![E::zero(); x.shape().numel()];
                for (o, &src) in argmax.iter().enumerate() {
                    g[src as usize] += gout[o];
                }
                emit(x, g);
            }
        }
        Op::Upsample2(a) => {
            if a.requires_grad() {
                emit(a, kernels::upsample2_backward(a.shape(), gout));
            }
        }
        Op::ConcatChannels(a, b) => {
            let (sa, sb) = (a.shape(), b.shape());
            let plane = sa.h * sa.w;
            let cc = sa.c + sb.c;
            if a.requires_grad() {
                let mut g = vec![E::zero(); sa.numel()];
                for n in 0..sa.n {
                    g[n * sa.c * plane..(n + 1) * sa.c * plane]
                        .copy_from_slice(&gout[n * cc * plane..n * cc * plane + sa.c * plane]);
                }
                emit(a, g);
            }
            if b.requires_grad() {
                let mut g = vec![E::zero(); sb.numel()];
                for n in 0..sb.n {
                    g[n * sb.c * plane..(n + 1) * sb.c * plane].copy_from_slice(
                        &gout[n * cc * plane + sa.c * plane..(n + 1) * cc * plane],
                    );
                }
                emit(b, g);
            }
        }
        Op::GridSample { x, grid } => {
            if x.requires_grad() {
                let gs = grid.shape();
                emit(x, kernels::grid_sample_backward(x.shape(), grid.data(), gs.h, gs.w, gout));
            }
            // The grid is a constant by contract; no gradient flows to it.
        }
        Op::BceWithLogitsMean { logits, target } => {
            let n = E::from_f64(logits.shape().numel() as f64);
            let g = gout[0] / n;
            if logits.requires_grad() {
                emit(
                    logits,
                    logits
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(z, t)| (sigmoid_val(*z) - *t) * g)
                        .collect(),
                );
            }
            if target.requires_grad() {
                emit(target, logits.data().iter().map(|z| -*z * g).collect());
            }
        }
    }
}
