//! Forward and backward kernels for the engine primitives.
//!
//! Kernels are plain functions over [`Tensor`]s; the [`Tape`](super::Tape)
//! records which kernel produced a value and dispatches the matching
//! backward rule. Loop orders are fixed so results are bit-identical run to
//! run on one build.

use std::f64::consts::{FRAC_1_SQRT_2, LN_2, PI};

use super::{Element, Shape, Tensor};
use crate::error::TensorError;

type Result<T> = std::result::Result<T, TensorError>;

const TILE: usize = 256;

/// Standard normal CDF via `erfc`, accurate in both tails.
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

#[inline]
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus_f64(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn check_finite<F: Element>(op: &'static str, t: &Tensor<F>) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn same_shape<F: Element>(op: &'static str, a: &Tensor<F>, b: &Tensor<F>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn check_channel_vector<F: Element>(op: &'static str, x: &Tensor<F>, v: &Tensor<F>) -> Result<()> {
    if v.shape() != [1, x.channels(), 1, 1] {
        return Err(TensorError::shape(
            op,
            format!("per-channel vector {:?} for input {:?}", v.shape(), x.shape()),
        ));
    }
    Ok(())
}

/// Dot product with eight independent accumulators so the loop vectorizes.
#[inline]
pub(crate) fn dot<F: Element>(a: &[F], b: &[F]) -> F {
    let mut acc = [F::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = F::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail = tail + *x * *y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
fn axpy<F: Element>(out: &mut [F], a: F, x: &[F]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = *o + a * v;
    }
}

/// `out (m×n) += w (m×k) · x (k×n)`, all row-major.
pub(crate) fn gemm_acc<F: Element>(out: &mut [F], w: &[F], x: &[F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(w.len(), m * k);
    debug_assert_eq!(x.len(), k * n);
    let mut t0 = 0;
    while t0 < n {
        let t1 = (t0 + TILE).min(n);
        let mut o = 0;
        while o + 4 <= m {
            let block = &mut out[o * n..(o + 4) * n];
            let (r0, rest) = block.split_at_mut(n);
            let (r1, rest) = rest.split_at_mut(n);
            let (r2, r3) = rest.split_at_mut(n);
            let (r0, r1, r2, r3) = (
                &mut r0[t0..t1],
                &mut r1[t0..t1],
                &mut r2[t0..t1],
                &mut r3[t0..t1],
            );
            for c in 0..k {
                let xr = &x[c * n + t0..c * n + t1];
                let (w0, w1, w2, w3) = (
                    w[o * k + c],
                    w[(o + 1) * k + c],
                    w[(o + 2) * k + c],
                    w[(o + 3) * k + c],
                );
                for idx in 0..xr.len() {
                    let v = xr[idx];
                    r0[idx] = r0[idx] + w0 * v;
                    r1[idx] = r1[idx] + w1 * v;
                    r2[idx] = r2[idx] + w2 * v;
                    r3[idx] = r3[idx] + w3 * v;
                }
            }
            o += 4;
        }
        while o < m {
            let row = &mut out[o * n + t0..o * n + t1];
            for c in 0..k {
                axpy(row, w[o * k + c], &x[c * n + t0..c * n + t1]);
            }
            o += 1;
        }
        t0 = t1;
    }
}

// ---------------------------------------------------------------------------
// 1×1 convolution (optionally grouped)

pub(crate) fn conv1x1_shape<F: Element>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    b: Option<&Tensor<F>>,
    groups: usize,
) -> Result<Shape> {
    let [bn, cin, h, wd] = x.shape();
    let [cout, cin_g, kh, kw] = w.shape();
    if groups == 0 || cin % groups != 0 || cout % groups != 0 {
        return Err(TensorError::divisibility(
            "conv1x1",
            format!("{cin} in / {cout} out channels not divisible by {groups} groups"),
        ));
    }
    if kh != 1 || kw != 1 || cin_g * groups != cin {
        return Err(TensorError::shape(
            "conv1x1",
            format!("weight {:?} for input {:?} with {groups} groups", w.shape(), x.shape()),
        ));
    }
    if let Some(b) = b {
        if b.shape() != [1, cout, 1, 1] {
            return Err(TensorError::shape(
                "conv1x1",
                format!("bias {:?} for {cout} outputs", b.shape()),
            ));
        }
    }
    Ok([bn, cout, h, wd])
}

pub fn conv1x1<F: Element>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    b: Option<&Tensor<F>>,
    groups: usize,
) -> Result<Tensor<F>> {
    let shape = conv1x1_shape(x, w, b, groups)?;
    let [bn, cout, h, wd] = shape;
    let cin = x.channels();
    let hw = h * wd;
    let (cin_g, cout_g) = (cin / groups, cout / groups);
    let mut out = Tensor::zeros(shape);
    {
        let od = out.data_mut();
        for n in 0..bn {
            for g in 0..groups {
                let xg = &x.data()[(n * cin + g * cin_g) * hw..(n * cin + (g + 1) * cin_g) * hw];
                let og = &mut od[(n * cout + g * cout_g) * hw..(n * cout + (g + 1) * cout_g) * hw];
                if let Some(b) = b {
                    for (o, row) in og.chunks_exact_mut(hw).enumerate() {
                        row.fill(b.data()[g * cout_g + o]);
                    }
                }
                let wg = &w.data()[g * cout_g * cin_g..(g + 1) * cout_g * cin_g];
                gemm_acc(og, wg, xg, cout_g, cin_g, hw);
            }
        }
    }
    Ok(out)
}

/// Returns `(dx, dw, db)`.
pub fn conv1x1_backward<F: Element>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    groups: usize,
    dy: &Tensor<F>,
    need_x: bool,
) -> (Option<Tensor<F>>, Tensor<F>, Tensor<F>) {
    let [bn, cin, h, wd] = x.shape();
    let cout = w.shape()[0];
    let hw = h * wd;
    let (cin_g, cout_g) = (cin / groups, cout / groups);

    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros([1, cout, 1, 1]);
    for n in 0..bn {
        for o in 0..cout {
            let g = o / cout_g;
            let dyr = dy.plane(n, o);
            db.data_mut()[o] = db.data()[o] + dyr.iter().copied().sum::<F>();
            for c in 0..cin_g {
                let xr = x.plane(n, g * cin_g + c);
                let k = o * cin_g + c;
                dw.data_mut()[k] = dw.data()[k] + dot(dyr, xr);
            }
        }
    }

    let dx = need_x.then(|| {
        let mut dx = Tensor::zeros(x.shape());
        for g in 0..groups {
            // w_g^T, shape (cin_g × cout_g)
            let mut wt = vec![F::zero(); cin_g * cout_g];
            for o in 0..cout_g {
                for c in 0..cin_g {
                    wt[c * cout_g + o] = w.data()[(g * cout_g + o) * cin_g + c];
                }
            }
            for n in 0..bn {
                let dyg = &dy.data()[(n * cout + g * cout_g) * hw..(n * cout + (g + 1) * cout_g) * hw];
                let dxg = &mut dx.data_mut()[(n * cin + g * cin_g) * hw..(n * cin + (g + 1) * cin_g) * hw];
                gemm_acc(dxg, &wt, dyg, cin_g, cout_g, hw);
            }
        }
        dx
    });
    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// Depthwise 3×3, zero padding 1, stride 1

pub(crate) fn dwconv_check<F: Element>(x: &Tensor<F>, w: &Tensor<F>, b: Option<&Tensor<F>>) -> Result<()> {
    let c = x.channels();
    if w.shape() != [c, 1, 3, 3] {
        return Err(TensorError::shape(
            "depthwise_conv3x3",
            format!("weight {:?} for {c} channels", w.shape()),
        ));
    }
    if let Some(b) = b {
        if b.shape() != [1, c, 1, 1] {
            return Err(TensorError::shape(
                "depthwise_conv3x3",
                format!("bias {:?} for {c} channels", b.shape()),
            ));
        }
    }
    Ok(())
}

/// Visits each 3×3 tap with the row/column ranges that stay in bounds:
/// `f(tap, di, dj, i_range, j_range)` where output `(i, j)` reads input
/// `(i + di, j + dj)`.
#[inline]
fn for_each_tap(h: usize, w: usize, mut f: impl FnMut(usize, isize, isize, std::ops::Range<usize>, std::ops::Range<usize>)) {
    for ki in 0..3 {
        for kj in 0..3 {
            let di = ki as isize - 1;
            let dj = kj as isize - 1;
            let i0 = (-di).max(0) as usize;
            let i1 = (h as isize - di.max(0)).max(0) as usize;
            let j0 = (-dj).max(0) as usize;
            let j1 = (w as isize - dj.max(0)).max(0) as usize;
            if i0 < i1 && j0 < j1 {
                f(ki * 3 + kj, di, dj, i0..i1, j0..j1);
            }
        }
    }
}

pub fn depthwise_conv3x3<F: Element>(x: &Tensor<F>, w: &Tensor<F>, b: Option<&Tensor<F>>) -> Result<Tensor<F>> {
    dwconv_check(x, w, b)?;
    let [bn, c, h, wd] = x.shape();
    let mut out = Tensor::zeros(x.shape());
    let hw = h * wd;
    for n in 0..bn {
        for ch in 0..c {
            let xp = x.plane(n, ch);
            let base = (n * c + ch) * hw;
            let op = &mut out.data_mut()[base..base + hw];
            if let Some(b) = b {
                op.fill(b.data()[ch]);
            }
            let k = &w.data()[ch * 9..ch * 9 + 9];
            for_each_tap(h, wd, |t, di, dj, ir, jr| {
                let wt = k[t];
                for i in ir {
                    let si = (i as isize + di) as usize;
                    let (jl, jh) = (jr.start, jr.end);
                    let sj = (jl as isize + dj) as usize;
                    axpy(&mut op[i * wd + jl..i * wd + jh], wt, &xp[si * wd + sj..si * wd + sj + (jh - jl)]);
                }
            });
        }
    }
    Ok(out)
}

pub fn depthwise_conv3x3_backward<F: Element>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    dy: &Tensor<F>,
    need_x: bool,
) -> (Option<Tensor<F>>, Tensor<F>, Tensor<F>) {
    let [bn, c, h, wd] = x.shape();
    let hw = h * wd;
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros([1, c, 1, 1]);
    let mut dx = need_x.then(|| Tensor::zeros(x.shape()));
    for n in 0..bn {
        for ch in 0..c {
            let xp = x.plane(n, ch);
            let dyp = dy.plane(n, ch);
            db.data_mut()[ch] = db.data()[ch] + dyp.iter().copied().sum::<F>();
            let k = &w.data()[ch * 9..ch * 9 + 9];
            let dwk = &mut dw.data_mut()[ch * 9..ch * 9 + 9];
            let base = (n * c + ch) * hw;
            let mut dxp = dx.as_mut().map(|d| &mut d.data_mut()[base..base + hw]);
            for_each_tap(h, wd, |t, di, dj, ir, jr| {
                let (jl, jh) = (jr.start, jr.end);
                let sj = (jl as isize + dj) as usize;
                let mut acc = F::zero();
                for i in ir {
                    let si = (i as isize + di) as usize;
                    let dyr = &dyp[i * wd + jl..i * wd + jh];
                    acc = acc + dot(dyr, &xp[si * wd + sj..si * wd + sj + (jh - jl)]);
                    if let Some(d) = dxp.as_deref_mut() {
                        axpy(&mut d[si * wd + sj..si * wd + sj + (jh - jl)], k[t], dyr);
                    }
                }
                dwk[t] = dwk[t] + acc;
            });
        }
    }
    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// Resampling: mean-pool down, nearest-neighbour up

pub fn downsample<F: Element>(x: &Tensor<F>, factor: usize) -> Result<Tensor<F>> {
    let [bn, c, h, w] = x.shape();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(TensorError::divisibility(
            "resample_down",
            format!("{h}x{w} not divisible by factor {factor}"),
        ));
    }
    if factor == 1 {
        return Ok(x.clone());
    }
    let (oh, ow) = (h / factor, w / factor);
    let inv = F::c(1.0 / (factor * factor) as f64);
    let mut out = Tensor::zeros([bn, c, oh, ow]);
    for n in 0..bn {
        for ch in 0..c {
            let xp = x.plane(n, ch);
            let base = (n * c + ch) * oh * ow;
            let op = &mut out.data_mut()[base..base + oh * ow];
            for i in 0..h {
                let orow = &mut op[(i / factor) * ow..(i / factor + 1) * ow];
                for (j, &v) in xp[i * w..(i + 1) * w].iter().enumerate() {
                    orow[j / factor] = orow[j / factor] + v;
                }
            }
            op.iter_mut().for_each(|v| *v = *v * inv);
        }
    }
    Ok(out)
}

pub fn downsample_backward<F: Element>(dy: &Tensor<F>, factor: usize) -> Tensor<F> {
    let inv = F::c(1.0 / (factor * factor) as f64);
    let mut dx = upsample(dy, factor);
    dx.data_mut().iter_mut().for_each(|v| *v = *v * inv);
    dx
}

pub fn upsample<F: Element>(x: &Tensor<F>, factor: usize) -> Tensor<F> {
    let [bn, c, h, w] = x.shape();
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Tensor::zeros([bn, c, oh, ow]);
    for n in 0..bn {
        for ch in 0..c {
            let xp = x.plane(n, ch);
            let base = (n * c + ch) * oh * ow;
            let op = &mut out.data_mut()[base..base + oh * ow];
            for i in 0..oh {
                let src = &xp[(i / factor) * w..(i / factor + 1) * w];
                for (j, v) in op[i * ow..(i + 1) * ow].iter_mut().enumerate() {
                    *v = src[j / factor];
                }
            }
        }
    }
    out
}

pub fn upsample_backward<F: Element>(dy: &Tensor<F>, factor: usize) -> Tensor<F> {
    let [bn, c, h, w] = dy.shape();
    let (oh, ow) = (h / factor, w / factor);
    let mut dx = Tensor::zeros([bn, c, oh, ow]);
    for n in 0..bn {
        for ch in 0..c {
            let dp = dy.plane(n, ch);
            let base = (n * c + ch) * oh * ow;
            let op = &mut dx.data_mut()[base..base + oh * ow];
            for i in 0..h {
                let orow = &mut op[(i / factor) * ow..(i / factor + 1) * ow];
                for (j, &v) in dp[i * w..(i + 1) * w].iter().enumerate() {
                    orow[j / factor] = orow[j / factor] + v;
                }
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Pixel rearrangement

/// `(B, C, H, W) -> (B, C·r², H/r, W/r)`; sub-pixel `(dy, dx)` of channel
/// `c` lands in channel `c·r² + dy·r + dx`.
pub fn space_to_channel<F: Element>(x: &Tensor<F>, r: usize) -> Result<Tensor<F>> {
    let [bn, c, h, w] = x.shape();
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(TensorError::divisibility(
            "space_to_channel",
            format!("{h}x{w} not divisible by {r}"),
        ));
    }
    let (oh, ow) = (h / r, w / r);
    let mut out = Tensor::zeros([bn, c * r * r, oh, ow]);
    let od = out.data_mut();
    let xd = x.data();
    for n in 0..bn {
        for ch in 0..c {
            for sy in 0..r {
                for sx in 0..r {
                    let oc = ch * r * r + sy * r + sx;
                    let obase = (n * c * r * r + oc) * oh * ow;
                    for i in 0..oh {
                        let srow = ((n * c + ch) * h + i * r + sy) * w;
                        for j in 0..ow {
                            od[obase + i * ow + j] = xd[srow + j * r + sx];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`space_to_channel`].
pub fn channel_to_space<F: Element>(x: &Tensor<F>, r: usize) -> Result<Tensor<F>> {
    let [bn, cr, h, w] = x.shape();
    if r == 0 || cr % (r * r) != 0 {
        return Err(TensorError::divisibility(
            "channel_to_space",
            format!("{cr} channels not divisible by {}", r * r),
        ));
    }
    let c = cr / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut out = Tensor::zeros([bn, c, oh, ow]);
    let od = out.data_mut();
    let xd = x.data();
    for n in 0..bn {
        for ch in 0..c {
            for sy in 0..r {
                for sx in 0..r {
                    let ic = ch * r * r + sy * r + sx;
                    let ibase = (n * cr + ic) * h * w;
                    for i in 0..h {
                        let orow = ((n * c + ch) * oh + i * r + sy) * ow;
                        for j in 0..w {
                            od[orow + j * r + sx] = xd[ibase + i * w + j];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Pointwise nonlinearities

#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub fn gelu<F: Element>(x: &Tensor<F>) -> Tensor<F> {
    x.map(|v| F::c(gelu_scalar(v.f64())))
}

pub fn gelu_backward<F: Element>(x: &Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
    zip_map(x, dy, |v, g| {
        let v = v.f64();
        F::c(normal_cdf(v) + v * normal_pdf(v)) * g
    })
}

pub fn softplus<F: Element>(x: &Tensor<F>) -> Tensor<F> {
    x.map(|v| F::c(softplus_f64(v.f64())))
}

pub fn softplus_backward<F: Element>(x: &Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
    zip_map(x, dy, |v, g| F::c(sigmoid(v.f64())) * g)
}

pub fn tanh_backward<F: Element>(y: &Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
    zip_map(y, dy, |t, g| (F::one() - t * t) * g)
}

pub fn relu_backward<F: Element>(x: &Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
    zip_map(x, dy, |v, g| if v > F::zero() { g } else { F::zero() })
}

/// `max(x, 0)^p`; used for the MS-SSIM exponent weights.
pub fn pos_pow<F: Element>(x: &Tensor<F>, p: f64) -> Tensor<F> {
    x.map(|v| if v > F::zero() { F::c(v.f64().powf(p)) } else { F::zero() })
}

pub fn pos_pow_backward<F: Element>(x: &Tensor<F>, p: f64, dy: &Tensor<F>) -> Tensor<F> {
    zip_map(x, dy, |v, g| {
        if v > F::zero() {
            F::c(p * v.f64().powf(p - 1.0)) * g
        } else {
            F::zero()
        }
    })
}

pub(crate) fn zip_map<F: Element>(a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).expect("zip_map shapes agree")
}

// ---------------------------------------------------------------------------
// Elementwise binary ops

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EwKind {
    Add,
    Sub,
    Mul,
    Div,
}

pub fn ew<F: Element>(a: &Tensor<F>, b: &Tensor<F>, kind: EwKind) -> Result<Tensor<F>> {
    same_shape("ew", a, b)?;
    Ok(match kind {
        EwKind::Add => zip_map(a, b, |x, y| x + y),
        EwKind::Sub => zip_map(a, b, |x, y| x - y),
        EwKind::Mul => zip_map(a, b, |x, y| x * y),
        EwKind::Div => zip_map(a, b, |x, y| x / y),
    })
}

/// Per-channel broadcast `x[n,c,i,j] * v[c]` or `x[n,c,i,j] + v[c]`.
pub fn channel_broadcast<F: Element>(x: &Tensor<F>, v: &Tensor<F>, mul: bool) -> Result<Tensor<F>> {
    check_channel_vector("channel_broadcast", x, v)?;
    let [bn, c, h, w] = x.shape();
    let hw = h * w;
    let mut out = x.clone();
    for n in 0..bn {
        for ch in 0..c {
            let s = v.data()[ch];
            let base = (n * c + ch) * hw;
            for o in &mut out.data_mut()[base..base + hw] {
                *o = if mul { *o * s } else { *o + s };
            }
        }
    }
    Ok(out)
}

/// Reduces `dy * weight` over everything but channels, to `[1,C,1,1]`.
pub fn channel_reduce<F: Element>(dy: &Tensor<F>, weight: Option<&Tensor<F>>) -> Tensor<F> {
    let [bn, c, _, _] = dy.shape();
    let mut out = Tensor::zeros([1, c, 1, 1]);
    for n in 0..bn {
        for ch in 0..c {
            let d = dy.plane(n, ch);
            let s = match weight {
                Some(x) => dot(d, x.plane(n, ch)),
                None => d.iter().copied().sum(),
            };
            out.data_mut()[ch] = out.data()[ch] + s;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Channel concat / slice

pub fn channel_concat<F: Element>(parts: &[&Tensor<F>]) -> Result<Tensor<F>> {
    let first = parts
        .first()
        .ok_or_else(|| TensorError::shape("channel_concat", "no inputs"))?;
    let [bn, _, h, w] = first.shape();
    let mut total = 0;
    for p in parts {
        let [pb, pc, ph, pw] = p.shape();
        if (pb, ph, pw) != (bn, h, w) {
            return Err(TensorError::shape(
                "channel_concat",
                format!("{:?} vs {:?}", first.shape(), p.shape()),
            ));
        }
        total += pc;
    }
    let hw = h * w;
    let mut data = Vec::with_capacity(bn * total * hw);
    for n in 0..bn {
        for p in parts {
            let pc = p.channels();
            data.extend_from_slice(&p.data()[n * pc * hw..(n + 1) * pc * hw]);
        }
    }
    Tensor::from_vec([bn, total, h, w], data)
}

pub fn channel_slice<F: Element>(x: &Tensor<F>, start: usize, len: usize) -> Result<Tensor<F>> {
    let [bn, c, h, w] = x.shape();
    if start + len > c || len == 0 {
        return Err(TensorError::shape(
            "channel_slice",
            format!("channels {start}..{} of {c}", start + len),
        ));
    }
    let hw = h * w;
    let mut data = Vec::with_capacity(bn * len * hw);
    for n in 0..bn {
        data.extend_from_slice(&x.data()[(n * c + start) * hw..(n * c + start + len) * hw]);
    }
    Tensor::from_vec([bn, len, h, w], data)
}

/// Writes `part` into channels `start..` of `dst` (adding).
pub(crate) fn channel_slice_accumulate<F: Element>(dst: &mut Tensor<F>, part: &Tensor<F>, start: usize) {
    let [bn, c, h, w] = dst.shape();
    let pc = part.channels();
    let hw = h * w;
    for n in 0..bn {
        let d = &mut dst.data_mut()[(n * c + start) * hw..(n * c + start + pc) * hw];
        for (a, &b) in d.iter_mut().zip(&part.data()[n * pc * hw..(n + 1) * pc * hw]) {
            *a = *a + b;
        }
    }
}

// ---------------------------------------------------------------------------
// Reductions

pub fn mean_spatial<F: Element>(x: &Tensor<F>) -> Tensor<F> {
    let [bn, c, h, w] = x.shape();
    let inv = F::c(1.0 / (h * w) as f64);
    let mut out = Tensor::zeros([bn, c, 1, 1]);
    for n in 0..bn {
        for ch in 0..c {
            out.data_mut()[n * c + ch] = x.plane(n, ch).iter().copied().sum::<F>() * inv;
        }
    }
    out
}

pub fn mean_spatial_backward<F: Element>(shape: Shape, dy: &Tensor<F>) -> Tensor<F> {
    let [bn, c, h, w] = shape;
    let inv = F::c(1.0 / (h * w) as f64);
    let mut dx = Tensor::zeros(shape);
    for n in 0..bn {
        for ch in 0..c {
            let g = dy.data()[n * c + ch] * inv;
            let base = (n * c + ch) * h * w;
            dx.data_mut()[base..base + h * w].fill(g);
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Interval likelihoods

/// Probability mass of the unit interval centred on `y` under
/// `N(mu, sigma²)`, floored at `floor`.
#[inline]
pub fn gaussian_interval_scalar(y: f64, mu: f64, sigma: f64) -> f64 {
    let v = (y - mu).abs();
    normal_cdf((0.5 - v) / sigma) - normal_cdf((-0.5 - v) / sigma)
}

pub fn gaussian_interval<F: Element>(
    y: &Tensor<F>,
    mu: &Tensor<F>,
    sigma: &Tensor<F>,
    floor: f64,
) -> Result<Tensor<F>> {
    same_shape("gaussian_interval", y, mu)?;
    same_shape("gaussian_interval", y, sigma)?;
    if sigma.data().iter().any(|s| *s <= F::zero()) {
        return Err(TensorError::divisibility(
            "gaussian_interval",
            "scale must be positive",
        ));
    }
    let data = y
        .data()
        .iter()
        .zip(mu.data())
        .zip(sigma.data())
        .map(|((&y, &m), &s)| F::c(gaussian_interval_scalar(y.f64(), m.f64(), s.f64()).max(floor)))
        .collect();
    Tensor::from_vec(y.shape(), data)
}

/// Returns `(dy, dmu, dsigma)` for the floored Gaussian interval mass.
pub fn gaussian_interval_backward<F: Element>(
    y: &Tensor<F>,
    mu: &Tensor<F>,
    sigma: &Tensor<F>,
    floor: f64,
    dp: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let n = y.numel();
    let (mut gy, mut gm, mut gs) = (vec![F::zero(); n], vec![F::zero(); n], vec![F::zero(); n]);
    for k in 0..n {
        let (yv, m, s) = (y.data()[k].f64(), mu.data()[k].f64(), sigma.data()[k].f64());
        if gaussian_interval_scalar(yv, m, s) <= floor {
            continue;
        }
        let d = yv - m;
        let a = (d + 0.5) / s;
        let b = (d - 0.5) / s;
        let (pa, pb) = (normal_pdf(a), normal_pdf(b));
        let g = dp.data()[k].f64();
        let dd = (pa - pb) / s;
        gy[k] = F::c(g * dd);
        gm[k] = F::c(-g * dd);
        gs[k] = F::c(-g * (a * pa - b * pb) / s);
    }
    let shape = y.shape();
    (
        Tensor::from_vec(shape, gy).unwrap(),
        Tensor::from_vec(shape, gm).unwrap(),
        Tensor::from_vec(shape, gs).unwrap(),
    )
}

/// `sigmoid(upper) - sigmoid(lower)`, evaluated on the side of the logistic
/// where the difference does not cancel.
#[inline]
pub fn logistic_interval_scalar(lower: f64, upper: f64) -> f64 {
    if lower + upper > 0.0 {
        sigmoid(-lower) - sigmoid(-upper)
    } else {
        sigmoid(upper) - sigmoid(lower)
    }
}

pub fn logistic_interval<F: Element>(lower: &Tensor<F>, upper: &Tensor<F>, floor: f64) -> Result<Tensor<F>> {
    same_shape("logistic_interval", lower, upper)?;
    Ok(zip_map(lower, upper, |l, u| {
        F::c(logistic_interval_scalar(l.f64(), u.f64()).max(floor))
    }))
}

pub fn logistic_interval_backward<F: Element>(
    lower: &Tensor<F>,
    upper: &Tensor<F>,
    floor: f64,
    dp: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>) {
    let n = lower.numel();
    let (mut gl, mut gu) = (vec![F::zero(); n], vec![F::zero(); n]);
    for k in 0..n {
        let (l, u) = (lower.data()[k].f64(), upper.data()[k].f64());
        if logistic_interval_scalar(l, u) <= floor {
            continue;
        }
        let g = dp.data()[k].f64();
        let dsig = |x: f64| {
            let s = sigmoid(-x.abs());
            s * (1.0 - s)
        };
        gu[k] = F::c(g * dsig(u));
        gl[k] = F::c(-g * dsig(l));
    }
    let shape = lower.shape();
    (Tensor::from_vec(shape, gl).unwrap(), Tensor::from_vec(shape, gu).unwrap())
}

/// `-log2(p)` summed, in bits.
pub fn bits_of<F: Element>(p: &Tensor<F>) -> f64 {
    p.data().iter().map(|v| -v.f64().ln() / LN_2).sum()
}

// ---------------------------------------------------------------------------
// Separable filter with "valid" borders, used by MS-SSIM

pub fn sep_filter_valid<F: Element>(x: &Tensor<F>, k: &[f64]) -> Result<Tensor<F>> {
    let [bn, c, h, w] = x.shape();
    let kl = k.len();
    if kl == 0 || kl > h || kl > w {
        return Err(TensorError::shape(
            "sep_filter_valid",
            format!("window {kl} larger than {h}x{w}"),
        ));
    }
    let (oh, ow) = (h - kl + 1, w - kl + 1);
    let kf: Vec<F> = k.iter().map(|&v| F::c(v)).collect();
    let mut out = Tensor::zeros([bn, c, oh, ow]);
    let mut tmp = vec![F::zero(); h * ow];
    for n in 0..bn {
        for ch in 0..c {
            let xp = x.plane(n, ch);
            tmp.fill(F::zero());
            for i in 0..h {
                let row = &xp[i * w..(i + 1) * w];
                let trow = &mut tmp[i * ow..(i + 1) * ow];
                for (a, &kv) in kf.iter().enumerate() {
                    axpy(trow, kv, &row[a..a + ow]);
                }
            }
            let base = (n * c + ch) * oh * ow;
            let op = &mut out.data_mut()[base..base + oh * ow];
            for i in 0..oh {
                let orow = &mut op[i * ow..(i + 1) * ow];
                for (a, &kv) in kf.iter().enumerate() {
                    axpy(orow, kv, &tmp[(i + a) * ow..(i + a + 1) * ow]);
                }
            }
        }
    }
    Ok(out)
}

pub fn sep_filter_valid_backward<F: Element>(shape: Shape, k: &[f64], dy: &Tensor<F>) -> Tensor<F> {
    let [bn, c, h, w] = shape;
    let kl = k.len();
    let (oh, ow) = (h - kl + 1, w - kl + 1);
    let kf: Vec<F> = k.iter().map(|&v| F::c(v)).collect();
    let mut dx = Tensor::zeros(shape);
    let mut dtmp = vec![F::zero(); h * ow];
    for n in 0..bn {
        for ch in 0..c {
            let dp = dy.plane(n, ch);
            dtmp.fill(F::zero());
            for i in 0..oh {
                let drow = &dp[i * ow..(i + 1) * ow];
                for (a, &kv) in kf.iter().enumerate() {
                    axpy(&mut dtmp[(i + a) * ow..(i + a + 1) * ow], kv, drow);
                }
            }
            let base = (n * c + ch) * h * w;
            let dxp = &mut dx.data_mut()[base..base + h * w];
            for i in 0..h {
                let trow = &dtmp[i * ow..(i + 1) * ow];
                for (a, &kv) in kf.iter().enumerate() {
                    axpy(&mut dxp[i * w + a..i * w + a + ow], kv, trow);
                }
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Cropping

/// Top-left `h × w` window.
pub fn crop<F: Element>(x: &Tensor<F>, h: usize, w: usize) -> Result<Tensor<F>> {
    let [bn, c, xh, xw] = x.shape();
    if h > xh || w > xw {
        return Err(TensorError::shape("crop", format!("{h}x{w} from {xh}x{xw}")));
    }
    let mut out = Tensor::zeros([bn, c, h, w]);
    for n in 0..bn {
        for ch in 0..c {
            let xp = x.plane(n, ch);
            let base = (n * c + ch) * h * w;
            for i in 0..h {
                out.data_mut()[base + i * w..base + (i + 1) * w].copy_from_slice(&xp[i * xw..i * xw + w]);
            }
        }
    }
    Ok(out)
}

pub fn crop_backward<F: Element>(shape: Shape, dy: &Tensor<F>) -> Tensor<F> {
    let [bn, c, xh, xw] = shape;
    let [_, _, h, w] = dy.shape();
    let mut dx = Tensor::zeros(shape);
    for n in 0..bn {
        for ch in 0..c {
            let dp = dy.plane(n, ch);
            let base = (n * c + ch) * xh * xw;
            for i in 0..h {
                dx.data_mut()[base + i * xw..base + i * xw + w].copy_from_slice(&dp[i * w..(i + 1) * w]);
            }
        }
    }
    dx
}

/// Replicates the last row/column out to `h × w`.
pub fn pad_replicate<F: Element>(x: &Tensor<F>, h: usize, w: usize) -> Result<Tensor<F>> {
    let [bn, c, xh, xw] = x.shape();
    if h < xh || w < xw || xh == 0 || xw == 0 {
        return Err(TensorError::shape("pad_replicate", format!("{xh}x{xw} to {h}x{w}")));
    }
    let mut out = Tensor::zeros([bn, c, h, w]);
    for n in 0..bn {
        for ch in 0..c {
            let xp = x.plane(n, ch);
            let base = (n * c + ch) * h * w;
            for i in 0..h {
                let si = i.min(xh - 1);
                for j in 0..w {
                    out.data_mut()[base + i * w + j] = xp[si * xw + j.min(xw - 1)];
                }
            }
        }
    }
    Ok(out)
}
