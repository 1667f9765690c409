//! Differentiable tensor operations recorded on a [`Tape`].
//!
//! 4-D operands follow the B×C×H×W layout. The only broadcast accepted is a
//! B×1×H×W map against a B×C×H×W feature.

use crate::autodiff::tape::{Tape, Var, VjpArgs};
use crate::error::{Error, Result};
use crate::tensor::{ClassMap, Tensor, IGNORE_ID};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
}

fn same_tape<'t>(op: &'static str, a: &Var<'t>, b: &Var<'t>) -> Result<&'t Tape> {
    if !a.same_tape(b) {
        return Err(Error::domain(op, "operands recorded on different tapes"));
    }
    Ok(a.tape())
}

/// Mirror an out-of-range index back into `0..n` without repeating the edge
/// sample (`-1 → 1`, `n → n-2`). Offsets wider than the extent keep folding.
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Broadcast layout: `None` for equal shapes, `Some((b, c, hw))` when `b` is a
/// single-channel map against a C-channel `a`.
fn broadcast_layout(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<Option<(usize, usize, usize)>> {
    if a == b {
        return Ok(None);
    }
    if let ([ab, ac, ah, aw], [bb, 1, bh, bw]) = (a, b) {
        if ab == bb && ah == bh && aw == bw {
            return Ok(Some((*ab, *ac, ah * aw)));
        }
    }
    Err(Error::shape(op, format!("cannot combine {a:?} with {b:?}")))
}

pub fn elementwise<'t>(kind: ElementwiseKind, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let tape = same_tape("elementwise", &a, &b)?;
    let (av, bv) = (a.value(), b.value());
    let layout = broadcast_layout("elementwise", av.shape(), bv.shape())?;
    let f = match kind {
        ElementwiseKind::Add => |x: f64, y: f64| x + y,
        ElementwiseKind::Sub => |x: f64, y: f64| x - y,
        ElementwiseKind::Mul => |x: f64, y: f64| x * y,
    };
    let out: Vec<f64> = match layout {
        None => av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect(),
        Some((_, c, hw)) => av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv.data()[(i / (c * hw)) * hw + i % hw]))
            .collect(),
    };
    let value = Tensor::from_parts(av.shape().to_vec(), out);
    Ok(tape.push(value, &[a, b], move |args: &VjpArgs<'_>| {
        let g = args.grad;
        let (x, y) = (&args.inputs[0], &args.inputs[1]);
        let b_at = |i: usize| match layout {
            None => i,
            Some((_, c, hw)) => (i / (c * hw)) * hw + i % hw,
        };
        let da = args.needs[0].then(|| match kind {
            ElementwiseKind::Add | ElementwiseKind::Sub => g.clone(),
            ElementwiseKind::Mul => Tensor::from_parts(
                g.shape().to_vec(),
                g.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| gi * y.data()[b_at(i)])
                    .collect(),
            ),
        });
        let db = args.needs[1].then(|| {
            let mut acc = vec![0.0; y.numel()];
            for (i, &gi) in g.data().iter().enumerate() {
                acc[b_at(i)] += match kind {
                    ElementwiseKind::Add => gi,
                    ElementwiseKind::Sub => -gi,
                    ElementwiseKind::Mul => gi * x.data()[i],
                };
            }
            Tensor::from_parts(y.shape().to_vec(), acc)
        });
        vec![da, db]
    }))
}

pub fn add<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    elementwise(ElementwiseKind::Add, a, b)
}

pub fn sub<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    elementwise(ElementwiseKind::Sub, a, b)
}

pub fn mul<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    elementwise(ElementwiseKind::Mul, a, b)
}

/// Elementwise map with derivative expressed through input and output.
fn unary<'t>(
    x: Var<'t>,
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64, f64) -> f64 + 'static,
) -> Var<'t> {
    let value = x.value().map(f);
    x.tape().push(value, &[x], move |args: &VjpArgs<'_>| {
        let g = args.grad.data();
        let xin = args.inputs[0].data();
        let out = args.output.data();
        let d = (0..g.len()).map(|i| g[i] * df(xin[i], out[i])).collect();
        vec![Some(Tensor::from_parts(args.grad.shape().to_vec(), d))]
    })
}

pub fn scale(x: Var<'_>, s: f64) -> Var<'_> {
    unary(x, move |v| v * s, move |_, _| s)
}

pub fn add_scalar(x: Var<'_>, s: f64) -> Var<'_> {
    unary(x, move |v| v + s, |_, _| 1.0)
}

pub fn exp(x: Var<'_>) -> Var<'_> {
    unary(x, f64::exp, |_, y| y)
}

const SIGMOID_HI: f64 = 1.0 - f64::EPSILON / 2.0;

/// Logistic function, kept strictly inside (0, 1) even where `exp` saturates.
pub(crate) fn sigmoid_f64(v: f64) -> f64 {
    let s = if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, SIGMOID_HI)
}

pub fn sigmoid(x: Var<'_>) -> Var<'_> {
    unary(x, sigmoid_f64, |_, y| y * (1.0 - y))
}

pub fn relu(x: Var<'_>) -> Var<'_> {
    let xv = x.value();
    x.tape().mark_branch(
        xv.data()
            .chunks(64)
            .map(|c| c.iter().fold(0u64, |m, &v| (m << 1) | u64::from(v > 0.0))),
    );
    unary(x, |v| v.max(0.0), |v, _| if v > 0.0 { 1.0 } else { 0.0 })
}

/// Sum of all elements, as a one-element tensor.
pub fn sum(x: Var<'_>) -> Var<'_> {
    let xv = x.value();
    let value = Tensor::scalar(xv.sum());
    x.tape().push(value, &[x], |args: &VjpArgs<'_>| {
        let g = args.grad.item();
        vec![Some(Tensor::full(args.inputs[0].shape(), g))]
    })
}

pub fn mean(x: Var<'_>) -> Var<'_> {
    let n = x.value().numel() as f64;
    scale(sum(x), 1.0 / n)
}

/// Multiply every element of `x` by the one-element `s`.
pub fn scale_by<'t>(x: Var<'t>, s: Var<'t>) -> Result<Var<'t>> {
    let tape = same_tape("scale_by", &x, &s)?;
    let sv = s.value();
    if !sv.is_scalar() {
        return Err(Error::shape("scale_by", format!("factor has shape {:?}", sv.shape())));
    }
    let k = sv.item();
    let value = x.value().map(|v| v * k);
    Ok(tape.push(value, &[x, s], |args: &VjpArgs<'_>| {
        let g = args.grad;
        let k = args.inputs[1].item();
        let dx = args.needs[0].then(|| g.map(|v| v * k));
        let ds = args.needs[1].then(|| {
            let dot = g
                .data()
                .iter()
                .zip(args.inputs[0].data())
                .map(|(a, b)| a * b)
                .sum();
            Tensor::full(args.inputs[1].shape(), dot)
        });
        vec![dx, ds]
    }))
}

/// `alpha·a + (1−alpha)·b` for a one-element `alpha` in [0, 1], clamped
/// elementwise to `[min(a,b), max(a,b)]` so the result stays between its
/// operands after rounding.
pub fn convex_combine<'t>(a: Var<'t>, b: Var<'t>, alpha: Var<'t>) -> Result<Var<'t>> {
    let tape = same_tape("convex_combine", &a, &b)?;
    same_tape("convex_combine", &a, &alpha)?;
    let (av, bv, alv) = (a.value(), b.value(), alpha.value());
    if av.shape() != bv.shape() {
        return Err(Error::shape(
            "convex_combine",
            format!("{:?} vs {:?}", av.shape(), bv.shape()),
        ));
    }
    if !alv.is_scalar() {
        return Err(Error::shape("convex_combine", "alpha must have one element"));
    }
    let w = alv.item();
    let out = av
        .data()
        .iter()
        .zip(bv.data())
        .map(|(&x, &y)| (y + w * (x - y)).clamp(x.min(y), x.max(y)))
        .collect();
    let value = Tensor::from_parts(av.shape().to_vec(), out);
    Ok(tape.push(value, &[a, b, alpha], |args: &VjpArgs<'_>| {
        let g = args.grad;
        let w = args.inputs[2].item();
        let da = args.needs[0].then(|| g.map(|v| v * w));
        let db = args.needs[1].then(|| g.map(|v| v * (1.0 - w)));
        let dalpha = args.needs[2].then(|| {
            let s = g
                .data()
                .iter()
                .zip(args.inputs[0].data().iter().zip(args.inputs[1].data()))
                .map(|(gi, (x, y))| gi * (x - y))
                .sum();
            Tensor::scalar(s)
        });
        vec![da, db, dalpha]
    }))
}

/// Per-pixel softmax over the channel axis (max-subtracted).
pub fn softmax_channels(x: Var<'_>) -> Result<Var<'_>> {
    let xv = x.value();
    let (b, c, h, w) = xv.dims4()?;
    if c < 2 {
        return Err(Error::domain(
            "softmax_channels",
            format!("need at least 2 channels, got {c}"),
        ));
    }
    let value = softmax_values(&xv, b, c, h * w);
    Ok(x.tape().push(value, &[x], move |args: &VjpArgs<'_>| {
        let hw = h * w;
        let g = args.grad.data();
        let s = args.output.data();
        let mut d = vec![0.0; g.len()];
        for bi in 0..b {
            let base = bi * c * hw;
            for p in 0..hw {
                let dot: f64 = (0..c).map(|k| g[base + k * hw + p] * s[base + k * hw + p]).sum();
                for k in 0..c {
                    let i = base + k * hw + p;
                    d[i] = s[i] * (g[i] - dot);
                }
            }
        }
        vec![Some(Tensor::from_parts(args.grad.shape().to_vec(), d))]
    }))
}

pub(crate) fn softmax_values(x: &Tensor, b: usize, c: usize, hw: usize) -> Tensor {
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    for bi in 0..b {
        let base = bi * c * hw;
        for p in 0..hw {
            let m = (0..c)
                .map(|k| xd[base + k * hw + p])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in 0..c {
                let e = (xd[base + k * hw + p] - m).exp();
                out[base + k * hw + p] = e;
                z += e;
            }
            for k in 0..c {
                out[base + k * hw + p] /= z;
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// Index of the largest channel per pixel; ties go to the lowest index.
pub(crate) fn argmax_channels(x: &[f64], c: usize, hw: usize, bi: usize, p: usize) -> usize {
    let base = bi * c * hw;
    let mut best = 0;
    for k in 1..c {
        if x[base + k * hw + p] > x[base + best * hw + p] {
            best = k;
        }
    }
    best
}

/// Per-pixel maximum over channels, B×C×H×W → B×1×H×W.
pub fn channel_max(x: Var<'_>) -> Result<Var<'_>> {
    let xv = x.value();
    let (b, c, h, w) = xv.dims4()?;
    let hw = h * w;
    let mut idx = Vec::with_capacity(b * hw);
    let mut out = Vec::with_capacity(b * hw);
    for bi in 0..b {
        for p in 0..hw {
            let k = argmax_channels(xv.data(), c, hw, bi, p);
            idx.push(k);
            out.push(xv.data()[(bi * c + k) * hw + p]);
        }
    }
    x.tape().mark_branch(idx.iter().map(|&k| k as u64));
    let value = Tensor::from_parts(vec![b, 1, h, w], out);
    Ok(x.tape().push(value, &[x], move |args: &VjpArgs<'_>| {
        let g = args.grad.data();
        let mut d = vec![0.0; b * c * hw];
        for bi in 0..b {
            for p in 0..hw {
                d[(bi * c + idx[bi * hw + p]) * hw + p] = g[bi * hw + p];
            }
        }
        vec![Some(Tensor::from_parts(vec![b, c, h, w], d))]
    }))
}

/// Mean over the channel axis, B×C×H×W → B×1×H×W.
pub fn channel_mean(x: Var<'_>) -> Result<Var<'_>> {
    let xv = x.value();
    let (b, c, h, w) = xv.dims4()?;
    let hw = h * w;
    let inv = 1.0 / c as f64;
    let mut out = vec![0.0; b * hw];
    for bi in 0..b {
        let o = &mut out[bi * hw..(bi + 1) * hw];
        for k in 0..c {
            let src = &xv.data()[(bi * c + k) * hw..(bi * c + k + 1) * hw];
            for (acc, v) in o.iter_mut().zip(src) {
                *acc += v;
            }
        }
        for v in o.iter_mut() {
            *v *= inv;
        }
    }
    let value = Tensor::from_parts(vec![b, 1, h, w], out);
    Ok(x.tape().push(value, &[x], move |args: &VjpArgs<'_>| {
        let g = args.grad.data();
        let mut d = vec![0.0; b * c * hw];
        for bi in 0..b {
            for k in 0..c {
                for p in 0..hw {
                    d[(bi * c + k) * hw + p] = g[bi * hw + p] * inv;
                }
            }
        }
        vec![Some(Tensor::from_parts(vec![b, c, h, w], d))]
    }))
}

/// `out[b,o] = bias[o] + Σ_c weight[o,c]·x[b,c]` at every pixel.
pub fn conv1x1<'t>(x: Var<'t>, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
    let tape = same_tape("conv1x1", &x, &weight)?;
    same_tape("conv1x1", &x, &bias)?;
    let (xv, wv, bv) = (x.value(), weight.value(), bias.value());
    let (b, ci, h, w) = xv.dims4()?;
    let co = match wv.shape() {
        [o, i] if *i == ci => *o,
        s => {
            return Err(Error::shape(
                "conv1x1",
                format!("weight {s:?} does not match {ci} input channels"),
            ))
        }
    };
    if bv.shape() != [co] {
        return Err(Error::shape(
            "conv1x1",
            format!("bias {:?} for {co} output channels", bv.shape()),
        ));
    }
    let hw = h * w;
    let mut out = vec![0.0; b * co * hw];
    for bi in 0..b {
        let xb = &xv.data()[bi * ci * hw..(bi + 1) * ci * hw];
        let dst = &mut out[bi * co * hw..(bi + 1) * co * hw];
        for (o, row) in dst.chunks_exact_mut(hw).enumerate() {
            row.fill(bv.data()[o]);
        }
        gemm(co, ci, hw, wv.data(), (ci, 1), xb, (hw, 1), 1.0, dst, hw);
    }
    let value = Tensor::from_parts(vec![b, co, h, w], out);
    Ok(tape.push(value, &[x, weight, bias], move |args: &VjpArgs<'_>| {
        let g = args.grad.data();
        let xd = args.inputs[0].data();
        let wd = args.inputs[1].data();
        let dx = args.needs[0].then(|| {
            let mut d = vec![0.0; b * ci * hw];
            for bi in 0..b {
                let gb = &g[bi * co * hw..(bi + 1) * co * hw];
                gemm(ci, co, hw, wd, (1, ci), gb, (hw, 1), 0.0, &mut d[bi * ci * hw..(bi + 1) * ci * hw], hw);
            }
            Tensor::from_parts(vec![b, ci, h, w], d)
        });
        let dw = args.needs[1].then(|| {
            let mut d = vec![0.0; co * ci];
            for bi in 0..b {
                let gb = &g[bi * co * hw..(bi + 1) * co * hw];
                let xb = &xd[bi * ci * hw..(bi + 1) * ci * hw];
                gemm(co, hw, ci, gb, (hw, 1), xb, (1, hw), 1.0, &mut d, ci);
            }
            Tensor::from_parts(vec![co, ci], d)
        });
        let db = args.needs[2].then(|| {
            let mut d = vec![0.0; co];
            for bi in 0..b {
                for (o, slot) in d.iter_mut().enumerate() {
                    *slot += g[(bi * co + o) * hw..(bi * co + o + 1) * hw].iter().sum::<f64>();
                }
            }
            Tensor::from_parts(vec![co], d)
        });
        vec![dx, dw, db]
    }))
}

/// Single-channel 3×3 cross-correlation with reflect padding of one pixel.
/// `weight` is 1×1×3×3 and `bias` has one element.
pub fn conv3x3<'t>(x: Var<'t>, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
    let (_, c, _, _) = x.value().dims4()?;
    if c != 1 {
        return Err(Error::shape(
            "conv3x3",
            format!("expected a single-channel input, got {c} channels"),
        ));
    }
    if weight.value().shape() != [1, 1, 3, 3] {
        return Err(Error::shape(
            "conv3x3",
            format!("weight must be 1×1×3×3, got {:?}", weight.value().shape()),
        ));
    }
    conv2d_3x3(x, weight, bias)
}

/// Multi-channel 3×3 cross-correlation with reflect padding; `weight` is
/// C_out×C_in×3×3 and `bias` has C_out elements.
pub fn conv2d_3x3<'t>(x: Var<'t>, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
    let tape = same_tape("conv2d_3x3", &x, &weight)?;
    same_tape("conv2d_3x3", &x, &bias)?;
    let (xv, wv, bv) = (x.value(), weight.value(), bias.value());
    let (b, ci, h, w) = xv.dims4()?;
    let co = match wv.shape() {
        [o, i, 3, 3] if *i == ci => *o,
        s => {
            return Err(Error::shape(
                "conv2d_3x3",
                format!("weight {s:?} does not match {ci} input channels"),
            ))
        }
    };
    if bv.shape() != [co] {
        return Err(Error::shape(
            "conv2d_3x3",
            format!("bias {:?} for {co} output channels", bv.shape()),
        ));
    }
    let geom = Im2Col::new(ci, h, w);
    let hw = h * w;
    let k = ci * 9;
    let mut out = vec![0.0; b * co * hw];
    let mut cols = vec![0.0; k * hw];
    for bi in 0..b {
        geom.gather(&xv.data()[bi * ci * hw..(bi + 1) * ci * hw], &mut cols);
        let dst = &mut out[bi * co * hw..(bi + 1) * co * hw];
        for (o, row) in dst.chunks_exact_mut(hw).enumerate() {
            row.fill(bv.data()[o]);
        }
        gemm(co, k, hw, wv.data(), (k, 1), &cols, (hw, 1), 1.0, dst, hw);
    }
    let value = Tensor::from_parts(vec![b, co, h, w], out);
    Ok(tape.push(value, &[x, weight, bias], move |args: &VjpArgs<'_>| {
        let g = args.grad.data();
        let xd = args.inputs[0].data();
        let wd = args.inputs[1].data();
        let mut dx = args.needs[0].then(|| vec![0.0; b * ci * hw]);
        let mut dw = args.needs[1].then(|| vec![0.0; co * k]);
        let mut cols = vec![0.0; k * hw];
        for bi in 0..b {
            let gb = &g[bi * co * hw..(bi + 1) * co * hw];
            if let Some(dw) = dw.as_mut() {
                geom.gather(&xd[bi * ci * hw..(bi + 1) * ci * hw], &mut cols);
                // dW += G · colsᵀ
                gemm(co, hw, k, gb, (hw, 1), &cols, (1, hw), 1.0, dw, k);
            }
            if let Some(dx) = dx.as_mut() {
                // dcols = Wᵀ · G, reusing the patch buffer
                gemm(k, co, hw, wd, (1, k), gb, (hw, 1), 0.0, &mut cols, hw);
                geom.scatter(&cols, &mut dx[bi * ci * hw..(bi + 1) * ci * hw]);
            }
        }
        let db = args.needs[2].then(|| {
            let mut d = vec![0.0; co];
            for bi in 0..b {
                for (o, slot) in d.iter_mut().enumerate() {
                    *slot += g[(bi * co + o) * hw..(bi * co + o + 1) * hw].iter().sum::<f64>();
                }
            }
            Tensor::from_parts(vec![co], d)
        });
        vec![
            dx.map(|d| Tensor::from_parts(vec![b, ci, h, w], d)),
            dw.map(|d| Tensor::from_parts(vec![co, ci, 3, 3], d)),
            db,
        ]
    }))
}

/// Reflect-padded 3×3 patch extraction for one image.
struct Im2Col {
    channels: usize,
    h: usize,
    w: usize,
    rows: Vec<[usize; 3]>,
    cols: Vec<[usize; 3]>,
}

impl Im2Col {
    fn new(channels: usize, h: usize, w: usize) -> Self {
        let taps = |n: usize| {
            (0..n)
                .map(|i| {
                    let i = i as isize;
                    [reflect(i - 1, n), reflect(i, n), reflect(i + 1, n)]
                })
                .collect()
        };
        Im2Col {
            channels,
            h,
            w,
            rows: taps(h),
            cols: taps(w),
        }
    }

    fn gather(&self, x: &[f64], cols: &mut [f64]) {
        let hw = self.h * self.w;
        for c in 0..self.channels {
            let plane = &x[c * hw..(c + 1) * hw];
            for ky in 0..3 {
                for kx in 0..3 {
                    let dst = &mut cols[((c * 3 + ky) * 3 + kx) * hw..][..hw];
                    for y in 0..self.h {
                        let src = &plane[self.rows[y][ky] * self.w..][..self.w];
                        let d = &mut dst[y * self.w..(y + 1) * self.w];
                        for (xo, slot) in d.iter_mut().enumerate() {
                            *slot = src[self.cols[xo][kx]];
                        }
                    }
                }
            }
        }
    }

    fn scatter(&self, dcols: &[f64], dx: &mut [f64]) {
        let hw = self.h * self.w;
        for c in 0..self.channels {
            let plane = &mut dx[c * hw..(c + 1) * hw];
            for ky in 0..3 {
                for kx in 0..3 {
                    let src = &dcols[((c * 3 + ky) * 3 + kx) * hw..][..hw];
                    for y in 0..self.h {
                        let row = self.rows[y][ky] * self.w;
                        for xo in 0..self.w {
                            plane[row + self.cols[xo][kx]] += src[y * self.w + xo];
                        }
                    }
                }
            }
        }
    }
}

/// `C ← A·B + beta·C` for an m×k `A`, k×n `B` and row-major m×n `C` with
/// row stride `ldc`. Strides are `(row, column)` in elements.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    assert!(k == 0 || (last(m, k, rsa, csa) < a.len() && last(k, n, rsb, csb) < b.len()));
    assert!(last(m, n, ldc, 1) < c.len());
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

/// Half-pixel-centred (align-corners = false) source taps along one axis.
fn bilinear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resampling to `out_h × out_w`; the identity when sizes agree.
pub fn resize_bilinear(x: Var<'_>, out_h: usize, out_w: usize) -> Result<Var<'_>> {
    let xv = x.value();
    let (b, c, h, w) = xv.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::domain("resize_bilinear", "output size must be positive"));
    }
    if (out_h, out_w) == (h, w) {
        let value = (*xv).clone();
        return Ok(x
            .tape()
            .push(value, &[x], |args: &VjpArgs<'_>| vec![Some(args.grad.clone())]));
    }
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let planes = b * c;
    let mut out = vec![0.0; planes * out_h * out_w];
    for pl in 0..planes {
        let src = &xv.data()[pl * h * w..(pl + 1) * h * w];
        let dst = &mut out[pl * out_h * out_w..(pl + 1) * out_h * out_w];
        for (yo, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (xo, &(x0, x1, lx)) in tx.iter().enumerate() {
                let top = (1.0 - lx) * src[y0 * w + x0] + lx * src[y0 * w + x1];
                let bot = (1.0 - lx) * src[y1 * w + x0] + lx * src[y1 * w + x1];
                dst[yo * out_w + xo] = (1.0 - ly) * top + ly * bot;
            }
        }
    }
    let value = Tensor::from_parts(vec![b, c, out_h, out_w], out);
    Ok(x.tape().push(value, &[x], move |args: &VjpArgs<'_>| {
        let g = args.grad.data();
        let mut d = vec![0.0; planes * h * w];
        for pl in 0..planes {
            let gsrc = &g[pl * out_h * out_w..(pl + 1) * out_h * out_w];
            let dst = &mut d[pl * h * w..(pl + 1) * h * w];
            for (yo, &(y0, y1, ly)) in ty.iter().enumerate() {
                for (xo, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let gv = gsrc[yo * out_w + xo];
                    dst[y0 * w + x0] += gv * (1.0 - ly) * (1.0 - lx);
                    dst[y0 * w + x1] += gv * (1.0 - ly) * lx;
                    dst[y1 * w + x0] += gv * ly * (1.0 - lx);
                    dst[y1 * w + x1] += gv * ly * lx;
                }
            }
        }
        vec![Some(Tensor::from_parts(vec![b, c, h, w], d))]
    }))
}

/// 2×2 mean pooling with stride 2; H and W must be even.
pub fn avg_pool2(x: Var<'_>) -> Result<Var<'_>> {
    let xv = x.value();
    let (b, c, h, w) = xv.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::domain(
            "avg_pool2",
            format!("spatial size {h}×{w} is not even"),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let planes = b * c;
    let mut out = vec![0.0; planes * oh * ow];
    for pl in 0..planes {
        let src = &xv.data()[pl * h * w..];
        for y in 0..oh {
            for xo in 0..ow {
                let i = 2 * y * w + 2 * xo;
                out[(pl * oh + y) * ow + xo] =
                    0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
            }
        }
    }
    let value = Tensor::from_parts(vec![b, c, oh, ow], out);
    Ok(x.tape().push(value, &[x], move |args: &VjpArgs<'_>| {
        let g = args.grad.data();
        let mut d = vec![0.0; planes * h * w];
        for pl in 0..planes {
            for y in 0..oh {
                for xo in 0..ow {
                    let gv = 0.25 * g[(pl * oh + y) * ow + xo];
                    let i = pl * h * w + 2 * y * w + 2 * xo;
                    d[i] += gv;
                    d[i + 1] += gv;
                    d[i + w] += gv;
                    d[i + w + 1] += gv;
                }
            }
        }
        vec![Some(Tensor::from_parts(vec![b, c, h, w], d))]
    }))
}

/// Weighted pixel-wise cross-entropy, averaged over non-ignored pixels.
///
/// `weight`, when given, holds one factor per pixel (B×1×H×W). Pixels labelled
/// [`IGNORE_ID`] contribute neither loss nor count.
pub fn cross_entropy<'t>(
    logits: Var<'t>,
    labels: &ClassMap,
    weight: Option<&Tensor>,
) -> Result<Var<'t>> {
    let lv = logits.value();
    let (b, c, h, w) = lv.dims4()?;
    if labels.dims() != (b, h, w) {
        return Err(Error::shape(
            "cross_entropy",
            format!("labels {:?} vs logits {:?}", labels.dims(), lv.shape()),
        ));
    }
    let hw = h * w;
    if let Some(wt) = weight {
        if wt.numel() != b * hw {
            return Err(Error::shape(
                "cross_entropy",
                format!("weight {:?} vs {b}×{h}×{w} pixels", wt.shape()),
            ));
        }
    }
    if let Some(&bad) = labels
        .data()
        .iter()
        .find(|&&l| l != IGNORE_ID && usize::from(l) >= c)
    {
        return Err(Error::domain(
            "cross_entropy",
            format!("label {bad} out of range for {c} classes"),
        ));
    }
    let labels: Vec<u8> = labels.data().to_vec();
    let weights: Vec<f64> = match weight {
        Some(t) => t.data().to_vec(),
        None => vec![1.0; b * hw],
    };
    let count = labels.iter().filter(|&&l| l != IGNORE_ID).count();
    let probs = softmax_values(&lv, b, c, hw);
    let mut total = 0.0;
    for bi in 0..b {
        for p in 0..hw {
            let l = labels[bi * hw + p];
            if l == IGNORE_ID {
                continue;
            }
            let i = (bi * c + usize::from(l)) * hw + p;
            // log-softmax via the max-shifted logsumexp for accuracy near p = 1
            let m = (0..c)
                .map(|k| lv.data()[(bi * c + k) * hw + p])
                .fold(f64::NEG_INFINITY, f64::max);
            let lse = m + (0..c)
                .map(|k| (lv.data()[(bi * c + k) * hw + p] - m).exp())
                .sum::<f64>()
                .ln();
            total -= weights[bi * hw + p] * (lv.data()[i] - lse);
        }
    }
    let value = Tensor::scalar(if count == 0 { 0.0 } else { total / count as f64 });
    Ok(logits
        .tape()
        .push(value, &[logits], move |args: &VjpArgs<'_>| {
            let mut d = vec![0.0; b * c * hw];
            if count > 0 {
                let g = args.grad.item() / count as f64;
                for bi in 0..b {
                    for p in 0..hw {
                        let l = labels[bi * hw + p];
                        if l == IGNORE_ID {
                            continue;
                        }
                        let wg = g * weights[bi * hw + p];
                        for k in 0..c {
                            let i = (bi * c + k) * hw + p;
                            let onehot = if k == usize::from(l) { 1.0 } else { 0.0 };
                            d[i] = wg * (probs.data()[i] - onehot);
                        }
                    }
                }
            }
            vec![Some(Tensor::from_parts(vec![b, c, h, w], d))]
        }))
}
