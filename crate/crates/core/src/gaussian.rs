//! Gaussian smoothing and high-frequency residuals.
//!
//! The residual `x − G ⊗ x` is what both attention branches use as a soft,
//! differentiable boundary signal. Kernels are normalized to unit mass and
//! borders are reflect-padded, so a constant field is left unchanged by
//! smoothing and has an exactly zero residual.

use crate::autodiff::ops::{self, reflect};
use crate::autodiff::{Var, VjpArgs};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Normalized, separable k×k Gaussian kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianKernel {
    size: usize,
    sigma: f64,
    weights: Vec<f64>,
    taps: Vec<f64>,
}

impl GaussianKernel {
    /// Kernel of odd `size` with standard deviation `sigma`, sampled at integer
    /// offsets `-size/2..=size/2` and normalized to sum 1.
    pub fn new(sigma: f64, size: usize) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::domain(
                "GaussianKernel::new",
                format!("sigma must be positive, got {sigma}"),
            ));
        }
        if size.is_multiple_of(2) {
            return Err(Error::domain(
                "GaussianKernel::new",
                format!("size must be odd, got {size}"),
            ));
        }
        let r = (size / 2) as isize;
        let denom = 2.0 * sigma * sigma;
        let raw = |i: isize, j: isize| (-((i * i + j * j) as f64) / denom).exp();

        let mut weights = Vec::with_capacity(size * size);
        for i in -r..=r {
            for j in -r..=r {
                weights.push(raw(i, j));
            }
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);

        let mut taps: Vec<f64> = (-r..=r).map(|i| raw(i, 0)).collect();
        let total: f64 = taps.iter().sum();
        taps.iter_mut().for_each(|w| *w /= total);

        Ok(GaussianKernel {
            size,
            sigma,
            weights,
            taps,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Row-major k×k weights.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.size + col]
    }

    /// The normalized 1-D factor; `weights = taps ⊗ taps`.
    pub fn taps(&self) -> &[f64] {
        &self.taps
    }
}

#[derive(Clone, Copy)]
enum Axis {
    Rows,
    Cols,
}

/// One separable pass over every H×W plane of `src`.
///
/// Written as `x[p] + Σ_j g_j (x[p+j] − x[p])`, which equals the usual
/// weighted sum for unit-mass taps and returns a constant field bit-exactly.
fn pass(src: &[f64], planes: usize, h: usize, w: usize, taps: &[f64], axis: Axis) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let mut out = vec![0.0; src.len()];
    for pl in 0..planes {
        let s = &src[pl * h * w..(pl + 1) * h * w];
        let o = &mut out[pl * h * w..(pl + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let center = s[y * w + x];
                let mut acc = 0.0;
                for (t, &g) in taps.iter().enumerate() {
                    let off = t as isize - r;
                    let q = match axis {
                        Axis::Cols => y * w + reflect(x as isize + off, w),
                        Axis::Rows => reflect(y as isize + off, h) * w + x,
                    };
                    acc += g * (s[q] - center);
                }
                o[y * w + x] = center + acc;
            }
        }
    }
    out
}

/// Adjoint of [`pass`].
fn pass_adjoint(
    grad: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    taps: &[f64],
    axis: Axis,
) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let self_weight = 1.0 - taps.iter().sum::<f64>();
    let mut out = vec![0.0; grad.len()];
    for pl in 0..planes {
        let g = &grad[pl * h * w..(pl + 1) * h * w];
        let d = &mut out[pl * h * w..(pl + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let gv = g[y * w + x];
                d[y * w + x] += self_weight * gv;
                for (t, &k) in taps.iter().enumerate() {
                    let off = t as isize - r;
                    let q = match axis {
                        Axis::Cols => y * w + reflect(x as isize + off, w),
                        Axis::Rows => reflect(y as isize + off, h) * w + x,
                    };
                    d[q] += k * gv;
                }
            }
        }
    }
    out
}

/// Per-channel Gaussian smoothing with reflect padding. The kernel is fixed;
/// gradients flow to `x` only.
pub fn smooth<'t>(x: Var<'t>, kernel: &GaussianKernel) -> Result<Var<'t>> {
    let xv = x.value();
    let (b, c, h, w) = xv.dims4()?;
    let planes = b * c;
    let taps = kernel.taps().to_vec();
    let horizontal = pass(xv.data(), planes, h, w, &taps, Axis::Cols);
    let out = pass(&horizontal, planes, h, w, &taps, Axis::Rows);
    let value = Tensor::from_parts(xv.shape().to_vec(), out);
    Ok(x.tape().push(value, &[x], move |args: &VjpArgs<'_>| {
        let g = pass_adjoint(args.grad.data(), planes, h, w, &taps, Axis::Rows);
        let g = pass_adjoint(&g, planes, h, w, &taps, Axis::Cols);
        vec![Some(Tensor::from_parts(vec![b, c, h, w], g))]
    }))
}

/// High-frequency residual `x − smooth(x)`.
pub fn high_freq<'t>(x: Var<'t>, kernel: &GaussianKernel) -> Result<Var<'t>> {
    let smoothed = smooth(x, kernel)?;
    ops::sub(x, smoothed)
}
