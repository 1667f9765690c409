//! Central finite-difference checks of the tape gradients.
//!
//! Each case builds a function of a few named input tensors. Non-scalar
//! outputs are reduced to a scalar by a fixed random projection so every
//! output direction contributes; the finite difference is taken per output
//! entry before projecting. Coordinates whose ±h evaluations take a
//! different discrete branch (ReLU mask, argmax choice) than the base point
//! are skipped, since the derivative is not defined across the kink.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::afr::{self, AfrConfig, AfrParams, AttentionMap, MultiScaleFeatures};
use crate::autodiff::{ops, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::gaussian::{self, GaussianKernel};
use crate::segnet::{self, NetConfig};
use crate::tensor::{ClassMap, Tensor, IGNORE_ID};
use crate::uncertainty::{self, UncertaintyMap};

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub step: f64,
    /// Coordinates checked per case and seed (all of them if fewer exist).
    /// Coordinates sitting on a kink do not count.
    pub coords: usize,
    pub seeds: Vec<u64>,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so gradients that are
    /// zero up to rounding do not divide by zero.
    pub floor: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: 1e-5,
            coords: 120,
            seeds: vec![1, 2, 3, 4, 5],
            tolerance: 1e-4,
            floor: 1e-6,
        }
    }
}

/// Outcome of one case at one seed.
#[derive(Clone, Debug)]
pub struct CaseReport {
    pub name: &'static str,
    pub seed: u64,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    /// Parameter name, flat index, analytic and numeric derivative of the
    /// worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl CaseReport {
    pub fn passed(&self, opts: &GradcheckOptions) -> bool {
        self.max_rel_error < opts.tolerance && self.checked > 0
    }
}

/// Relative error with a denominator floor.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Check the gradient of `f` with respect to every tensor in `inputs`.
pub fn check<F>(name: &'static str, inputs: &ParamSet, f: F, seed: u64, opts: &GradcheckOptions) -> Result<CaseReport>
where
    F: for<'t> Fn(&'t Tape, &ParamSet) -> Result<Var<'t>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    // the projection is drawn once and reused for every evaluation
    let projection = {
        let tape = Tape::no_grad();
        let out = f(&tape, inputs)?;
        let shape = out.shape();
        (!out.value().is_scalar() || shape.len() != 1)
            .then(|| Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0)))
    };
    let eval = |tape: &Tape, set: &ParamSet| -> Result<(Tensor, u64)> {
        let out = f(tape, set)?;
        Ok(((*out.value()).clone(), tape.signature()))
    };

    let mut grads = inputs.clone();
    grads.zero_grad();
    let tape = Tape::new();
    let loss = scalarize(&tape, f(&tape, &grads)?, projection.as_ref())?;
    let base_sig = tape.signature();
    tape.backward(loss, &mut grads)?;

    let sizes: Vec<usize> = inputs.iter().map(|p| p.value().numel()).collect();
    let total: usize = sizes.iter().sum();
    // random visiting order; kinked coordinates are replaced by later ones
    let picks = index::sample(&mut rng, total, total);
    let mut report = CaseReport {
        name,
        seed,
        checked: 0,
        skipped: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for flat in picks {
        if report.checked == opts.coords {
            break;
        }
        let (pi, off) = locate(&sizes, flat);
        let pname = inputs.iter().nth(pi).expect("index in range").name().to_string();
        let mut shifted = inputs.clone();
        let x0 = inputs.get(&pname)?.value().data()[off];
        shifted.get_mut(&pname)?.value_mut()[off] = x0 + opts.step;
        let (fp, sp) = eval(&Tape::no_grad(), &shifted)?;
        shifted.get_mut(&pname)?.value_mut()[off] = x0 - opts.step;
        let (fm, sm) = eval(&Tape::no_grad(), &shifted)?;
        if sp != base_sig || sm != base_sig {
            report.skipped += 1;
            continue;
        }
        // difference the outputs before projecting, so entries untouched by
        // the perturbation cancel exactly instead of adding rounding noise
        let numeric = match &projection {
            Some(r) => fp
                .data()
                .iter()
                .zip(fm.data())
                .zip(r.data())
                .map(|((p, m), r)| r * (p - m))
                .sum::<f64>(),
            None => fp.item() - fm.item(),
        } / (2.0 * opts.step);
        let analytic = grads.get(&pname)?.grad().data()[off];
        let err = relative_error(analytic, numeric, opts.floor);
        report.checked += 1;
        if err > report.max_rel_error || err.is_nan() {
            report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
            report.worst = Some((pname, off, analytic, numeric));
        }
    }
    Ok(report)
}

fn scalarize<'t>(tape: &'t Tape, out: Var<'t>, projection: Option<&Tensor>) -> Result<Var<'t>> {
    match projection {
        Some(r) => Ok(ops::sum(ops::mul(out, tape.constant(r.clone()))?)),
        None => Ok(out),
    }
}

fn locate(sizes: &[usize], mut flat: usize) -> (usize, usize) {
    for (i, &n) in sizes.iter().enumerate() {
        if flat < n {
            return (i, flat);
        }
        flat -= n;
    }
    unreachable!("flat index beyond total size")
}

fn inputs(rng: &mut ChaCha8Rng, specs: &[(&str, &[usize], f64)]) -> ParamSet {
    let mut set = ParamSet::new();
    for &(name, shape, scale) in specs {
        set.insert(name, Tensor::from_fn(shape, |_| rng.random_range(-scale..scale)))
            .expect("unique names");
    }
    set
}

fn labels(rng: &mut ChaCha8Rng, b: usize, h: usize, w: usize, c: u8) -> ClassMap {
    let data = (0..b * h * w)
        .map(|_| if rng.random_bool(0.1) { IGNORE_ID } else { rng.random_range(0..c) })
        .collect();
    ClassMap::new(b, h, w, data).expect("valid dims")
}

fn afr_inputs(rng: &mut ChaCha8Rng, c: usize, extra: &[(&str, &[usize], f64)]) -> ParamSet {
    let mut set = inputs(rng, extra);
    afr::init_params(&mut set, c, rng).expect("fresh names");
    // move alpha off its zero init so both branches have distinct weight
    set.get_mut(afr::ALPHA_RAW).expect("alpha").value_mut()[0] = rng.random_range(-1.0..1.0);
    for name in [afr::CALA_B, afr::UHFA_B] {
        set.get_mut(name).expect("bias").value_mut()[0] = rng.random_range(-0.5..0.5);
    }
    set
}

type CaseFn = fn(u64, &GradcheckOptions) -> Result<CaseReport>;

macro_rules! case {
    ($name:literal, |$rng:ident| $setup:expr, |$tape:ident, $p:ident, $ctx:ident| $body:expr) => {{
        fn run(seed: u64, opts: &GradcheckOptions) -> Result<CaseReport> {
            let mut $rng = ChaCha8Rng::seed_from_u64(seed);
            let (set, ctx_value) = $setup;
            #[allow(unused_variables)]
            let $ctx = &ctx_value;
            check($name, &set, |$tape: &Tape, $p: &ParamSet| $body, seed, opts)
        }
        ($name, run as CaseFn)
    }};
}

fn v<'t>(tape: &'t Tape, p: &ParamSet, name: &str) -> Result<Var<'t>> {
    tape.param_named(p, name)
}

fn kernel() -> GaussianKernel {
    GaussianKernel::new(1.0, 3).expect("valid kernel")
}

fn cases() -> Vec<(&'static str, CaseFn)> {
    vec![
        case!("add", |rng| (inputs(&mut rng, &[("a", &[2, 3, 4, 5], 1.0), ("b", &[2, 1, 4, 5], 1.0)]), ()),
            |t, p, ctx| ops::add(v(t, p, "a")?, v(t, p, "b")?)),
        case!("sub", |rng| (inputs(&mut rng, &[("a", &[2, 3, 4, 5], 1.0), ("b", &[2, 3, 4, 5], 1.0)]), ()),
            |t, p, ctx| ops::sub(v(t, p, "a")?, v(t, p, "b")?)),
        case!("mul", |rng| (inputs(&mut rng, &[("a", &[2, 3, 4, 5], 1.0), ("b", &[2, 1, 4, 5], 1.0)]), ()),
            |t, p, ctx| ops::mul(v(t, p, "a")?, v(t, p, "b")?)),
        case!("scale_add_scalar", |rng| (inputs(&mut rng, &[("a", &[1, 2, 8, 8], 1.0)]), ()),
            |t, p, ctx| Ok(ops::add_scalar(ops::scale(v(t, p, "a")?, -1.7), 0.3))),
        case!("exp", |rng| (inputs(&mut rng, &[("a", &[1, 2, 8, 8], 2.0)]), ()),
            |t, p, ctx| Ok(ops::exp(v(t, p, "a")?))),
        case!("sigmoid", |rng| (inputs(&mut rng, &[("a", &[1, 2, 8, 8], 4.0)]), ()),
            |t, p, ctx| Ok(ops::sigmoid(v(t, p, "a")?))),
        case!("relu", |rng| (inputs(&mut rng, &[("a", &[1, 2, 8, 8], 1.0)]), ()),
            |t, p, ctx| Ok(ops::relu(v(t, p, "a")?))),
        case!("sum_mean", |rng| (inputs(&mut rng, &[("a", &[1, 2, 8, 8], 1.0)]), ()),
            |t, p, ctx| {
                let a = v(t, p, "a")?;
                ops::add(ops::sum(ops::mul(a, a)?), ops::mean(ops::exp(a)))
            }),
        case!("scale_by", |rng| (inputs(&mut rng, &[("a", &[1, 2, 8, 8], 1.0), ("s", &[1], 1.0)]), ()),
            |t, p, ctx| ops::scale_by(v(t, p, "a")?, v(t, p, "s")?)),
        case!("convex_combine", |rng| (inputs(&mut rng, &[("a", &[2, 1, 8, 8], 1.0), ("b", &[2, 1, 8, 8], 1.0), ("s", &[1], 2.0)]), ()),
            |t, p, ctx| ops::convex_combine(v(t, p, "a")?, v(t, p, "b")?, ops::sigmoid(v(t, p, "s")?))),
        case!("softmax_channels", |rng| (inputs(&mut rng, &[("a", &[2, 4, 4, 4], 2.0)]), ()),
            |t, p, ctx| ops::softmax_channels(v(t, p, "a")?)),
        case!("channel_max", |rng| (inputs(&mut rng, &[("a", &[2, 4, 4, 4], 2.0)]), ()),
            |t, p, ctx| ops::channel_max(v(t, p, "a")?)),
        case!("channel_mean", |rng| (inputs(&mut rng, &[("a", &[2, 4, 4, 4], 2.0)]), ()),
            |t, p, ctx| ops::channel_mean(v(t, p, "a")?)),
        case!("conv1x1", |rng| (inputs(&mut rng, &[("x", &[2, 3, 4, 5], 1.0), ("w", &[4, 3], 1.0), ("b", &[4], 1.0)]), ()),
            |t, p, ctx| ops::conv1x1(v(t, p, "x")?, v(t, p, "w")?, v(t, p, "b")?)),
        case!("conv3x3", |rng| (inputs(&mut rng, &[("x", &[2, 1, 7, 8], 1.0), ("w", &[1, 1, 3, 3], 1.0), ("b", &[1], 1.0)]), ()),
            |t, p, ctx| ops::conv3x3(v(t, p, "x")?, v(t, p, "w")?, v(t, p, "b")?)),
        case!("conv2d_3x3", |rng| (inputs(&mut rng, &[("x", &[2, 3, 5, 4], 1.0), ("w", &[4, 3, 3, 3], 1.0), ("b", &[4], 1.0)]), ()),
            |t, p, ctx| ops::conv2d_3x3(v(t, p, "x")?, v(t, p, "w")?, v(t, p, "b")?)),
        case!("conv2d_3x3_tiny", |rng| (inputs(&mut rng, &[("x", &[3, 2, 2, 2], 1.0), ("w", &[4, 2, 3, 3], 1.0), ("b", &[4], 1.0)]), ()),
            |t, p, ctx| ops::conv2d_3x3(v(t, p, "x")?, v(t, p, "w")?, v(t, p, "b")?)),
        case!("resize_up", |rng| (inputs(&mut rng, &[("x", &[2, 3, 5, 4], 1.0)]), ()),
            |t, p, ctx| ops::resize_bilinear(v(t, p, "x")?, 9, 11)),
        case!("resize_down", |rng| (inputs(&mut rng, &[("x", &[2, 2, 9, 8], 1.0)]), ()),
            |t, p, ctx| ops::resize_bilinear(v(t, p, "x")?, 4, 3)),
        case!("avg_pool2", |rng| (inputs(&mut rng, &[("x", &[2, 3, 6, 4], 1.0)]), ()),
            |t, p, ctx| ops::avg_pool2(v(t, p, "x")?)),
        case!("cross_entropy", |rng| {
                let set = inputs(&mut rng, &[("x", &[2, 4, 4, 4], 2.0)]);
                let w = Tensor::from_fn(&[2, 1, 4, 4], |_| rng.random_range(0.0..1.0));
                (set, (labels(&mut rng, 2, 4, 4, 4), w))
            },
            |t, p, ctx| ops::cross_entropy(v(t, p, "x")?, &ctx.0, Some(&ctx.1))),
        case!("cross_entropy_unweighted", |rng| {
                let set = inputs(&mut rng, &[("x", &[1, 3, 6, 6], 3.0)]);
                (set, labels(&mut rng, 1, 6, 6, 3))
            },
            |t, p, ctx| ops::cross_entropy(v(t, p, "x")?, ctx, None)),
        case!("gaussian_smooth", |rng| (inputs(&mut rng, &[("x", &[1, 2, 9, 7], 1.0)]), kernel()),
            |t, p, ctx| gaussian::smooth(v(t, p, "x")?, ctx)),
        case!("high_freq", |rng| (inputs(&mut rng, &[("x", &[1, 2, 9, 7], 1.0)]), GaussianKernel::new(0.8, 5).expect("kernel")),
            |t, p, ctx| gaussian::high_freq(v(t, p, "x")?, ctx)),
        case!("uncertainty", |rng| (inputs(&mut rng, &[("x", &[2, 4, 4, 4], 2.0)]), ()),
            |t, p, ctx| Ok(uncertainty::uncertainty_from_logits(v(t, p, "x")?)?.var())),
        case!("cala", |rng| (afr_inputs(&mut rng, 4, &[("l", &[2, 4, 4, 4], 2.0), ("u", &[2, 1, 4, 4], 1.0)]), kernel()),
            |t, p, ctx| {
                let params = AfrParams::bind(t, p)?;
                let u = UncertaintyMap::from_var(v(t, p, "u")?)?;
                Ok(afr::cala(v(t, p, "l")?, u, &params, Some(ctx))?.var())
            }),
        case!("uhfa", |rng| (afr_inputs(&mut rng, 4, &[("f", &[2, 3, 5, 4], 1.0), ("u", &[2, 1, 5, 4], 1.0)]), kernel()),
            |t, p, ctx| {
                let params = AfrParams::bind(t, p)?;
                let u = UncertaintyMap::from_var(v(t, p, "u")?)?;
                Ok(afr::uhfa(v(t, p, "f")?, u, &params, Some(ctx))?.var())
            }),
        case!("fuse_refine", |rng| (afr_inputs(&mut rng, 2, &[("f", &[2, 3, 4, 4], 1.0), ("a", &[2, 1, 4, 4], 0.5), ("b", &[2, 1, 4, 4], 0.5)]), ()),
            |t, p, ctx| {
                let params = AfrParams::bind(t, p)?;
                let a1 = AttentionMap::from_var(ops::sigmoid(v(t, p, "a")?))?;
                let a2 = AttentionMap::from_var(ops::sigmoid(v(t, p, "b")?))?;
                afr::refine(v(t, p, "f")?, afr::fuse(a1, a2, &params)?)
            }),
        case!("afr_forward", |rng| (afr_inputs(&mut rng, 3, &[
                    ("f0", &[1, 4, 8, 8], 1.0),
                    ("f1", &[1, 4, 4, 4], 1.0),
                    ("lr", &[1, 3, 4, 4], 2.0),
                    ("aux", &[1, 3, 8, 8], 2.0),
                ]), AfrConfig::default()),
            |t, p, ctx| {
                let params = AfrParams::bind(t, p)?;
                let feats = MultiScaleFeatures::new(vec![v(t, p, "f0")?, v(t, p, "f1")?])?;
                let out = afr::afr_forward(&feats, v(t, p, "lr")?, v(t, p, "aux")?, &params, ctx)?;
                let r = out.refined.levels();
                let up = ops::resize_bilinear(r[1], 8, 8)?;
                ops::add(r[0], up)
            }),
        case!("segnet_cross_entropy", |rng| {
                let config = NetConfig { lr_width: 3, hr_width: 4, num_classes: 3, ..NetConfig::default() };
                let mut set = segnet::init_params(&config, &mut rng)?;
                for prm in set.iter_mut() {
                    if prm.name().ends_with(".b") || prm.name().ends_with("_b") || prm.name().ends_with("alpha_raw") {
                        for x in prm.value_mut() {
                            *x = rng.random_range(-0.3..0.3);
                        }
                    }
                }
                let image = Tensor::from_fn(&[2, 3, 4, 4], |_| rng.random_range(0.0..1.0));
                let y = labels(&mut rng, 2, 4, 4, 3);
                (set, (config, image, y))
            },
            |t, p, ctx| {
                let (config, image, y) = ctx;
                let out = segnet::forward(t, t.constant(image.clone()), p, config)?;
                ops::cross_entropy(out.final_logits, y, None)
            }),
    ]
}

/// Names of every case in [`run_suite`].
pub fn case_names() -> Vec<&'static str> {
    cases().into_iter().map(|(n, _)| n).collect()
}

/// Run every case at every seed.
pub fn run_suite(opts: &GradcheckOptions) -> Result<Vec<CaseReport>> {
    let mut out = Vec::new();
    for (_, run) in cases() {
        for &seed in &opts.seeds {
            out.push(run(seed, opts)?);
        }
    }
    Ok(out)
}

/// Gradient of the composed network loss with respect to `afr.alpha_raw`.
pub fn alpha_gradient(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = NetConfig { lr_width: 3, hr_width: 4, num_classes: 3, ..NetConfig::default() };
    let mut set = segnet::init_params(&config, &mut rng)?;
    let image = Tensor::from_fn(&[2, 3, 4, 4], |_| rng.random_range(0.0..1.0));
    let y = labels(&mut rng, 2, 4, 4, 3);
    let tape = Tape::new();
    let out = segnet::forward(&tape, tape.constant(image), &set, &config)?;
    let loss = ops::cross_entropy(out.final_logits, &y, None)?;
    tape.backward(loss, &mut set)?;
    let g = set.get(afr::ALPHA_RAW)?.grad().item();
    if !g.is_finite() {
        return Err(Error::domain("alpha_gradient", "non-finite gradient"));
    }
    Ok(g)
}
