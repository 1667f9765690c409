//! Two-branch segmentation network hosting AFR.
//!
//! The LR branch sees a 2× average-pooled copy of the image and produces the
//! context logits; the HR branch keeps full resolution and produces the detail
//! features that AFR refines. AFR sits between the HR encoder and the HR
//! head. Final logits are the mean of the upsampled LR logits and the HR
//! logits.

use rand::Rng;

use crate::afr::{self, AfrConfig, AfrOutput, AfrParams, MultiScaleFeatures};
use crate::autodiff::{ops, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{ClassMap, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub num_classes: usize,
    pub lr_width: usize,
    pub hr_width: usize,
    /// 1 or 2 HR feature levels; level 1 is a 2× pooled copy of level 0.
    pub hr_levels: usize,
    pub afr: AfrConfig,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            num_classes: 4,
            lr_width: 16,
            hr_width: 16,
            hr_levels: 1,
            afr: AfrConfig::default(),
        }
    }
}

const IMAGE_CHANNELS: usize = 3;

/// Create a freshly initialized parameter set for `config`.
///
/// Weights are uniform in ±1/√fan_in and biases start at zero.
pub fn init_params(config: &NetConfig, rng: &mut impl Rng) -> Result<ParamSet> {
    if config.num_classes < 2 {
        return Err(Error::domain("segnet::init_params", "need at least 2 classes"));
    }
    if !(1..=2).contains(&config.hr_levels) {
        return Err(Error::domain(
            "segnet::init_params",
            format!("hr_levels must be 1 or 2, got {}", config.hr_levels),
        ));
    }
    let mut set = ParamSet::new();
    let c = config.num_classes;
    let mut uniform = |set: &mut ParamSet, name: &str, shape: &[usize], fan_in: usize| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        set.insert(name, Tensor::from_fn(shape, |_| rng.random_range(-bound..bound)))
    };
    for (prefix, width) in [("lr", config.lr_width), ("hr", config.hr_width)] {
        uniform(&mut set, &format!("{prefix}.conv1.w"), &[width, IMAGE_CHANNELS, 3, 3], IMAGE_CHANNELS * 9)?;
        set.insert(format!("{prefix}.conv1.b"), Tensor::zeros(&[width]))?;
        uniform(&mut set, &format!("{prefix}.conv2.w"), &[width, width, 3, 3], width * 9)?;
        set.insert(format!("{prefix}.conv2.b"), Tensor::zeros(&[width]))?;
    }
    uniform(&mut set, "lr.head.w", &[c, config.lr_width], config.lr_width)?;
    set.insert("lr.head.b", Tensor::zeros(&[c]))?;
    uniform(&mut set, "hr.aux_head.w", &[c, config.hr_width], config.hr_width)?;
    set.insert("hr.aux_head.b", Tensor::zeros(&[c]))?;
    uniform(&mut set, "hr.head.w", &[c, config.hr_width], config.hr_width)?;
    set.insert("hr.head.b", Tensor::zeros(&[c]))?;
    afr::init_params(&mut set, c, rng)?;
    Ok(set)
}

/// Everything a forward pass produces, for losses, tests and visualisation.
#[derive(Debug)]
pub struct SegOutput<'t> {
    /// B×C×H×W.
    pub final_logits: Var<'t>,
    /// B×C×H/2×W/2.
    pub lr_logits: Var<'t>,
    pub hr_aux_logits: Var<'t>,
    pub hr_logits: Var<'t>,
    pub features: MultiScaleFeatures<'t>,
    pub afr: AfrOutput<'t>,
}

fn encoder<'t>(tape: &'t Tape, params: &ParamSet, prefix: &str, x: Var<'t>) -> Result<Var<'t>> {
    let p = |n: &str| tape.param_named(params, &format!("{prefix}.{n}"));
    let h = ops::relu(ops::conv2d_3x3(x, p("conv1.w")?, p("conv1.b")?)?);
    Ok(ops::relu(ops::conv2d_3x3(h, p("conv2.w")?, p("conv2.b")?)?))
}

fn head<'t>(tape: &'t Tape, params: &ParamSet, name: &str, x: Var<'t>) -> Result<Var<'t>> {
    ops::conv1x1(
        x,
        tape.param_named(params, &format!("{name}.w"))?,
        tape.param_named(params, &format!("{name}.b"))?,
    )
}

pub fn forward<'t>(
    tape: &'t Tape,
    image: Var<'t>,
    params: &ParamSet,
    config: &NetConfig,
) -> Result<SegOutput<'t>> {
    let (_, ch, h, w) = image.value().dims4()?;
    if ch != IMAGE_CHANNELS {
        return Err(Error::shape(
            "segnet::forward",
            format!("expected {IMAGE_CHANNELS} image channels, got {ch}"),
        ));
    }
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::domain(
            "segnet::forward",
            format!("image size {h}×{w} is not divisible by 4"),
        ));
    }

    let lr_image = ops::avg_pool2(image)?;
    let lr_features = encoder(tape, params, "lr", lr_image)?;
    let lr_logits = head(tape, params, "lr.head", lr_features)?;

    let hr0 = encoder(tape, params, "hr", image)?;
    let mut levels = vec![hr0];
    if config.hr_levels == 2 {
        levels.push(ops::avg_pool2(hr0)?);
    }
    let features = MultiScaleFeatures::new(levels)?;
    let hr_aux_logits = head(tape, params, "hr.aux_head", hr0)?;

    let afr_params = AfrParams::bind(tape, params)?;
    let afr = afr::afr_forward(&features, lr_logits, hr_aux_logits, &afr_params, &config.afr)?;
    let hr_logits = head(tape, params, "hr.head", afr.refined.levels()[0])?;

    let up = ops::resize_bilinear(lr_logits, h, w)?;
    let final_logits = ops::scale(ops::add(up, hr_logits)?, 0.5);
    Ok(SegOutput {
        final_logits,
        lr_logits,
        hr_aux_logits,
        hr_logits,
        features,
        afr,
    })
}

/// Per-pixel argmax over channels; ties resolve to the lowest class id.
pub fn argmax_map(logits: &Tensor) -> Result<ClassMap> {
    let (b, c, h, w) = logits.dims4()?;
    if c > usize::from(u8::MAX) {
        return Err(Error::domain("argmax_map", format!("{c} classes do not fit a u8 id")));
    }
    let hw = h * w;
    let mut ids = Vec::with_capacity(b * hw);
    for bi in 0..b {
        for p in 0..hw {
            ids.push(ops::argmax_channels(logits.data(), c, hw, bi, p) as u8);
        }
    }
    ClassMap::new(b, h, w, ids)
}

/// Class map for a batch of images, evaluated without recording gradients.
pub fn predict(image: &Tensor, params: &ParamSet, config: &NetConfig) -> Result<ClassMap> {
    let tape = Tape::no_grad();
    let out = forward(&tape, tape.constant(image.clone()), params, config)?;
    let logits = out.final_logits.value();
    argmax_map(&logits)
}
