//! Attentive feature refinement.
//!
//! Two attention branches produce single-channel maps in (0, 1):
//!
//! * CALA reads the low-resolution logits. A 1×1 projection of the logits is
//!   gated by the HR uncertainty, then the projected high-frequency residual
//!   of the logits is added before the final sigmoid (`A1`).
//! * UHFA reads each HR feature level. The channel mean plus its
//!   high-frequency residual passes through a 3×3 spatial attention layer and
//!   is damped by `exp(−U_LR)` before the sigmoid (`A2`).
//!
//! The maps are mixed as `α·A1 + (1−α)·A2` with `α = σ(alpha_raw)` and applied
//! to the features with a residual connection: `F ⊙ A + F`.

use rand::Rng;

use crate::autodiff::{ops, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::gaussian::{self, GaussianKernel};
use crate::tensor::Tensor;
use crate::uncertainty::{self, UncertaintyMap};

pub const CALA_W: &str = "afr.cala_w";
pub const CALA_B: &str = "afr.cala_b";
pub const UHFA_W: &str = "afr.uhfa_w";
pub const UHFA_B: &str = "afr.uhfa_b";
pub const ALPHA_RAW: &str = "afr.alpha_raw";

/// Add freshly initialized AFR parameters for `num_classes` logit channels.
///
/// Projection weights are uniform in ±1/√fan_in, biases and `alpha_raw` are
/// zero (so the two branches start with equal weight).
pub fn init_params(set: &mut ParamSet, num_classes: usize, rng: &mut impl Rng) -> Result<()> {
    let bound = 1.0 / (num_classes as f64).sqrt();
    set.insert(
        CALA_W,
        Tensor::from_fn(&[1, num_classes], |_| rng.random_range(-bound..bound)),
    )?;
    set.insert(CALA_B, Tensor::zeros(&[1]))?;
    let bound = 1.0 / 3.0;
    set.insert(
        UHFA_W,
        Tensor::from_fn(&[1, 1, 3, 3], |_| rng.random_range(-bound..bound)),
    )?;
    set.insert(UHFA_B, Tensor::zeros(&[1]))?;
    set.insert(ALPHA_RAW, Tensor::zeros(&[1]))?;
    Ok(())
}

/// The AFR parameters bound as leaves of one tape.
#[derive(Clone, Copy, Debug)]
pub struct AfrParams<'t> {
    pub cala_w: Var<'t>,
    pub cala_b: Var<'t>,
    pub uhfa_w: Var<'t>,
    pub uhfa_b: Var<'t>,
    pub alpha_raw: Var<'t>,
}

impl<'t> AfrParams<'t> {
    pub fn bind(tape: &'t Tape, set: &ParamSet) -> Result<Self> {
        Ok(AfrParams {
            cala_w: tape.param_named(set, CALA_W)?,
            cala_b: tape.param_named(set, CALA_B)?,
            uhfa_w: tape.param_named(set, UHFA_W)?,
            uhfa_b: tape.param_named(set, UHFA_B)?,
            alpha_raw: tape.param_named(set, ALPHA_RAW)?,
        })
    }

    /// Effective mixing weight `σ(alpha_raw)`.
    pub fn alpha(&self) -> Var<'t> {
        ops::sigmoid(self.alpha_raw)
    }
}

/// Single-channel attention map, B×1×H×W.
#[derive(Clone, Copy, Debug)]
pub struct AttentionMap<'t> {
    values: Var<'t>,
}

impl<'t> AttentionMap<'t> {
    pub fn from_var(values: Var<'t>) -> Result<Self> {
        match values.shape()[..] {
            [_, 1, _, _] => Ok(AttentionMap { values }),
            ref s => Err(Error::shape(
                "AttentionMap",
                format!("expected B×1×H×W, got {s:?}"),
            )),
        }
    }

    pub fn var(&self) -> Var<'t> {
        self.values
    }

    pub fn value(&self) -> Tensor {
        (*self.values.value()).clone()
    }

    fn resized(&self, h: usize, w: usize) -> Result<Self> {
        Ok(AttentionMap {
            values: ops::resize_bilinear(self.values, h, w)?,
        })
    }
}

/// Ordered HR feature levels, finest first.
#[derive(Clone, Debug)]
pub struct MultiScaleFeatures<'t> {
    levels: Vec<Var<'t>>,
}

impl<'t> MultiScaleFeatures<'t> {
    pub fn new(levels: Vec<Var<'t>>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::domain("MultiScaleFeatures", "at least one level is required"));
        }
        let mut prev: Option<(usize, usize, usize)> = None;
        for lvl in &levels {
            let (b, _, h, w) = lvl.value().dims4()?;
            if let Some((pb, ph, pw)) = prev {
                if b != pb || h > ph || w > pw {
                    return Err(Error::shape(
                        "MultiScaleFeatures",
                        format!("level {b}×{h}×{w} after {pb}×{ph}×{pw}"),
                    ));
                }
            }
            prev = Some((b, h, w));
        }
        Ok(MultiScaleFeatures { levels })
    }

    pub fn levels(&self) -> &[Var<'t>] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

fn spatial(v: Var<'_>) -> Result<(usize, usize, usize)> {
    let (b, _, h, w) = v.value().dims4()?;
    Ok((b, h, w))
}

/// Class-aware logit attention, computed at the logits' resolution.
///
/// `hf_kernel = None` drops the high-frequency logit term.
pub fn cala<'t>(
    lr_logits: Var<'t>,
    u_hr: UncertaintyMap<'t>,
    params: &AfrParams<'t>,
    hf_kernel: Option<&GaussianKernel>,
) -> Result<AttentionMap<'t>> {
    if spatial(lr_logits)? != spatial(u_hr.var())? {
        return Err(Error::shape(
            "cala",
            format!(
                "uncertainty {:?} does not match logits {:?}",
                u_hr.var().shape(),
                lr_logits.shape()
            ),
        ));
    }
    let l_attn = ops::sigmoid(ops::conv1x1(lr_logits, params.cala_w, params.cala_b)?);
    let u_attn = ops::sigmoid(u_hr.var());
    let mut a = ops::mul(l_attn, u_attn)?;
    if let Some(kernel) = hf_kernel {
        // The residual has C channels; reuse the projection weights (no bias)
        // to bring it down to the single attention channel.
        let hf = gaussian::high_freq(lr_logits, kernel)?;
        let zero = lr_logits.tape().constant(Tensor::zeros(&[1]));
        let hf = ops::conv1x1(hf, params.cala_w, zero)?;
        a = ops::add(a, hf)?;
    }
    AttentionMap::from_var(ops::sigmoid(a))
}

/// Uncertainty-suppressed attention over one HR feature level.
///
/// `hf_kernel = None` drops the high-frequency feature term.
pub fn uhfa<'t>(
    f_hr: Var<'t>,
    u_lr: UncertaintyMap<'t>,
    params: &AfrParams<'t>,
    hf_kernel: Option<&GaussianKernel>,
) -> Result<AttentionMap<'t>> {
    if spatial(f_hr)? != spatial(u_lr.var())? {
        return Err(Error::shape(
            "uhfa",
            format!(
                "uncertainty {:?} does not match features {:?}",
                u_lr.var().shape(),
                f_hr.shape()
            ),
        ));
    }
    let pooled = ops::channel_mean(f_hr)?;
    let fused = match hf_kernel {
        Some(kernel) => ops::add(pooled, gaussian::high_freq(pooled, kernel)?)?,
        None => pooled,
    };
    let a_hr = ops::conv3x3(fused, params.uhfa_w, params.uhfa_b)?;
    let damp = ops::exp(ops::scale(u_lr.var(), -1.0));
    AttentionMap::from_var(ops::sigmoid(ops::mul(a_hr, damp)?))
}

/// `α·A1 + (1−α)·A2`.
pub fn fuse<'t>(
    a1: AttentionMap<'t>,
    a2: AttentionMap<'t>,
    params: &AfrParams<'t>,
) -> Result<AttentionMap<'t>> {
    AttentionMap::from_var(ops::convex_combine(a1.var(), a2.var(), params.alpha())?)
}

/// Residual refinement `F ⊙ A + F`.
pub fn refine<'t>(f_hr: Var<'t>, a_final: AttentionMap<'t>) -> Result<Var<'t>> {
    if spatial(f_hr)? != spatial(a_final.var())? {
        return Err(Error::shape(
            "refine",
            format!(
                "attention {:?} does not match features {:?}",
                a_final.var().shape(),
                f_hr.shape()
            ),
        ));
    }
    ops::add(ops::mul(f_hr, a_final.var())?, f_hr)
}

/// Switches for the attention branches and their high-frequency terms.
#[derive(Clone, Debug, PartialEq)]
pub struct AfrConfig {
    pub enable_afr: bool,
    pub enable_cala: bool,
    pub enable_uhfa: bool,
    pub enable_hf_cala: bool,
    pub enable_hf_uhfa: bool,
    pub detach_uncertainty: bool,
    pub kernel: GaussianKernel,
}

impl Default for AfrConfig {
    fn default() -> Self {
        AfrConfig {
            enable_afr: true,
            enable_cala: true,
            enable_uhfa: true,
            enable_hf_cala: true,
            enable_hf_uhfa: true,
            detach_uncertainty: false,
            kernel: GaussianKernel::new(1.0, 3).expect("default kernel"),
        }
    }
}

impl AfrConfig {
    /// True when the forward actually changes the features.
    pub fn is_active(&self) -> bool {
        self.enable_afr && (self.enable_cala || self.enable_uhfa)
    }
}

/// Attention maps of one feature level.
#[derive(Clone, Copy, Debug)]
pub struct LevelAttention<'t> {
    /// A1 resized to this level, if CALA ran.
    pub a1: Option<AttentionMap<'t>>,
    pub a2: Option<AttentionMap<'t>>,
    pub a_final: AttentionMap<'t>,
}

#[derive(Clone, Debug)]
pub struct AfrOutput<'t> {
    pub refined: MultiScaleFeatures<'t>,
    pub u_hr: Option<UncertaintyMap<'t>>,
    pub u_lr: Option<UncertaintyMap<'t>>,
    /// A1 at the logits' resolution.
    pub a1: Option<AttentionMap<'t>>,
    pub levels: Vec<LevelAttention<'t>>,
}

/// Refine every HR feature level using the LR logits and the HR auxiliary
/// logits (source of U_HR).
pub fn afr_forward<'t>(
    features: &MultiScaleFeatures<'t>,
    lr_logits: Var<'t>,
    hr_logits_aux: Var<'t>,
    params: &AfrParams<'t>,
    config: &AfrConfig,
) -> Result<AfrOutput<'t>> {
    if features.is_empty() {
        return Err(Error::domain("afr_forward", "empty feature list"));
    }
    if !config.is_active() {
        return Ok(AfrOutput {
            refined: features.clone(),
            u_hr: None,
            u_lr: None,
            a1: None,
            levels: Vec::new(),
        });
    }
    let detach = |u: UncertaintyMap<'t>| if config.detach_uncertainty { u.detach() } else { u };
    let (_, _, lh, lw) = lr_logits.value().dims4()?;

    let u_lr = detach(uncertainty::uncertainty_from_logits(lr_logits)?);
    let (u_hr, a1) = if config.enable_cala {
        let u_hr = detach(uncertainty::hr_uncertainty_source(hr_logits_aux)?);
        let hf = config.enable_hf_cala.then_some(&config.kernel);
        let a1 = cala(lr_logits, u_hr.resized(lh, lw)?, params, hf)?;
        (Some(u_hr), Some(a1))
    } else {
        (None, None)
    };

    let mut refined = Vec::with_capacity(features.len());
    let mut levels = Vec::with_capacity(features.len());
    for &f in features.levels() {
        let (_, _, h, w) = f.value().dims4()?;
        let a1_n = a1.map(|a| a.resized(h, w)).transpose()?;
        let a2_n = if config.enable_uhfa {
            let hf = config.enable_hf_uhfa.then_some(&config.kernel);
            Some(uhfa(f, u_lr.resized(h, w)?, params, hf)?)
        } else {
            None
        };
        let a_final = match (a1_n, a2_n) {
            (Some(x), Some(y)) => fuse(x, y, params)?,
            (Some(x), None) => x,
            (None, Some(y)) => y,
            (None, None) => unreachable!("config.is_active() guarantees a branch"),
        };
        refined.push(refine(f, a_final)?);
        levels.push(LevelAttention {
            a1: a1_n,
            a2: a2_n,
            a_final,
        });
    }
    Ok(AfrOutput {
        refined: MultiScaleFeatures::new(refined)?,
        u_hr,
        u_lr: Some(u_lr),
        a1,
        levels,
    })
}
