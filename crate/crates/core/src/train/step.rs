use crate::autodiff::{ops, Tape};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::segnet::{self, NetConfig};
use crate::tensor::{ClassMap, Tensor};

use super::{apply_mask, classmix, ema_update, make_mask, pseudo_label, sgd_step, TrainState};

/// Fixed inputs shared by every step of a run.
#[derive(Clone, Debug)]
pub struct StepContext<'a> {
    pub config: &'a RunConfig,
    pub net: &'a NetConfig,
    /// Per-channel fill colour for masked cells.
    pub fill: [f64; 3],
}

/// Loss components of one step. `l_m` already includes `lambda_mask`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub l_s: f64,
    pub l_t: f64,
    pub l_m: f64,
    pub total: f64,
    pub q_mean: f64,
}

/// One optimisation step on the student followed by the teacher EMA update.
pub fn train_step(
    state: &mut TrainState,
    src_images: &Tensor,
    src_labels: &ClassMap,
    tgt_images: &Tensor,
    ctx: &StepContext<'_>,
) -> Result<StepLosses> {
    let cfg = ctx.config;
    let (b, _, h, w) = src_images.dims4()?;
    let (tb, _, th, tw) = tgt_images.dims4()?;
    if (b, h, w) != (tb, th, tw) {
        return Err(Error::shape(
            "train_step",
            format!("source {:?} vs target {:?}", src_images.shape(), tgt_images.shape()),
        ));
    }
    let use_target = cfg.enable_target_loss || cfg.enable_masked_loss;

    let tape = Tape::new();
    let src_out = segnet::forward(&tape, tape.constant(src_images.clone()), &state.student, ctx.net)?;
    let l_s = ops::cross_entropy(src_out.final_logits, src_labels, None)?;
    let mut total = l_s;
    let mut losses = StepLosses::default();

    if use_target {
        let pseudo = pseudo_label(tgt_images, &state.teacher, ctx.net, cfg.tau)?;
        losses.q_mean = pseudo.mean_quality();

        if cfg.enable_target_loss {
            let mut images = Vec::with_capacity(b);
            let mut labels = Vec::with_capacity(b);
            let mut weights = Vec::with_capacity(b);
            for i in 0..b {
                let mix = classmix(
                    &src_images.batch_item(i)?,
                    &src_labels.batch_item(i),
                    &tgt_images.batch_item(i)?,
                    &pseudo.labels.batch_item(i),
                    pseudo.quality[i],
                    &mut state.rng,
                )?;
                images.push(mix.image);
                labels.push(mix.label);
                weights.push(mix.weight);
            }
            let weight = Tensor::stack(&weights)?;
            let out = segnet::forward(&tape, tape.constant(Tensor::stack(&images)?), &state.student, ctx.net)?;
            let l_t = ops::cross_entropy(
                out.final_logits,
                &ClassMap::stack(&labels)?,
                (!cfg.unweighted_mix).then_some(&weight),
            )?;
            losses.l_t = l_t.value().item();
            total = ops::add(total, l_t)?;
        }

        if cfg.enable_masked_loss {
            let mut masked = Vec::with_capacity(b);
            for i in 0..b {
                let pattern = make_mask(h, w, cfg.mask_patch, cfg.mask_ratio, &mut state.rng)?;
                masked.push(apply_mask(&tgt_images.batch_item(i)?, &pattern, &ctx.fill)?);
            }
            let weight = Tensor::from_fn(&[b, 1, h, w], |i| pseudo.quality[i / (h * w)]);
            let out = segnet::forward(&tape, tape.constant(Tensor::stack(&masked)?), &state.student, ctx.net)?;
            let l_m = ops::scale(
                ops::cross_entropy(out.final_logits, &pseudo.labels, Some(&weight))?,
                cfg.lambda_mask,
            );
            losses.l_m = l_m.value().item();
            total = ops::add(total, l_m)?;
        }
    }

    losses.l_s = l_s.value().item();
    losses.total = total.value().item();
    if !losses.total.is_finite() {
        return Err(Error::domain("train_step", format!("non-finite loss at iteration {}", state.iteration)));
    }
    state.student.zero_grad();
    tape.backward(total, &mut state.student)?;
    sgd_step(&mut state.student, &mut state.velocity, cfg.lr, cfg.momentum)?;
    ema_update(&mut state.teacher, &state.student, ema_alpha(cfg, state.iteration))?;
    state.iteration += 1;
    Ok(losses)
}

/// EMA coefficient for the update that follows step `t` (0-based).
pub fn ema_alpha(cfg: &RunConfig, t: u64) -> f64 {
    if cfg.ema_warmup {
        cfg.alpha_ema.min(1.0 - 1.0 / (t as f64 + 1.0))
    } else {
        cfg.alpha_ema
    }
}
