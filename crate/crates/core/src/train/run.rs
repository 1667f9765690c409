use std::fs::{self, File};
use std::io::Write as _;
use std::path::Path;

use crate::autodiff::{ParamSet, Tape};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, IouReport};
use crate::pnm::{self, ImageData};
use crate::segnet::{self, NetConfig};
use crate::synthdata::{self, Domain, Sample};
use crate::tensor::{Tensor, IGNORE_ID};

use super::{train_step, StepContext, StepLosses, TrainState};

/// Target training images are drawn from indices starting here.
pub const TARGET_OFFSET: u64 = 10_000_000;
/// Held-out target evaluation images start here.
pub const EVAL_OFFSET: u64 = 20_000_000;

const EVAL_BATCH: usize = 16;

/// One evaluation line of the metrics log. Losses and quality are averaged
/// over the steps since the previous evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub iteration: u64,
    pub report: IouReport,
    pub loss_s: f64,
    pub loss_t: f64,
    pub loss_m: f64,
    pub q_mean: f64,
}

impl EvalRecord {
    pub fn log_line(&self) -> String {
        format!(
            "iter {} mIoU {} loss_s {} loss_t {} loss_m {} q_mean {}",
            self.iteration,
            format_g6(self.report.miou),
            format_g6(self.loss_s),
            format_g6(self.loss_t),
            format_g6(self.loss_m),
            format_g6(self.q_mean),
        )
    }
}

#[derive(Debug)]
pub struct RunSummary {
    pub state: TrainState,
    pub records: Vec<EvalRecord>,
}

/// C-style `%.6g`.
pub fn format_g6(v: f64) -> String {
    if !v.is_finite() {
        return if v.is_nan() { "nan".into() } else if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if !(-4..6).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim(mantissa), exp.abs())
    } else {
        trim(&format!("{v:.*}", (5 - exp) as usize))
    }
}

/// Held-out target images for evaluation.
pub fn eval_samples(config: &RunConfig) -> Result<Vec<Sample>> {
    let spec = config.scene_spec();
    let shift = config.domain_shift();
    (0..config.eval_images as u64)
        .map(|i| synthdata::generate(&spec, &shift, Domain::Target, EVAL_OFFSET + i))
        .collect()
}

/// Per-class IoU of `params` over `samples`.
pub fn evaluate(params: &ParamSet, net: &NetConfig, samples: &[Sample]) -> Result<(IouReport, ConfusionMatrix)> {
    let mut cm = ConfusionMatrix::new(net.num_classes);
    for chunk in samples.chunks(EVAL_BATCH) {
        let (images, labels) = synthdata::batch(chunk)?;
        let pred = segnet::predict(&images, params, net)?;
        cm.accumulate(&pred, &labels, IGNORE_ID)?;
    }
    Ok((cm.iou()?, cm))
}

/// Write the input, prediction and attention maps of the first HR level for
/// a single image (1×3×H×W) into `dir`.
///
/// Files: `input.ppm`, `prediction.ppm`, `a1.pgm`, `a2.pgm`, `a_final.pgm`
/// and `a1_minus_a2.pgm`; maps of disabled branches are skipped.
pub fn dump_attention(params: &ParamSet, net: &NetConfig, image: &Tensor, dir: &Path) -> Result<Vec<String>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tape = Tape::no_grad();
    let out = segnet::forward(&tape, tape.constant(image.clone()), params, net)?;
    let mut written = Vec::new();
    let mut put = |name: &str, data: ImageData<'_>| -> Result<()> {
        pnm::write_image(&dir.join(name), data)?;
        written.push(name.to_string());
        Ok(())
    };
    put("input.ppm", ImageData::Rgb(image))?;
    let pred = segnet::argmax_map(&out.final_logits.value())?;
    put("prediction.ppm", ImageData::Labels(&pred))?;
    if let Some(level) = out.afr.levels.first() {
        let a1 = level.a1.map(|a| a.value());
        let a2 = level.a2.map(|a| a.value());
        if let Some(a1) = &a1 {
            put("a1.pgm", ImageData::Gray(a1))?;
        }
        if let Some(a2) = &a2 {
            put("a2.pgm", ImageData::Gray(a2))?;
        }
        put("a_final.pgm", ImageData::Gray(&level.a_final.value()))?;
        if let (Some(a1), Some(a2)) = (&a1, &a2) {
            let diff = Tensor::new(
                a1.shape(),
                a1.data().iter().zip(a2.data()).map(|(x, y)| x - y).collect(),
            )?;
            put("a1_minus_a2.pgm", ImageData::Gray(&diff))?;
        }
    }
    Ok(written)
}

fn batch_at(config: &RunConfig, domain: Domain, start: u64) -> Result<Vec<Sample>> {
    let spec = config.scene_spec();
    let shift = config.domain_shift();
    (0..config.batch_size as u64)
        .map(|i| synthdata::generate(&spec, &shift, domain, start + i))
        .collect()
}

/// Train from scratch for `config.iterations` steps, writing `metrics.log`,
/// checkpoints (`ckpt_<iter>.bin` and `final.bin`) and attention dumps under
/// `config.out_dir`.
pub fn train_loop(config: &RunConfig) -> Result<RunSummary> {
    config.validate()?;
    let out = &config.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let net = config.net_config()?;
    let mut state = TrainState::new(&net, config.seed)?;
    let fill = synthdata::dataset_mean(&config.scene_spec(), &config.domain_shift(), Domain::Target, config.mean_images)?;
    let ctx = StepContext {
        config,
        net: &net,
        fill,
    };
    let eval_set = eval_samples(config)?;

    let log_path = out.join("metrics.log");
    let mut log = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut records = Vec::new();
    let mut pending: Vec<StepLosses> = Vec::new();
    let mut record = |state: &TrainState, pending: &mut Vec<StepLosses>, log: &mut File| -> Result<()> {
        let (report, _) = evaluate(&state.student, &net, &eval_set)?;
        let n = pending.len().max(1) as f64;
        let avg = |f: fn(&StepLosses) -> f64| pending.iter().map(f).sum::<f64>() / n;
        let rec = EvalRecord {
            iteration: state.iteration,
            report,
            loss_s: avg(|l| l.l_s),
            loss_t: avg(|l| l.l_t),
            loss_m: avg(|l| l.l_m),
            q_mean: avg(|l| l.q_mean),
        };
        writeln!(log, "{}", rec.log_line()).map_err(|e| Error::io(&log_path, e))?;
        pending.clear();
        records.push(rec);
        Ok(())
    };

    if config.iterations > 0 {
        record(&state, &mut pending, &mut log)?;
    }
    let b = config.batch_size as u64;
    let every = |interval: u64, t: u64| interval > 0 && t.is_multiple_of(interval);
    for t in 0..config.iterations {
        let (src_images, src_labels) = synthdata::batch(&batch_at(config, Domain::Source, t * b)?)?;
        let (tgt_images, _) = synthdata::batch(&batch_at(config, Domain::Target, TARGET_OFFSET + t * b)?)?;
        pending.push(train_step(&mut state, &src_images, &src_labels, &tgt_images, &ctx)?);
        let done = state.iteration;
        if every(config.eval_interval, done) || done == config.iterations {
            record(&state, &mut pending, &mut log)?;
        }
        if every(config.checkpoint_interval, done) {
            state.to_checkpoint().save(&out.join(format!("ckpt_{done:06}.bin")))?;
        }
        if every(config.dump_interval, done) {
            let image = eval_set[0].image.clone().reshape(&[1, 3, config.height, config.width])?;
            dump_attention(&state.student, &net, &image, &out.join(format!("attention/iter_{done:06}")))?;
        }
    }
    log.sync_all().map_err(|e| Error::io(&log_path, e))?;
    state.to_checkpoint().save(&out.join("final.bin"))?;
    Ok(RunSummary { state, records })
}
