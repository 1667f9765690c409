//! End-to-end acceptance report. Prints one verdict line per criterion and
//! exits nonzero if any criterion fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use afrda_core::afr::{self, AfrConfig, AfrParams, MultiScaleFeatures};
use afrda_core::autodiff::{ParamSet, Tape};
use afrda_core::checkpoint::{Checkpoint, RngState};
use afrda_core::config::RunConfig;
use afrda_core::gaussian::{self, GaussianKernel};
use afrda_core::gradcheck::{self, GradcheckOptions};
use afrda_core::metrics::ConfusionMatrix;
use afrda_core::pnm;
use afrda_core::segnet::{self, NetConfig};
use afrda_core::synthdata::{self, Domain, THIN_BAR};
use afrda_core::train::{
    self, classmix, ema_alpha, ema_update, pseudo_label_from_logits, train_step, StepContext, TrainState,
};
use afrda_core::{ClassMap, Error, Tensor, IGNORE_ID};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

#[derive(Clone, Copy, PartialEq, Eq)]
enum Verdict {
    Pass,
    Fail,
    Reported,
}

struct Outcome {
    verdict: Verdict,
    summary: String,
    details: Vec<String>,
}

impl Outcome {
    fn check(ok: bool, summary: String) -> Self {
        Outcome {
            verdict: if ok { Verdict::Pass } else { Verdict::Fail },
            summary,
            details: Vec::new(),
        }
    }
}

fn report(n: u32, start: Instant, budget: Option<Duration>, mut outcome: Outcome) -> bool {
    let elapsed = start.elapsed();
    let over = budget.is_some_and(|b| elapsed > b);
    if over && outcome.verdict != Verdict::Fail {
        outcome.verdict = Verdict::Fail;
        outcome.summary.push_str(" [over time budget]");
    }
    let tag = match outcome.verdict {
        Verdict::Pass => "PASS",
        Verdict::Fail => "FAIL",
        Verdict::Reported => "PASS (reported)",
    };
    let budget = budget.map(|b| format!(" / {:.0}s", b.as_secs_f64())).unwrap_or_default();
    println!("criterion {n}: {tag}: {} ({:.1}s{budget})", outcome.summary, elapsed.as_secs_f64());
    for line in &outcome.details {
        println!("    {line}");
    }
    outcome.verdict != Verdict::Fail
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn same_params(a: &ParamSet, b: &ParamSet) -> bool {
    a.len() == b.len()
        && a.iter().zip(b.iter()).all(|(x, y)| x.name() == y.name() && bits(x.value()) == bits(y.value()))
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

fn criterion_1() -> Outcome {
    let opts = GradcheckOptions::default();
    let reports = gradcheck::run_suite(&opts).expect("gradcheck suite runs");
    let failures: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed(&opts) || r.checked < 100)
        .map(|r| format!("{} seed {}: max rel {:.3e}, {} checked", r.name, r.seed, r.max_rel_error, r.checked))
        .collect();
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let min_checked = reports.iter().map(|r| r.checked).min().unwrap_or(0);
    let cases = gradcheck::case_names().len();
    let mut out = Outcome::check(
        failures.is_empty() && opts.seeds.len() >= 5 && (opts.step - 1e-5).abs() < 1e-20,
        format!(
            "{cases} cases x {} seeds, step {:e}, worst relative error {worst:.2e} (< {:e}), min coordinates checked {min_checked}",
            opts.seeds.len(),
            opts.step,
            opts.tolerance
        ),
    );
    out.details = failures;
    out
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut sum_err: f64 = 0.0;
    let mut symmetric = true;
    let mut hf_const: f64 = 0.0;
    let mut lin_err: f64 = 0.0;
    for (sigma, size) in [(1.0, 3), (0.5, 3), (0.8, 5), (2.0, 7), (1.5, 9), (3.0, 11)] {
        let k = GaussianKernel::new(sigma, size).unwrap();
        sum_err = sum_err.max((k.weights().iter().sum::<f64>() - 1.0).abs());
        for i in 0..size {
            for j in 0..size {
                let w = k.weight(i, j);
                symmetric &= w == k.weight(j, i) && w == k.weight(size - 1 - i, j) && w == k.weight(i, size - 1 - j);
            }
        }
        for _ in 0..20 {
            let (c, h, w) = (rng.random_range(1..4), rng.random_range(1..12), rng.random_range(1..12));
            let value = rng.random_range(-100.0..100.0);
            let tape = Tape::no_grad();
            let hf = gaussian::high_freq(tape.constant(Tensor::full(&[1, c, h, w], value)), &k).unwrap();
            hf_const = hf.value().data().iter().fold(hf_const, |m, v| m.max(v.abs()));

            let shape = [2, c, h, w];
            let (x, y) = (random_tensor(&mut rng, &shape, 5.0), random_tensor(&mut rng, &shape, 5.0));
            let (a, b) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            let combo = Tensor::new(&shape, x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
            let s = |t: &Tensor| gaussian::smooth(tape.constant(t.clone()), &k).unwrap().value();
            let (sc, sx, sy) = (s(&combo), s(&x), s(&y));
            for i in 0..sc.numel() {
                lin_err = lin_err.max((sc.data()[i] - (a * sx.data()[i] + b * sy.data()[i])).abs());
            }
        }
    }
    Outcome::check(
        sum_err <= 1e-12 && symmetric && hf_const <= 1e-12 && lin_err <= 1e-10,
        format!(
            "kernel sum error {sum_err:.1e}, symmetric {symmetric}, |high_freq(const)| max {hf_const:.1e}, linearity error {lin_err:.1e}"
        ),
    )
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut range_ok = true;
    let mut between_ok = true;
    let mut refine_ok = true;
    let kernel = GaussianKernel::new(1.0, 3).unwrap();
    for _ in 0..1000 {
        let c = rng.random_range(2..5);
        let (h, w) = (rng.random_range(1..5), rng.random_range(1..5));
        let ch = rng.random_range(1..5);
        let mut set = ParamSet::new();
        afr::init_params(&mut set, c, &mut rng).unwrap();
        for p in set.iter_mut() {
            let scale = rng.random_range(0.1..4.0);
            let v = random_tensor(&mut rng, p.value().shape(), scale);
            p.set_value(v).unwrap();
        }
        let scale = rng.random_range(0.1..20.0);
        let tape = Tape::no_grad();
        let feats = tape.constant(random_tensor(&mut rng, &[1, ch, 2 * h, 2 * w], scale));
        let lr = tape.constant(random_tensor(&mut rng, &[1, c, h, w], scale));
        let aux = tape.constant(random_tensor(&mut rng, &[1, c, 2 * h, 2 * w], scale));
        let features = MultiScaleFeatures::new(vec![feats]).unwrap();
        let params = AfrParams::bind(&tape, &set).unwrap();
        let config = AfrConfig {
            kernel: kernel.clone(),
            ..AfrConfig::default()
        };
        let out = afr::afr_forward(&features, lr, aux, &params, &config).unwrap();
        let level = &out.levels[0];
        let a1 = level.a1.expect("cala enabled").value();
        let a2 = level.a2.expect("uhfa enabled").value();
        let af = level.a_final.value();
        let inside = |t: &Tensor| t.data().iter().all(|&v| v > 0.0 && v < 1.0);
        range_ok &= inside(&a1) && inside(&a2) && inside(&af);
        for i in 0..af.numel() {
            let (x, y, z) = (a1.data()[i], a2.data()[i], af.data()[i]);
            between_ok &= x.min(y) <= z && z <= x.max(y);
        }
        let f = feats.value();
        let refined = out.refined.levels()[0].value();
        for (&fv, &rv) in f.data().iter().zip(refined.data()) {
            refine_ok &= fv.abs() <= rv.abs() && rv.abs() <= 2.0 * fv.abs() && (fv == 0.0 || fv.signum() == rv.signum());
        }
    }
    Outcome::check(
        range_ok && between_ok && refine_ok,
        format!(
            "1000 random inputs: A1/A2/A_final in (0,1) {range_ok}, A_final between A1 and A2 {between_ok}, |f| <= |refined| <= 2|f| with sign {refine_ok}"
        ),
    )
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut notes = Vec::new();

    // EMA algebra
    let student = {
        let mut s = ParamSet::new();
        s.insert("w", random_tensor(&mut rng, &[3, 4], 1.0)).unwrap();
        s
    };
    let teacher0 = {
        let mut s = ParamSet::new();
        s.insert("w", random_tensor(&mut rng, &[3, 4], 1.0)).unwrap();
        s
    };
    let mut t = teacher0.clone();
    ema_update(&mut t, &student, 0.0).unwrap();
    let copy = same_params(&t, &student);
    let mut t = teacher0.clone();
    ema_update(&mut t, &student, 1.0).unwrap();
    let frozen = same_params(&t, &teacher0);
    let (mut one, mut zero) = (ParamSet::new(), ParamSet::new());
    one.insert("w", Tensor::full(&[2], 1.0)).unwrap();
    zero.insert("w", Tensor::full(&[2], 0.0)).unwrap();
    ema_update(&mut one, &zero, 0.9).unwrap();
    let nine = one.value("w").unwrap().data().iter().all(|&v| v == 0.9);
    let ema_ok = copy && frozen && nine;
    notes.push(format!("EMA alpha=0 copies {copy}, alpha=1 keeps {frozen}, alpha=0.9 gives 0.9 {nine}"));

    // pseudo-label quality against a direct count
    let tau = 0.968;
    let mut q_ok = true;
    for _ in 0..1000 {
        let (b, c, h, w) = (rng.random_range(1..4), rng.random_range(2..6), rng.random_range(1..6), rng.random_range(1..6));
        let scale = rng.random_range(0.5..12.0);
        let logits = random_tensor(&mut rng, &[b, c, h, w], scale);
        let got = pseudo_label_from_logits(&logits, tau).unwrap();
        let hw = h * w;
        for bi in 0..b {
            let mut count = 0;
            for p in 0..hw {
                let at = |k: usize| logits.data()[(bi * c + k) * hw + p];
                let max = (0..c).map(at).fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = (0..c).map(|k| (at(k) - max).exp()).sum();
                let best = (0..c).find(|&k| at(k) == max).unwrap();
                if 1.0 / denom > tau {
                    count += 1;
                }
                q_ok &= usize::from(got.labels.data()[bi * hw + p]) == best;
            }
            q_ok &= got.quality[bi] == count as f64 / hw as f64;
        }
    }
    notes.push(format!("q matches direct count on 1000 logit tensors {q_ok}"));

    // ClassMix origin consistency
    let mut mix_ok = true;
    for _ in 0..100 {
        let (h, w) = (rng.random_range(2..9), rng.random_range(2..9));
        let src = random_tensor(&mut rng, &[1, 3, h, w], 1.0);
        let tgt = random_tensor(&mut rng, &[1, 3, h, w], 1.0);
        let lab = |rng: &mut ChaCha8Rng, ignore: bool| {
            let data = (0..h * w)
                .map(|_| if ignore && rng.random_bool(0.1) { IGNORE_ID } else { rng.random_range(0..4) })
                .collect();
            ClassMap::new(1, h, w, data).unwrap()
        };
        let (src_label, tgt_label) = (lab(&mut rng, true), lab(&mut rng, false));
        let q = rng.random_range(0.0..1.0);
        let mix = classmix(&src, &src_label, &tgt, &tgt_label, q, &mut rng).unwrap();
        let present = train::present_classes(&src_label);
        let chosen: Vec<u8> = present
            .iter()
            .copied()
            .filter(|&k| (0..h * w).any(|p| mix.from_source[p] && src_label.data()[p] == k))
            .collect();
        mix_ok &= chosen.len() == present.len().div_ceil(2);
        let hw = h * w;
        for p in 0..hw {
            let from_src = chosen.contains(&src_label.data()[p]);
            mix_ok &= mix.from_source[p] == from_src;
            let (img, label, weight) = if from_src { (&src, src_label.data()[p], 1.0) } else { (&tgt, tgt_label.data()[p], q) };
            mix_ok &= (0..3).all(|ch| mix.image.data()[ch * hw + p].to_bits() == img.data()[ch * hw + p].to_bits());
            mix_ok &= mix.label.data()[p] == label && mix.weight.data()[p] == weight;
        }
    }
    notes.push(format!("ClassMix origin consistent on 100 mixes {mix_ok}"));

    // loss decomposition and teacher isolation
    let config = RunConfig {
        height: 16,
        width: 16,
        ..RunConfig::default()
    };
    let net = config.net_config().unwrap();
    let spec = config.scene_spec();
    let shift = config.domain_shift();
    let ctx = StepContext {
        config: &config,
        net: &net,
        fill: [0.4; 3],
    };
    let batch = |domain, start: u64| {
        let s: Vec<_> = (0..2).map(|i| synthdata::generate(&spec, &shift, domain, start + i).unwrap()).collect();
        synthdata::batch(&s).unwrap()
    };
    let mut state = TrainState::new(&net, 4).unwrap();
    let mut decomp_err: f64 = 0.0;
    let mut ema_exact = true;
    for step in 0..6u64 {
        let (si, sl) = batch(Domain::Source, 2 * step);
        let (ti, _) = batch(Domain::Target, 100 + 2 * step);
        let mut expected = state.teacher.clone();
        let alpha = ema_alpha(&config, state.iteration);
        let l = train_step(&mut state, &si, &sl, &ti, &ctx).unwrap();
        decomp_err = decomp_err.max((l.total - (l.l_s + l.l_t + l.l_m)).abs());
        ema_update(&mut expected, &state.student, alpha).unwrap();
        ema_exact &= same_params(&expected, &state.teacher);
    }
    let frozen_config = RunConfig {
        alpha_ema: 1.0,
        ema_warmup: false,
        ..config.clone()
    };
    let ctx = StepContext {
        config: &frozen_config,
        ..ctx
    };
    let mut state = TrainState::new(&net, 5).unwrap();
    let before = state.teacher.clone();
    let student_before = state.student.clone();
    for step in 0..6u64 {
        let (si, sl) = batch(Domain::Source, 2 * step);
        let (ti, _) = batch(Domain::Target, 100 + 2 * step);
        train_step(&mut state, &si, &sl, &ti, &ctx).unwrap();
    }
    let teacher_frozen = same_params(&before, &state.teacher) && !same_params(&student_before, &state.student);
    notes.push(format!(
        "|total - (L_S+L_T+L_M)| max {decomp_err:.1e}; teacher equals pure EMA of student {ema_exact}; teacher bitwise frozen at alpha=1 while student moves {teacher_frozen}"
    ));

    let ok = ema_ok && q_ok && mix_ok && decomp_err <= 1e-12 && ema_exact && teacher_frozen;
    let mut out = Outcome::check(ok, "EMA, pseudo-label quality, ClassMix, loss decomposition, frozen teacher".into());
    out.details = notes;
    out
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ok = true;
    for _ in 0..100 {
        let c = rng.random_range(2..7);
        let n = rng.random_range(1..200);
        let truth: Vec<u8> =
            (0..n).map(|_| if rng.random_bool(0.1) { IGNORE_ID } else { rng.random_range(0..c as u8) }).collect();
        let pred: Vec<u8> = (0..n).map(|_| rng.random_range(0..c as u8)).collect();
        let mut cm = ConfusionMatrix::new(c);
        cm.accumulate(&ClassMap::new(1, 1, n, pred.clone()).unwrap(), &ClassMap::new(1, 1, n, truth.clone()).unwrap(), IGNORE_ID)
            .unwrap();
        let mut ious = Vec::new();
        for k in 0..c as u8 {
            let (mut inter, mut union) = (0u64, 0u64);
            for (&t, &p) in truth.iter().zip(&pred) {
                if t == IGNORE_ID {
                    continue;
                }
                inter += u64::from(t == k && p == k);
                union += u64::from(t == k || p == k);
            }
            if union > 0 {
                ious.push(inter as f64 / union as f64);
            }
        }
        match cm.iou() {
            Ok(r) => ok &= !ious.is_empty() && r.miou == ious.iter().sum::<f64>() / ious.len() as f64,
            Err(_) => ok &= ious.is_empty(),
        }
    }
    let toy = ConfusionMatrix::from_counts(2, vec![3, 1, 1, 3]).unwrap().iou().unwrap().miou;
    Outcome::check(ok && toy == 0.6, format!("100 random pairs match per-pixel recount {ok}; toy matrix mIoU = {toy}"))
}

fn acceptance_config(seed: u64, dir: &Path) -> RunConfig {
    RunConfig {
        seed,
        // the teacher horizon 1/(1-alpha) kept at 1/40 of the run length
        alpha_ema: 0.98,
        eval_interval: 500,
        checkpoint_interval: 1000,
        dump_interval: 1000,
        out_dir: dir.to_path_buf(),
        ..RunConfig::default()
    }
}

fn tree_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

struct Run {
    miou: f64,
    thin_bar: Option<f64>,
    student: ParamSet,
}

fn train(config: &RunConfig) -> Run {
    let summary = train::train_loop(config).expect("training run");
    let last = summary.records.last().expect("final evaluation");
    Run {
        miou: last.report.miou,
        thin_bar: last.report.per_class[usize::from(THIN_BAR)],
        student: summary.state.student,
    }
}

fn criterion_6(root: &Path) -> (Outcome, Run) {
    let a = root.join("self_training_seed0");
    let b = root.join("self_training_seed0_again");
    let run = train(&acceptance_config(0, &a));
    train(&acceptance_config(0, &b));
    let (ta, tb) = (tree_bytes(&a), tree_bytes(&b));
    let names: Vec<String> = ta.iter().map(|(p, _)| p.display().to_string()).collect();
    let identical = ta == tb;
    let has_ckpt = names.iter().any(|n| n == "final.bin") && names.iter().any(|n| n == "metrics.log");
    let mut out = Outcome::check(
        identical && has_ckpt,
        format!("two seed-0 runs, {} output files byte-identical: {identical}", ta.len()),
    );
    out.details.push(format!("compared: {}", names.join(", ")));
    (out, run)
}

fn criterion_7(root: &Path) -> Outcome {
    let net = NetConfig::default();
    let mut state = TrainState::new(&net, 7).unwrap();
    state.iteration = 1234;
    let _: u64 = state.rng.random();
    let ckpt = state.to_checkpoint();
    let path = root.join("roundtrip.bin");
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let bytes = fs::read(&path).unwrap();
    let round_trip = loaded.encode().unwrap() == bytes
        && loaded.iteration == ckpt.iteration
        && loaded.rng == RngState::capture(&state.rng)
        && loaded.tensors.len() == ckpt.tensors.len()
        && loaded.tensors.iter().zip(&ckpt.tensors).all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape() && bits(ta) == bits(tb));
    let restored = TrainState::from_checkpoint(&loaded, &net).unwrap();
    let state_ok = same_params(&restored.student, &state.student)
        && same_params(&restored.teacher, &state.teacher)
        && same_params(&restored.velocity, &state.velocity)
        && restored.rng == state.rng;

    let structured = |b: &[u8]| matches!(Checkpoint::decode(b), Err(Error::CorruptCheckpoint { .. }));
    let field = |b: &[u8]| match Checkpoint::decode(b) {
        Err(Error::CorruptCheckpoint { field, .. }) => field,
        _ => String::new(),
    };
    let truncations = (0..bytes.len()).step_by(7).chain([bytes.len() - 1]).all(|n| structured(&bytes[..n]));
    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 0xff;
    let mut bad_version = bytes.clone();
    bad_version[4] = bad_version[4].wrapping_add(1);
    let mut trailing = bytes.clone();
    trailing.push(0);
    let headers = field(&bad_magic) == "magic" && field(&bad_version) == "version" && field(&trailing) == "trailer";
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut flips_ok = true;
    for _ in 0..300 {
        let mut b = bytes.clone();
        let i = rng.random_range(0..b.len());
        b[i] ^= 1 << rng.random_range(0..8);
        flips_ok &= match Checkpoint::decode(&b) {
            Ok(_) => true,
            Err(e) => matches!(e, Error::CorruptCheckpoint { .. }),
        };
    }
    let missing = matches!(Checkpoint::load(&root.join("absent.bin")), Err(Error::Io { .. }));

    let golden: &[u8] = b"P6\n1 1\n255\n\0\0\0";
    let ppm_path = root.join("black.ppm");
    pnm::write_image(&ppm_path, pnm::ImageData::Rgb(&Tensor::zeros(&[3, 1, 1]))).unwrap();
    let golden_ok = fs::read(&ppm_path).unwrap() == golden;

    Outcome::check(
        round_trip && state_ok && truncations && headers && flips_ok && missing && golden_ok,
        format!(
            "bitwise round trip {}, every truncation structured {truncations}, header fields named {headers}, bit flips never panic {flips_ok}, 1x1 PPM golden file ({} bytes) matches {golden_ok}",
            round_trip && state_ok,
            golden.len()
        ),
    )
}

fn constant_probes_unchanged(students: &[ParamSet], base: &NetConfig) -> (bool, bool) {
    let mut off = base.clone();
    off.afr.enable_hf_cala = false;
    off.afr.enable_hf_uhfa = false;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let logits = |params: &ParamSet, net: &NetConfig, image: &Tensor| {
        let tape = Tape::no_grad();
        segnet::forward(&tape, tape.constant(image.clone()), params, net).unwrap().final_logits.value()
    };
    let mut unchanged = true;
    let mut textured_differs = false;
    for params in students {
        for _ in 0..20 {
            let color: [f64; 3] = [rng.random(), rng.random(), rng.random()];
            let probe = Tensor::from_fn(&[1, 3, 32, 32], |i| color[i / 1024]);
            unchanged &= bits(&logits(params, base, &probe)) == bits(&logits(params, &off, &probe));
        }
        let textured = Tensor::from_fn(&[1, 3, 32, 32], |_| rng.random());
        textured_differs |= bits(&logits(params, base, &textured)) != bits(&logits(params, &off, &textured));
    }
    (unchanged, textured_differs)
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

fn main() {
    let root = tempfile::tempdir().expect("scratch directory");
    let root = root.path();
    let mut all_ok = true;

    let t = Instant::now();
    all_ok &= report(1, t, Some(Duration::from_secs(60)), criterion_1());
    let t = Instant::now();
    all_ok &= report(2, t, Some(Duration::from_secs(5)), criterion_2());
    let t = Instant::now();
    all_ok &= report(3, t, Some(Duration::from_secs(10)), criterion_3());
    let t = Instant::now();
    all_ok &= report(4, t, Some(Duration::from_secs(30)), criterion_4());
    let t = Instant::now();
    all_ok &= report(5, t, Some(Duration::from_secs(5)), criterion_5());

    // criterion 6 reuses its first run as seed 0 of criterion 8
    let t = Instant::now();
    let (c6, seed0) = criterion_6(root);
    let run_time = t.elapsed() / 2;
    all_ok &= report(6, t, Some(Duration::from_secs(2 * 15 * 60)), c6);

    let t = Instant::now();
    all_ok &= report(7, t, Some(Duration::from_secs(5)), criterion_7(root));

    let t = Instant::now();
    let mut self_training = vec![seed0];
    for &seed in &SEEDS[1..] {
        self_training.push(train(&acceptance_config(seed, &root.join(format!("self_training_seed{seed}")))));
    }
    let mut source_only = Vec::new();
    let mut afr_off = Vec::new();
    for &seed in &SEEDS {
        source_only.push(train(&RunConfig {
            enable_target_loss: false,
            enable_masked_loss: false,
            ..acceptance_config(seed, &root.join(format!("source_only_seed{seed}")))
        }));
        afr_off.push(train(&RunConfig {
            enable_afr: false,
            ..acceptance_config(seed, &root.join(format!("afr_off_seed{seed}")))
        }));
    }
    let miou = |runs: &[Run]| runs.iter().map(|r| r.miou).collect::<Vec<_>>();
    let (st, so, off) = (median(&miou(&self_training)), median(&miou(&source_only)), median(&miou(&afr_off)));
    let gain = 100.0 * (st - so);
    let afr_margin = 100.0 * (st - off);
    let students: Vec<ParamSet> = self_training.iter().map(|r| r.student.clone()).collect();
    let net = acceptance_config(0, root).net_config().unwrap();
    let (probes_ok, textured_differs) = constant_probes_unchanged(&students, &net);
    let a_ok = gain >= 5.0;
    let b_verdict = if afr_margin >= 0.0 {
        "holds"
    } else if afr_margin > -1.0 {
        "within 1 point, reported"
    } else {
        "violated"
    };
    let mut c8 = Outcome::check(
        a_ok && afr_margin > -1.0 && probes_ok,
        format!(
            "(a) median target mIoU self-training {} vs source-only {} (+{gain:.2}); (b) AFR on {} vs off {} (margin {afr_margin:+.2}, {b_verdict}); (c) HF terms leave 100 constant-colour probes unchanged {probes_ok}",
            pct(st),
            pct(so),
            pct(st),
            pct(off)
        ),
    );
    let row = |runs: &[Run]| runs.iter().map(|r| pct(r.miou)).collect::<Vec<_>>().join(" ");
    c8.details.push(format!("per seed {SEEDS:?}"));
    c8.details.push(format!("self-training: {}", row(&self_training)));
    c8.details.push(format!("source-only:   {}", row(&source_only)));
    c8.details.push(format!("AFR off:       {}", row(&afr_off)));
    c8.details.push(format!("HF terms change outputs on textured images: {textured_differs}"));
    c8.details.push(format!("single self-training run: {:.1}s", run_time.as_secs_f64()));
    all_ok &= report(8, t, Some(Duration::from_secs(15 * 60)), c8);

    let t = Instant::now();
    let mut hf_off = Vec::new();
    for &seed in &SEEDS {
        hf_off.push(train(&RunConfig {
            enable_hf_uhfa: false,
            ..acceptance_config(seed, &root.join(format!("hf_uhfa_off_seed{seed}")))
        }));
    }
    let bar = |r: &Run| r.thin_bar.map(pct).unwrap_or_else(|| "-".into());
    let bars = |runs: &[Run]| runs.iter().filter_map(|r| r.thin_bar).collect::<Vec<_>>();
    let (on_med, off_med) = (median(&bars(&self_training)), median(&bars(&hf_off)));
    let mut c9 = Outcome {
        verdict: Verdict::Reported,
        summary: format!(
            "thin-bar IoU median with HF-UHFA {} vs without {} ({:+.2} points)",
            pct(on_med),
            pct(off_med),
            100.0 * (on_med - off_med)
        ),
        details: vec![format!("{:<6} {:>12} {:>12}", "seed", "hf_uhfa on", "hf_uhfa off")],
    };
    for (i, &seed) in SEEDS.iter().enumerate() {
        c9.details.push(format!("{seed:<6} {:>12} {:>12}", bar(&self_training[i]), bar(&hf_off[i])));
    }
    c9.details.push(format!("{:<6} {:>12} {:>12}", "median", pct(on_med), pct(off_med)));
    all_ok &= report(9, t, None, c9);

    if !all_ok {
        std::process::exit(1);
    }
}
