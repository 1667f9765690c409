//! Procedural two-domain segmentation scenes.
//!
//! A scene is a textured background with 1–4 coloured shapes painted on top:
//! disks, rectangles and thin bars (1–3 px wide). Scene content depends only
//! on `(seed, index)`; the target domain re-renders the same scene through a
//! hue rotation, a brightness change, horizontal stripes and Gaussian noise.
//!
//! Disks and thin bars share a hue family and differ only in shape;
//! rectangles sit on the opposite side of the hue circle. The default hue
//! rotation moves every class towards a region no source class occupies, so
//! a source-only model mostly loses foreground to background rather than
//! swapping classes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{ClassMap, Tensor};

pub const BACKGROUND: u8 = 0;
pub const DISK: u8 = 1;
pub const RECTANGLE: u8 = 2;
pub const THIN_BAR: u8 = 3;

pub const CLASS_NAMES: [&str; 4] = ["background", "disk", "rectangle", "thin-bar"];

/// Base hue of each class in the source domain (index 0 is unused).
const CLASS_HUES: [f64; 4] = [0.0, 0.0, 0.5, 0.0];

/// Half-width of the per-object hue jitter around the class hue.
const HUE_JITTER: f64 = 0.12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// 2–4; classes beyond `num_classes` are never drawn.
    pub num_classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 32,
            width: 32,
            num_classes: 4,
            min_shapes: 1,
            max_shapes: 4,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.num_classes) {
            return Err(Error::domain(
                "SceneSpec",
                format!("num_classes must be in 2..=4, got {}", self.num_classes),
            ));
        }
        if self.height < 4 || self.width < 4 {
            return Err(Error::domain("SceneSpec", "images must be at least 4×4"));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(Error::domain(
                "SceneSpec",
                format!(
                    "shape count range {}..={} is empty or starts at 0",
                    self.min_shapes, self.max_shapes
                ),
            ));
        }
        Ok(())
    }
}

/// Appearance change applied to target-domain images only.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainShift {
    /// Hue rotation, in turns.
    pub hue_offset: f64,
    pub brightness: f64,
    pub noise_sigma: f64,
    pub stripe_amplitude: f64,
}

impl Default for DomainShift {
    fn default() -> Self {
        DomainShift {
            hue_offset: 0.15,
            brightness: 0.8,
            noise_sigma: 0.05,
            stripe_amplitude: 0.05,
        }
    }
}

const STRIPE_PERIOD: f64 = 6.0;

/// One generated image (3×H×W, values in [0, 1]) and its label (1×H×W).
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub label: ClassMap,
}

#[derive(Clone, Copy)]
struct Hsv {
    h: f64,
    s: f64,
    v: f64,
}

fn hsv_to_rgb(c: Hsv) -> [f64; 3] {
    let h = c.h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (s, v) = (c.s, c.v);
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn rgb_to_hsv([r, g, b]: [f64; 3]) -> Hsv {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    Hsv { h, s, v: max }
}

enum Shape {
    Disk { cy: f64, cx: f64, r: f64 },
    Rect { y0: usize, x0: usize, y1: usize, x1: usize },
}

impl Shape {
    fn covers(&self, y: usize, x: usize) -> bool {
        match *self {
            Shape::Disk { cy, cx, r } => {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                dy * dy + dx * dx <= r * r
            }
            Shape::Rect { y0, x0, y1, x1 } => (y0..y1).contains(&y) && (x0..x1).contains(&x),
        }
    }
}

struct Object {
    class: u8,
    shape: Shape,
    color: Hsv,
}

fn random_object(spec: &SceneSpec, class: u8, rng: &mut ChaCha8Rng) -> Object {
    let (h, w) = (spec.height, spec.width);
    let short = h.min(w) as f64;
    let color = Hsv {
        h: CLASS_HUES[usize::from(class)] + rng.random_range(-HUE_JITTER..HUE_JITTER),
        s: rng.random_range(0.55..0.85),
        v: rng.random_range(0.55..0.85),
    };
    let shape = match class {
        DISK => Shape::Disk {
            cy: rng.random_range(0.0..h as f64),
            cx: rng.random_range(0.0..w as f64),
            r: rng.random_range(short * 0.1..short * 0.25),
        },
        RECTANGLE => {
            let rh = rng.random_range((h / 6).max(2)..=(h / 2).max(2));
            let rw = rng.random_range((w / 6).max(2)..=(w / 2).max(2));
            let y0 = rng.random_range(0..=h - rh);
            let x0 = rng.random_range(0..=w - rw);
            Shape::Rect { y0, x0, y1: y0 + rh, x1: x0 + rw }
        }
        _ => {
            let thickness = rng.random_range(1..=3);
            let vertical = rng.random_bool(0.5);
            let (along, across) = if vertical { (h, w) } else { (w, h) };
            let len = rng.random_range((along * 3 / 8).max(1)..=(along * 7 / 8).max(1));
            let start = rng.random_range(0..=along - len);
            let off = rng.random_range(0..=across - thickness);
            if vertical {
                Shape::Rect { y0: start, x0: off, y1: start + len, x1: off + thickness }
            } else {
                Shape::Rect { y0: off, x0: start, y1: off + thickness, x1: start + len }
            }
        }
    };
    Object { class, shape, color }
}

fn content_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_mul(2));
    rng
}

fn noise_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_mul(2).wrapping_add(1));
    rng
}

/// Deterministically render image `index` of `domain`.
pub fn generate(spec: &SceneSpec, shift: &DomainShift, domain: Domain, index: u64) -> Result<Sample> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = content_rng(spec.seed, index);

    let background = Hsv {
        h: rng.random_range(0.0..1.0),
        s: rng.random_range(0.0..0.15),
        v: rng.random_range(0.35..0.6),
    };
    let texture_phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let texture_freq: f64 = rng.random_range(0.2..0.6);

    let n_shapes = rng.random_range(spec.min_shapes..=spec.max_shapes);
    let foreground = (spec.num_classes - 1) as u8;
    let mut objects: Vec<Object> = (0..n_shapes)
        .map(|_| {
            let class = rng.random_range(1..=foreground);
            random_object(spec, class, &mut rng)
        })
        .collect();
    // 4 of every 10 consecutive indices carry a thin bar painted last
    if spec.num_classes > usize::from(THIN_BAR) && index % 10 < 4 {
        objects.push(random_object(spec, THIN_BAR, &mut rng));
    }

    let mut labels = vec![BACKGROUND; h * w];
    let mut pixels = vec![[0.0; 3]; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut color = background;
            color.v += 0.06 * ((x as f64 + y as f64 * 0.5) * texture_freq + texture_phase).sin();
            let mut class = BACKGROUND;
            for obj in &objects {
                if obj.shape.covers(y, x) {
                    class = obj.class;
                    color = obj.color;
                }
            }
            labels[y * w + x] = class;
            pixels[y * w + x] = hsv_to_rgb(color);
        }
    }

    if domain == Domain::Target {
        let mut noise = noise_rng(spec.seed, index);
        for y in 0..h {
            let stripe = shift.stripe_amplitude * (std::f64::consts::TAU * y as f64 / STRIPE_PERIOD).sin();
            for x in 0..w {
                let mut hsv = rgb_to_hsv(pixels[y * w + x]);
                hsv.h += shift.hue_offset;
                let rgb = hsv_to_rgb(hsv);
                let px = &mut pixels[y * w + x];
                for (c, v) in rgb.into_iter().enumerate() {
                    let n: f64 = StandardNormal.sample(&mut noise);
                    px[c] = v * shift.brightness + stripe + shift.noise_sigma * n;
                }
            }
        }
    }

    let mut data = vec![0.0; 3 * h * w];
    for (p, px) in pixels.iter().enumerate() {
        for c in 0..3 {
            data[c * h * w + p] = px[c].clamp(0.0, 1.0);
        }
    }
    Ok(Sample {
        image: Tensor::new(&[3, h, w], data)?,
        label: ClassMap::new(1, h, w, labels)?,
    })
}

/// Per-channel mean colour over the first `n` images of `domain`.
pub fn dataset_mean(spec: &SceneSpec, shift: &DomainShift, domain: Domain, n: usize) -> Result<[f64; 3]> {
    if n == 0 {
        return Err(Error::domain("dataset_mean", "need at least one image"));
    }
    let mut sums = [0.0; 3];
    let mut count = 0usize;
    for i in 0..n as u64 {
        let s = generate(spec, shift, domain, i)?;
        let hw = spec.height * spec.width;
        for (c, sum) in sums.iter_mut().enumerate() {
            *sum += s.image.data()[c * hw..(c + 1) * hw].iter().sum::<f64>();
        }
        count += hw;
    }
    Ok(sums.map(|s| s / count as f64))
}

/// Stack samples into a B×3×H×W image tensor and a B×H×W label map.
pub fn batch(samples: &[Sample]) -> Result<(Tensor, ClassMap)> {
    let images: Vec<Tensor> = samples
        .iter()
        .map(|s| {
            let mut shape = vec![1];
            shape.extend_from_slice(s.image.shape());
            s.image.clone().reshape(&shape)
        })
        .collect::<Result<_>>()?;
    let labels: Vec<ClassMap> = samples.iter().map(|s| s.label.clone()).collect();
    Ok((Tensor::stack(&images)?, ClassMap::stack(&labels)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let spec = SceneSpec::default();
        let shift = DomainShift::default();
        for domain in [Domain::Source, Domain::Target] {
            let a = generate(&spec, &shift, domain, 17).unwrap();
            let b = generate(&spec, &shift, domain, 17).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn shift_changes_images_not_labels() {
        let spec = SceneSpec::default();
        let shift = DomainShift::default();
        for i in 0..10 {
            let s = generate(&spec, &shift, Domain::Source, i).unwrap();
            let t = generate(&spec, &shift, Domain::Target, i).unwrap();
            assert_eq!(s.label, t.label);
            assert_ne!(s.image, t.image);
        }
    }

    #[test]
    fn all_classes_appear_and_labels_are_valid() {
        let spec = SceneSpec::default();
        let shift = DomainShift::default();
        let mut hist = [0usize; 4];
        let mut with_bar = 0;
        for i in 0..100 {
            let s = generate(&spec, &shift, Domain::Source, i).unwrap();
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            let mut has_bar = false;
            for &l in s.label.data() {
                assert!(l < 4);
                hist[usize::from(l)] += 1;
                has_bar |= l == THIN_BAR;
            }
            with_bar += usize::from(has_bar);
        }
        assert!(hist.iter().all(|&n| n > 0), "{hist:?}");
        assert!(with_bar >= 30, "{with_bar}");
    }

    #[test]
    fn fewer_classes_restrict_labels() {
        let spec = SceneSpec { num_classes: 2, ..SceneSpec::default() };
        for i in 0..20 {
            let s = generate(&spec, &DomainShift::default(), Domain::Source, i).unwrap();
            assert!(s.label.data().iter().all(|&l| l < 2));
        }
    }

    #[test]
    fn target_noise_has_configured_sigma() {
        let spec = SceneSpec::default();
        let shift = DomainShift::default();
        let quiet = DomainShift { noise_sigma: 0.0, ..shift.clone() };
        let mut diffs = Vec::new();
        for i in 0..10 {
            let noisy = generate(&spec, &shift, Domain::Target, i).unwrap();
            let clean = generate(&spec, &quiet, Domain::Target, i).unwrap();
            for (a, b) in noisy.image.data().iter().zip(clean.image.data()) {
                if *a > 0.0 && *a < 1.0 && *b > 0.0 && *b < 1.0 {
                    diffs.push(a - b);
                }
            }
        }
        assert!(diffs.len() >= 10_000);
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((sd - 0.05).abs() <= 0.05 * 0.05, "sd = {sd}");
    }

    #[test]
    fn dataset_mean_examples() {
        let spec = SceneSpec::default();
        let shift = DomainShift::default();
        let s = generate(&spec, &shift, Domain::Source, 0).unwrap();
        let hw = 32 * 32;
        let mean = dataset_mean(&spec, &shift, Domain::Source, 1).unwrap();
        for c in 0..3 {
            let direct = s.image.data()[c * hw..(c + 1) * hw].iter().sum::<f64>() / hw as f64;
            assert!((mean[c] - direct).abs() < 1e-15);
        }
        let m = dataset_mean(&spec, &shift, Domain::Target, 20).unwrap();
        assert!(m.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(dataset_mean(&spec, &shift, Domain::Source, 0).is_err());
    }

    #[test]
    fn black_scene_has_zero_mean() {
        // brightness 0 and no stripes/noise renders every target pixel black
        let black = DomainShift {
            hue_offset: 0.0,
            brightness: 0.0,
            noise_sigma: 0.0,
            stripe_amplitude: 0.0,
        };
        let m = dataset_mean(&SceneSpec::default(), &black, Domain::Target, 3).unwrap();
        assert_eq!(m, [0.0; 3]);
    }

    #[test]
    fn hsv_round_trip() {
        for &rgb in &[[0.2, 0.5, 0.7], [0.9, 0.1, 0.1], [0.3, 0.3, 0.3], [0.0, 1.0, 0.5]] {
            let back = hsv_to_rgb(rgb_to_hsv(rgb));
            for c in 0..3 {
                assert!((back[c] - rgb[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batching_stacks_samples() {
        let spec = SceneSpec::default();
        let shift = DomainShift::default();
        let samples: Vec<Sample> = (0..3)
            .map(|i| generate(&spec, &shift, Domain::Source, i).unwrap())
            .collect();
        let (img, lbl) = batch(&samples).unwrap();
        assert_eq!(img.shape(), &[3, 3, 32, 32]);
        assert_eq!(lbl.dims(), (3, 32, 32));
        assert_eq!(lbl.batch_item(2), samples[2].label);
    }
}
