use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{ClassMap, Tensor, IGNORE_ID};

/// One mixed training image with its labels and per-pixel loss weights.
#[derive(Clone, Debug, PartialEq)]
pub struct MixResult {
    /// 1×3×H×W.
    pub image: Tensor,
    pub label: ClassMap,
    /// 1×1×H×W: 1 on source pixels, the target quality on target pixels.
    pub weight: Tensor,
    /// True where the pixel came from the source image.
    pub from_source: Vec<bool>,
}

/// Sorted distinct class ids in `label`, without the ignore id.
pub fn present_classes(label: &ClassMap) -> Vec<u8> {
    let mut seen = [false; 256];
    for &l in label.data() {
        seen[usize::from(l)] = true;
    }
    seen[usize::from(IGNORE_ID)] = false;
    (0..=255u8).filter(|&c| seen[usize::from(c)]).collect()
}

/// Paste the pixels of a random half (rounded up) of the source classes onto
/// the target image.
pub fn classmix(
    src_image: &Tensor,
    src_label: &ClassMap,
    tgt_image: &Tensor,
    tgt_label: &ClassMap,
    tgt_quality: f64,
    rng: &mut impl Rng,
) -> Result<MixResult> {
    let classes = present_classes(src_label);
    let k = classes.len();
    let picked: Vec<u8> = index::sample(rng, k, k.div_ceil(2)).into_iter().map(|i| classes[i]).collect();
    classmix_with(src_image, src_label, tgt_image, tgt_label, tgt_quality, &picked)
}

/// ClassMix with an explicit set of source classes to paste.
pub fn classmix_with(
    src_image: &Tensor,
    src_label: &ClassMap,
    tgt_image: &Tensor,
    tgt_label: &ClassMap,
    tgt_quality: f64,
    chosen: &[u8],
) -> Result<MixResult> {
    let (sb, sc, h, w) = src_image.dims4()?;
    let (tb, tc, th, tw) = tgt_image.dims4()?;
    if (sb, tb) != (1, 1) || sc != tc || (h, w) != (th, tw) {
        return Err(Error::shape(
            "classmix",
            format!("source {:?} vs target {:?}", src_image.shape(), tgt_image.shape()),
        ));
    }
    if src_label.dims() != (1, h, w) || tgt_label.dims() != (1, h, w) {
        return Err(Error::shape("classmix", "label maps do not match the images"));
    }
    let mut take = [false; 256];
    for &c in chosen {
        take[usize::from(c)] = true;
    }
    let hw = h * w;
    let from_source: Vec<bool> = src_label.data().iter().map(|&l| take[usize::from(l)]).collect();
    let mut image = tgt_image.data().to_vec();
    for ch in 0..sc {
        for p in 0..hw {
            if from_source[p] {
                image[ch * hw + p] = src_image.data()[ch * hw + p];
            }
        }
    }
    let label = from_source
        .iter()
        .zip(src_label.data().iter().zip(tgt_label.data()))
        .map(|(&s, (&a, &b))| if s { a } else { b })
        .collect();
    let weight = from_source.iter().map(|&s| if s { 1.0 } else { tgt_quality }).collect();
    Ok(MixResult {
        image: Tensor::new(&[1, sc, h, w], image)?,
        label: ClassMap::new(1, h, w, label)?,
        weight: Tensor::new(&[1, 1, h, w], weight)?,
        from_source,
    })
}
