use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Grid of `patch`×`patch` cells, each either kept or dropped.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPattern {
    patch: usize,
    rows: usize,
    cols: usize,
    dropped: Vec<bool>,
}

impl MaskPattern {
    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_dropped(&self, row: usize, col: usize) -> bool {
        self.dropped[row * self.cols + col]
    }

    pub fn dropped_fraction(&self) -> f64 {
        self.dropped.iter().filter(|&&d| d).count() as f64 / self.dropped.len() as f64
    }

    /// Whether pixel `(y, x)` falls in a dropped cell.
    pub fn covers(&self, y: usize, x: usize) -> bool {
        self.is_dropped(y / self.patch, x / self.patch)
    }
}

/// Drop `r·cells` cells chosen uniformly, rounding the count up with
/// probability equal to the fractional part.
pub fn make_mask(h: usize, w: usize, patch: usize, ratio: f64, rng: &mut impl Rng) -> Result<MaskPattern> {
    if patch == 0 || !h.is_multiple_of(patch) || !w.is_multiple_of(patch) {
        return Err(Error::domain(
            "make_mask",
            format!("patch {patch} does not divide {h}×{w}"),
        ));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::domain("make_mask", format!("ratio {ratio} outside [0, 1]")));
    }
    let (rows, cols) = (h / patch, w / patch);
    let cells = rows * cols;
    let exact = ratio * cells as f64;
    let mut n = exact.floor() as usize;
    let frac = exact - exact.floor();
    if frac > 0.0 && rng.random_bool(frac) {
        n += 1;
    }
    let mut dropped = vec![false; cells];
    for i in index::sample(rng, cells, n.min(cells)) {
        dropped[i] = true;
    }
    Ok(MaskPattern {
        patch,
        rows,
        cols,
        dropped,
    })
}

/// Replace dropped cells with `fill` (one value per channel) in every image
/// of a B×C×H×W batch.
pub fn apply_mask(image: &Tensor, pattern: &MaskPattern, fill: &[f64]) -> Result<Tensor> {
    let (b, c, h, w) = image.dims4()?;
    if (h, w) != (pattern.rows * pattern.patch, pattern.cols * pattern.patch) {
        return Err(Error::shape(
            "apply_mask",
            format!("image {h}×{w} vs mask grid {:?} of {}", pattern.grid(), pattern.patch),
        ));
    }
    if fill.len() != c {
        return Err(Error::shape("apply_mask", format!("{} fill values for {c} channels", fill.len())));
    }
    let mut out = image.clone();
    let data = out.data_mut();
    for bi in 0..b {
        for (ch, &v) in fill.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    if pattern.covers(y, x) {
                        data[((bi * c + ch) * h + y) * w + x] = v;
                    }
                }
            }
        }
    }
    Ok(out)
}
