use crate::autodiff::{ops, ParamSet, Tape};
use crate::error::{Error, Result};
use crate::segnet::{self, NetConfig};
use crate::tensor::{ClassMap, Tensor};

/// Teacher labels for a target batch and, per image, the fraction of pixels
/// whose top softmax probability exceeds the threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelBatch {
    pub labels: ClassMap,
    pub quality: Vec<f64>,
}

impl PseudoLabelBatch {
    pub fn mean_quality(&self) -> f64 {
        self.quality.iter().sum::<f64>() / self.quality.len() as f64
    }
}

/// Labels and quality from already computed logits (B×C×H×W).
pub fn pseudo_label_from_logits(logits: &Tensor, tau: f64) -> Result<PseudoLabelBatch> {
    let (b, c, h, w) = logits.dims4()?;
    if c < 2 {
        return Err(Error::domain("pseudo_label", "need at least 2 classes"));
    }
    let hw = h * w;
    let probs = ops::softmax_values(logits, b, c, hw);
    let labels = segnet::argmax_map(logits)?;
    let quality = (0..b)
        .map(|bi| {
            let confident = (0..hw)
                .filter(|&p| {
                    let k = usize::from(labels.data()[bi * hw + p]);
                    probs.data()[(bi * c + k) * hw + p] > tau
                })
                .count();
            confident as f64 / hw as f64
        })
        .collect();
    Ok(PseudoLabelBatch { labels, quality })
}

/// Run the teacher without recording gradients and derive pseudo labels.
pub fn pseudo_label(images: &Tensor, teacher: &ParamSet, config: &NetConfig, tau: f64) -> Result<PseudoLabelBatch> {
    let tape = Tape::no_grad();
    let out = segnet::forward(&tape, tape.constant(images.clone()), teacher, config)?;
    let logits = out.final_logits.value();
    pseudo_label_from_logits(&logits, tau)
}
