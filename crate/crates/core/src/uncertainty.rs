//! Per-pixel uncertainty as the complement of the top softmax probability.

use crate::autodiff::{ops, Var};
use crate::error::{Error, Result};

/// B×1×H×W map with values in `[0, 1 − 1/C]`.
#[derive(Clone, Copy, Debug)]
pub struct UncertaintyMap<'t> {
    values: Var<'t>,
}

impl<'t> UncertaintyMap<'t> {
    /// Wrap an existing single-channel map (e.g. after resizing).
    pub fn from_var(values: Var<'t>) -> Result<Self> {
        match values.shape()[..] {
            [_, 1, _, _] => Ok(UncertaintyMap { values }),
            ref s => Err(Error::shape(
                "UncertaintyMap",
                format!("expected B×1×H×W, got {s:?}"),
            )),
        }
    }

    pub fn var(&self) -> Var<'t> {
        self.values
    }

    pub fn detach(&self) -> Self {
        UncertaintyMap {
            values: self.values.detach(),
        }
    }

    pub fn resized(&self, h: usize, w: usize) -> Result<Self> {
        Ok(UncertaintyMap {
            values: ops::resize_bilinear(self.values, h, w)?,
        })
    }
}

/// `U = 1 − max_c softmax(logits)_c` per pixel.
pub fn uncertainty_from_logits(logits: Var<'_>) -> Result<UncertaintyMap<'_>> {
    let (_, c, _, _) = logits.value().dims4()?;
    if c < 2 {
        return Err(Error::domain(
            "uncertainty_from_logits",
            format!("need at least 2 classes, got {c}"),
        ));
    }
    let probs = ops::softmax_channels(logits)?;
    let top = ops::channel_max(probs)?;
    let values = ops::add_scalar(ops::scale(top, -1.0), 1.0);
    Ok(UncertaintyMap { values })
}

/// U_HR, taken from the HR branch's auxiliary classification head.
pub fn hr_uncertainty_source(hr_logits_head: Var<'_>) -> Result<UncertaintyMap<'_>> {
    uncertainty_from_logits(hr_logits_head)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        let tape = Tape::no_grad();
        let confident = Tensor::from_fn(&[1, 3, 2, 2], |i| if i < 4 { 50.0 } else { -50.0 });
        let u = uncertainty_from_logits(tape.constant(confident)).unwrap();
        assert!(u.var().value().data().iter().all(|&v| v.abs() < 1e-40));

        let uniform = tape.constant(Tensor::full(&[2, 4, 3, 3], 1.3));
        let u = uncertainty_from_logits(uniform).unwrap().var().value();
        assert_eq!(u.shape(), &[2, 1, 3, 3]);
        assert!(u.data().iter().all(|&v| (v - 0.75).abs() < 1e-15));

        let two = tape.constant(Tensor::new(&[1, 2, 1, 1], vec![0.0, 3f64.ln()]).unwrap());
        let u = uncertainty_from_logits(two).unwrap().var().value();
        assert!((u.item() - 0.25).abs() < 1e-15);

        let one = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(matches!(uncertainty_from_logits(one), Err(Error::Domain { .. })));
    }

    #[test]
    fn hr_source_delegates() {
        let tape = Tape::no_grad();
        let x = tape.constant(Tensor::from_fn(&[1, 4, 3, 2], |i| (i as f64 * 0.9).sin()));
        let a = uncertainty_from_logits(x).unwrap().var().value();
        let b = hr_uncertainty_source(x).unwrap().var().value();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn range_and_shape(c in 2usize..6, data in proptest::collection::vec(-20.0f64..20.0, 6 * 12)) {
            let tape = Tape::no_grad();
            let logits = Tensor::new(&[1, c, 3, 4], data[..c * 12].to_vec()).unwrap();
            let u = uncertainty_from_logits(tape.constant(logits)).unwrap().var().value();
            prop_assert_eq!(u.shape(), &[1, 1, 3, 4]);
            let hi = 1.0 - 1.0 / c as f64;
            prop_assert!(u.data().iter().all(|&v| v >= 0.0 && v <= hi + 1e-15));
        }

        #[test]
        fn raising_the_winner_never_raises_uncertainty(
            data in proptest::collection::vec(-5.0f64..5.0, 4),
            bump in 0.0f64..10.0,
        ) {
            let tape = Tape::no_grad();
            let win = (0..4).fold(0, |b, k| if data[k] > data[b] { k } else { b });
            let mut raised = data.clone();
            raised[win] += bump;
            let u0 = uncertainty_from_logits(tape.constant(Tensor::new(&[1, 4, 1, 1], data).unwrap()))
                .unwrap().var().value().item();
            let u1 = uncertainty_from_logits(tape.constant(Tensor::new(&[1, 4, 1, 1], raised).unwrap()))
                .unwrap().var().value().item();
            prop_assert!(u1 <= u0 + 1e-15);
        }
    }
}
