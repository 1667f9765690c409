use crate::autodiff::ParamSet;
use crate::error::{Error, Result};

/// SGD with heavy-ball momentum: `v ← μ·v + g`, `θ ← θ − lr·v`.
///
/// `velocity` must mirror the layout of `params`.
pub fn sgd_step(params: &mut ParamSet, velocity: &mut ParamSet, lr: f64, momentum: f64) -> Result<()> {
    if !params.same_layout(velocity) {
        return Err(Error::shape("sgd_step", "velocity layout differs from parameters"));
    }
    for (p, v) in params.iter_mut().zip(velocity.iter_mut()) {
        let (x, g) = p.value_mut_and_grad();
        for ((xi, &gi), vi) in x.iter_mut().zip(g).zip(v.value_mut()) {
            *vi = momentum * *vi + gi;
            *xi -= lr * *vi;
        }
    }
    Ok(())
}
