use crate::autodiff::ParamSet;
use crate::error::{Error, Result};

/// `teacher ← α·teacher + (1−α)·student` for every parameter.
pub fn ema_update(teacher: &mut ParamSet, student: &ParamSet, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::domain("ema_update", format!("alpha {alpha} outside [0, 1]")));
    }
    if !teacher.same_layout(student) {
        return Err(Error::shape("ema_update", "teacher and student layouts differ"));
    }
    let beta = 1.0 - alpha;
    for (t, s) in teacher.iter_mut().zip(student.iter()) {
        for (tv, &sv) in t.value_mut().iter_mut().zip(s.value().data()) {
            *tv = alpha * *tv + beta * sv;
        }
    }
    Ok(())
}
