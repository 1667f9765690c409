use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::ParamSet;
use crate::checkpoint::{Checkpoint, RngState};
use crate::error::{Error, Result};
use crate::segnet::{self, NetConfig};

const STUDENT: &str = "student.";
const TEACHER: &str = "teacher.";
const MOMENTUM: &str = "momentum.";

/// Student, EMA teacher, optimizer buffers, step count and the sampling RNG.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub student: ParamSet,
    pub teacher: ParamSet,
    pub velocity: ParamSet,
    pub iteration: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    /// Fresh state: the teacher starts as a copy of the student.
    pub fn new(net: &NetConfig, seed: u64) -> Result<Self> {
        let mut init = ChaCha8Rng::seed_from_u64(seed);
        let student = segnet::init_params(net, &mut init)?;
        let mut velocity = ParamSet::new();
        for p in student.iter() {
            velocity.insert(p.name(), p.value().zeros_like())?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Ok(TrainState {
            teacher: student.clone(),
            student,
            velocity,
            iteration: 0,
            rng,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = Vec::with_capacity(3 * self.student.len());
        for (prefix, set) in [(STUDENT, &self.student), (TEACHER, &self.teacher), (MOMENTUM, &self.velocity)] {
            for p in set.iter() {
                tensors.push((format!("{prefix}{}", p.name()), p.value().clone()));
            }
        }
        Checkpoint {
            tensors,
            iteration: self.iteration,
            rng: RngState::capture(&self.rng),
        }
    }

    /// Rebuild a state, checking every tensor against the layout `net` implies.
    pub fn from_checkpoint(ckpt: &Checkpoint, net: &NetConfig) -> Result<Self> {
        let template = segnet::init_params(net, &mut ChaCha8Rng::seed_from_u64(0))?;
        let expected = 3 * template.len();
        if ckpt.tensors.len() != expected {
            return Err(Error::corrupt(
                "count",
                format!("{} tensors, configuration needs {expected}", ckpt.tensors.len()),
            ));
        }
        let mut sets = [ParamSet::new(), ParamSet::new(), ParamSet::new()];
        for (set, prefix) in sets.iter_mut().zip([STUDENT, TEACHER, MOMENTUM]) {
            for p in template.iter() {
                let name = format!("{prefix}{}", p.name());
                let t = ckpt
                    .tensor(&name)
                    .ok_or_else(|| Error::corrupt(name.clone(), "missing tensor"))?;
                if t.shape() != p.value().shape() {
                    return Err(Error::corrupt(
                        format!("{name}.dims"),
                        format!("shape {:?}, expected {:?}", t.shape(), p.value().shape()),
                    ));
                }
                set.insert(p.name(), t.clone())?;
            }
        }
        let [student, teacher, velocity] = sets;
        Ok(TrainState {
            student,
            teacher,
            velocity,
            iteration: ckpt.iteration,
            rng: ckpt.rng.restore(),
        })
    }

    /// Student parameters only, from a checkpoint written by [`Self::to_checkpoint`].
    pub fn student_from_checkpoint(ckpt: &Checkpoint, net: &NetConfig) -> Result<ParamSet> {
        Ok(Self::from_checkpoint(ckpt, net)?.student)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small() -> NetConfig {
        NetConfig {
            lr_width: 3,
            hr_width: 4,
            ..NetConfig::default()
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_everything() {
        let mut s = TrainState::new(&small(), 5).unwrap();
        let _: u64 = s.rng.random();
        s.iteration = 17;
        let back = TrainState::from_checkpoint(&Checkpoint::decode(&s.to_checkpoint().encode().unwrap()).unwrap(), &small()).unwrap();
        assert_eq!(back.student, s.student);
        assert_eq!(back.teacher, s.teacher);
        assert_eq!(back.velocity, s.velocity);
        assert_eq!(back.iteration, 17);
        assert_eq!(back.rng, s.rng);
    }

    #[test]
    fn layout_mismatch_names_the_tensor() {
        let s = TrainState::new(&small(), 5).unwrap();
        let ck = s.to_checkpoint();
        let wider = NetConfig { hr_width: 5, ..small() };
        match TrainState::from_checkpoint(&ck, &wider) {
            Err(Error::CorruptCheckpoint { field, .. }) => assert!(field.starts_with("student.hr."), "{field}"),
            other => panic!("{other:?}"),
        }
        let mut missing = ck.clone();
        missing.tensors.pop();
        assert!(matches!(TrainState::from_checkpoint(&missing, &small()), Err(Error::CorruptCheckpoint { .. })));
    }

    #[test]
    fn same_seed_same_state() {
        let a = TrainState::new(&small(), 3).unwrap();
        let b = TrainState::new(&small(), 3).unwrap();
        assert_eq!(a.to_checkpoint().encode().unwrap(), b.to_checkpoint().encode().unwrap());
        let c = TrainState::new(&small(), 4).unwrap();
        assert_ne!(a.student, c.student);
    }
}
