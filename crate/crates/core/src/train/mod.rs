//! Self-training domain adaptation: EMA teacher, confidence-weighted pseudo
//! labels, ClassMix, masked consistency and the training loop.

mod classmix;
mod ema;
mod mask;
mod optim;
mod pseudo;
mod run;
mod state;
mod step;

pub use classmix::{classmix, classmix_with, present_classes, MixResult};
pub use ema::ema_update;
pub use mask::{apply_mask, make_mask, MaskPattern};
pub use optim::sgd_step;
pub use pseudo::{pseudo_label, pseudo_label_from_logits, PseudoLabelBatch};
pub use run::{
    dump_attention, eval_samples, evaluate, format_g6, train_loop, EvalRecord, RunSummary, EVAL_OFFSET,
    TARGET_OFFSET,
};
pub use state::TrainState;
pub use step::{ema_alpha, train_step, StepContext, StepLosses};
