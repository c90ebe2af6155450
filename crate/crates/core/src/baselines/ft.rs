use fewmark_autodiff::{grad, sgd_step, ParamSet, Rng, Tape, Tensor};

use crate::data::{Category, Sample};
use crate::error::Result;
use crate::meta::batch_loss;
use crate::model::{init_detector_rows, ModelConfig};

/// Fine-tuning schedule: joint SGD of the copied encoder and fresh detectors
/// on the support set.
#[derive(Clone, Copy, Debug)]
pub struct FtConfig {
    pub steps: usize,
    pub lr: f64,
}

impl FtConfig {
    pub fn standard() -> FtConfig {
        FtConfig { steps: 50, lr: 0.01 }
    }
}

/// Adapts to a support set by fine-tuning: copy the pretrained encoder, draw
/// fresh detector rows for the category's landmarks, and jointly SGD both on
/// the support loss. Returns the tuned encoder and detectors.
pub fn ft_adapt(
    cfg: &ModelConfig,
    base_encoder: &ParamSet,
    category: &Category,
    support: &[Sample],
    fc: &FtConfig,
    seed: u64,
) -> Result<(ParamSet, Tensor)> {
    let mut state = base_encoder.detached();
    state.insert(
        "detectors",
        init_detector_rows(
            category.landmark_count(),
            cfg.feat_dim,
            &mut Rng::derive(seed, &[1]),
        )?,
    )?;
    for _ in 0..fc.steps {
        let tape = Tape::new();
        let watched = tape.watch_params(&state);
        let detectors = watched.expect("detectors")?.clone();
        let loss = batch_loss(cfg, &watched, &detectors, support)?;
        let grads = grad(&loss, &watched, false)?;
        state = sgd_step(&state, &grads, fc.lr)?;
    }
    let mut encoder = ParamSet::new();
    let mut detectors = None;
    for (name, t) in state.iter() {
        if name == "detectors" {
            detectors = Some(t.clone());
        } else {
            encoder.insert(name, t.clone())?;
        }
    }
    Ok((encoder, detectors.expect("inserted above")))
}
