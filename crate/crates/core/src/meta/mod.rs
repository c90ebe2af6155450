//! Training procedures: base supervised pretraining, detector-predictor
//! training, episodic meta-training, and test-time adaptation.

mod adapt;
mod base;
mod ppnet;
mod train;

pub use adapt::{meta_adapt, meta_predict, AdaptReport, AdaptedTask};
pub use base::{
    category_blocks, make_labelmaps, train_base, BaseModel, BaseTrainConfig, Block,
    LabelmapSource,
};
pub use ppnet::train_predictor;
pub use train::{meta_train, task_outer_gradient, MetaConfig, MetaVariant, Order, TaskData};

pub(crate) use train::{batch_loss, halfway_lr, pooled_support_features};

use std::path::Path;

use fewmark_autodiff::ParamSet;

use crate::data::Registry;
use crate::error::Result;
use crate::model::{load_paramset, save_paramset};

/// Everything evaluation needs: the frozen base model, the trained detector
/// predictor, and the meta-trained encoder initialization.
#[derive(Clone, Debug)]
pub struct TrainedStack {
    pub base: BaseModel,
    pub predictor: ParamSet,
    pub theta: ParamSet,
}

impl TrainedStack {
    /// Writes `base.fmps`, `predictor.fmps`, and `theta.fmps` under `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        self.base.save(&dir.join("base.fmps"))?;
        save_paramset(&dir.join("predictor.fmps"), &self.predictor)?;
        save_paramset(&dir.join("theta.fmps"), &self.theta)
    }

    pub fn load_dir(dir: &Path, registry: &Registry) -> Result<TrainedStack> {
        Ok(TrainedStack {
            base: BaseModel::load(&dir.join("base.fmps"), registry)?,
            predictor: load_paramset(&dir.join("predictor.fmps"))?,
            theta: load_paramset(&dir.join("theta.fmps"))?,
        })
    }
}
