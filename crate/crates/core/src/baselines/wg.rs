use fewmark_autodiff::{ParamSet, Tensor};

use crate::data::{Labelmap, Sample};
use crate::error::Result;
use crate::meta::pooled_support_features;
use crate::model::{predict_detectors, ModelConfig};

/// Weight-generation adaptation: pool the support's landmark features under
/// the frozen encoder and map them straight to detector rows. No parameter is
/// tuned, so this is exactly the detector-prediction stage of the full method.
pub fn wg_adapt(
    cfg: &ModelConfig,
    encoder: &ParamSet,
    predictor: &ParamSet,
    support: &[Sample],
) -> Result<Tensor> {
    let labelmaps: Vec<Labelmap> = support.iter().map(|s| s.labelmap.clone()).collect();
    let features = pooled_support_features(cfg, encoder, support, &labelmaps)?;
    predict_detectors(predictor, &features)
}
