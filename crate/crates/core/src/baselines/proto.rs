use fewmark_autodiff::{ParamSet, Tensor};

use crate::data::{Labelmap, Sample};
use crate::error::{Error, Result};
use crate::meta::pooled_support_features;
use crate::model::{detect, encode, ModelConfig};

/// Nearest-prototype adaptation: each landmark's prototype is its support
/// feature vector averaged over the support set. Nothing is trained.
pub fn proto_adapt(
    cfg: &ModelConfig,
    encoder: &ParamSet,
    support: &[Sample],
) -> Result<Tensor> {
    let labelmaps: Vec<Labelmap> = support.iter().map(|s| s.labelmap.clone()).collect();
    pooled_support_features(cfg, encoder, support, &labelmaps)
}

/// Scores every grid cell against every prototype with negative squared
/// Euclidean distance in feature space.
pub fn proto_scores(features: &Tensor, prototypes: &Tensor) -> Result<Tensor> {
    if features.rank() != 3 || prototypes.rank() != 2 || features.dims()[0] != prototypes.dims()[1]
    {
        return Err(Error::data(format!(
            "proto_scores: features {:?} vs prototypes {:?}",
            features.dims(),
            prototypes.dims()
        )));
    }
    let (d, h, w) = (features.dims()[0], features.dims()[1], features.dims()[2]);
    let n = prototypes.dims()[0];
    let f = features.data();
    let p = prototypes.data();
    let mut scores = vec![0.0; n * h * w];
    for ni in 0..n {
        for cell in 0..h * w {
            let mut dist = 0.0;
            for di in 0..d {
                let delta = f[di * h * w + cell] - p[ni * d + di];
                dist += delta * delta;
            }
            scores[ni * h * w + cell] = -dist;
        }
    }
    Tensor::from_vec(&[n, h, w], scores).map_err(Error::from)
}

/// Pure prediction: score the query's feature grid against the prototypes and
/// decode each channel's best cell to pixel coordinates.
pub fn proto_predict(
    cfg: &ModelConfig,
    encoder: &ParamSet,
    prototypes: &Tensor,
    image: &Tensor,
) -> Result<(Tensor, Vec<(f64, f64)>)> {
    let features = encode(cfg, encoder, image)?;
    let scores = proto_scores(&features, prototypes)?;
    let coords = detect(&scores, &cfg.geom)?;
    Ok((scores, coords))
}
