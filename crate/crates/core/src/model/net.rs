use fewmark_autodiff::{ops, randn_init, ParamSet, Rng, Tensor};

use crate::data::{Geometry, Labelmap};
use crate::error::{Error, Result};
use crate::model::config::ModelConfig;

/// Fresh encoder parameters: one 3x3 conv layer per configured channel count,
/// weights drawn at `N(0, 2/fan_in)`, biases zero.
pub fn init_encoder(cfg: &ModelConfig, rng: &mut Rng) -> Result<ParamSet> {
    cfg.validate()?;
    let mut params = ParamSet::new();
    let mut c_in = 1usize;
    for (i, &c_out) in cfg.conv_channels.iter().enumerate() {
        let fan_in = c_in * 9;
        params.insert(
            &format!("conv{i}.weight"),
            randn_init(&[c_out, c_in, 3, 3], fan_in, rng)?,
        )?;
        params.insert(&format!("conv{i}.bias"), Tensor::zeros(&[c_out])?)?;
        c_in = c_out;
    }
    Ok(params)
}

/// Fresh detector-weight predictor parameters: two dense layers
/// `feat_dim -> hidden -> feat_dim` applied row-wise.
pub fn init_predictor(cfg: &ModelConfig, rng: &mut Rng) -> Result<ParamSet> {
    cfg.validate()?;
    let (d, h) = (cfg.feat_dim, cfg.predictor_hidden);
    let mut params = ParamSet::new();
    params.insert("fc1.weight", randn_init(&[d, h], d, rng)?)?;
    params.insert("fc1.bias", Tensor::zeros(&[h])?)?;
    params.insert("fc2.weight", randn_init(&[h, d], h, rng)?)?;
    params.insert("fc2.bias", Tensor::zeros(&[d])?)?;
    Ok(params)
}

/// A fresh `rows x feat_dim` detector matrix, one row per landmark channel.
pub fn init_detector_rows(rows: usize, feat_dim: usize, rng: &mut Rng) -> Result<Tensor> {
    Ok(randn_init(&[rows, feat_dim], feat_dim, rng)?)
}

/// Runs the conv stack on a one-channel image, returning the
/// `(feat_dim, feat_h, feat_w)` feature map. Each layer is conv + bias +
/// relu; a 2x2 average pool follows each of the first `pool_stages` layers.
pub fn encode(cfg: &ModelConfig, params: &ParamSet, image: &Tensor) -> Result<Tensor> {
    let geom = &cfg.geom;
    if image.dims() != [1, geom.image_h, geom.image_w] {
        return Err(Error::data(format!(
            "encode: image shape {:?} does not match geometry {}x{}",
            image.dims(),
            geom.image_h,
            geom.image_w
        )));
    }
    let stages = geom.pool_stages()?;
    let mut x = image.clone();
    let (mut h, mut w) = (geom.image_h, geom.image_w);
    for i in 0..cfg.conv_channels.len() {
        let weight = params.expect(&format!("conv{i}.weight"))?;
        let bias = params.expect(&format!("conv{i}.bias"))?;
        let conv = ops::conv2d_same(&x, weight)?;
        let biased = ops::add(&conv, &ops::broadcast_spatial(bias, h, w)?)?;
        x = ops::relu(&biased)?;
        if i < stages {
            x = ops::avg_pool2(&x)?;
            h /= 2;
            w /= 2;
        }
    }
    Ok(x)
}

/// Pools one feature vector per landmark from each image's feature map using
/// its one-hot labelmap, then averages over the images: the result is
/// `(landmarks, feat_dim)`.
pub fn pool_landmark_features(features: &[Tensor], labelmaps: &[&Labelmap]) -> Result<Tensor> {
    if features.is_empty() || features.len() != labelmaps.len() {
        return Err(Error::data(format!(
            "pool_landmark_features: {} feature maps vs {} labelmaps",
            features.len(),
            labelmaps.len()
        )));
    }
    let mut acc: Option<Tensor> = None;
    for (f, lm) in features.iter().zip(labelmaps) {
        let (d, h, w) = (f.dims()[0], f.dims()[1], f.dims()[2]);
        if (h, w) != (lm.feat_h, lm.feat_w) {
            return Err(Error::data(format!(
                "pool_landmark_features: feature grid {h}x{w} vs labelmap {}x{}",
                lm.feat_h, lm.feat_w
            )));
        }
        let cells = ops::reshape(&lm.to_tensor()?, &[lm.channels(), h * w])?;
        let grid = ops::transpose(&ops::reshape(f, &[d, h * w])?)?;
        let pooled = ops::matmul(&cells, &grid)?;
        acc = Some(match acc {
            Some(prev) => ops::add(&prev, &pooled)?,
            None => pooled,
        });
    }
    Ok(ops::scale(
        &acc.expect("non-empty input"),
        1.0 / features.len() as f64,
    )?)
}

/// Maps pooled landmark features to detector rows with the two-layer
/// predictor. Row-wise with shared weights, so it accepts any landmark count.
pub fn predict_detectors(predictor: &ParamSet, landmark_features: &Tensor) -> Result<Tensor> {
    let rows = landmark_features.dims()[0];
    let w1 = predictor.expect("fc1.weight")?;
    let b1 = predictor.expect("fc1.bias")?;
    let w2 = predictor.expect("fc2.weight")?;
    let b2 = predictor.expect("fc2.bias")?;
    let hidden = ops::relu(&ops::add(
        &ops::matmul(landmark_features, w1)?,
        &ops::broadcast_rows(b1, rows)?,
    )?)?;
    Ok(ops::add(
        &ops::matmul(&hidden, w2)?,
        &ops::broadcast_rows(b2, rows)?,
    )?)
}

/// Applies detector rows as 1x1 convolutions over the feature map and
/// normalizes each landmark channel with a spatial softmax:
/// `(landmarks, feat_h, feat_w)`, every channel summing to 1.
pub fn detector_heatmaps(detectors: &Tensor, features: &Tensor) -> Result<Tensor> {
    if detectors.rank() != 2 || features.rank() != 3 || detectors.dims()[1] != features.dims()[0] {
        return Err(Error::data(format!(
            "detector_heatmaps: detectors {:?} vs features {:?}",
            detectors.dims(),
            features.dims()
        )));
    }
    let (n, d) = (detectors.dims()[0], detectors.dims()[1]);
    let (h, w) = (features.dims()[1], features.dims()[2]);
    let logits = ops::matmul(detectors, &ops::reshape(features, &[d, h * w])?)?;
    Ok(ops::spatial_softmax(&ops::reshape(&logits, &[n, h, w])?)?)
}

/// Cross-entropy between predicted heatmaps and a one-hot labelmap, averaged
/// over landmark channels.
pub fn heatmap_loss(heatmaps: &Tensor, labelmap: &Labelmap) -> Result<Tensor> {
    Ok(ops::xent_heatmap(heatmaps, &labelmap.to_tensor()?)?)
}

/// Decodes each heatmap channel to the pixel center of its argmax cell
/// (ties: lowest row-major cell). Returns `(x, y)` per landmark.
pub fn detect(heatmaps: &Tensor, geom: &Geometry) -> Result<Vec<(f64, f64)>> {
    if heatmaps.rank() != 3 {
        return Err(Error::data(format!(
            "detect: expected rank-3 heatmaps, got {:?}",
            heatmaps.dims()
        )));
    }
    let (n, h, w) = (heatmaps.dims()[0], heatmaps.dims()[1], heatmaps.dims()[2]);
    if (h, w) != (geom.feat_h, geom.feat_w) {
        return Err(Error::data(format!(
            "detect: heatmap grid {h}x{w} does not match geometry {}x{}",
            geom.feat_h, geom.feat_w
        )));
    }
    let data = heatmaps.data();
    let mut coords = Vec::with_capacity(n);
    for ch in 0..n {
        let grid = &data[ch * h * w..(ch + 1) * h * w];
        let mut best = 0usize;
        for (i, &v) in grid.iter().enumerate() {
            if v > grid[best] {
                best = i;
            }
        }
        let (row, col) = (best / w, best % w);
        let x = (col as f64 + 0.5) * geom.image_w as f64 / w as f64;
        let y = (row as f64 + 0.5) * geom.image_h as f64 / h as f64;
        coords.push((x, y));
    }
    Ok(coords)
}
