//! Episodic training of the detector-weight predictor against the frozen
//! base encoder: pool support features, predict detectors, step the
//! predictor on the query loss.

use fewmark_autodiff::{grad, seed_chain, sgd_step, ParamSet, Rng, Tape};

use crate::data::{sample_episode, Registry, RenderConfig};
use crate::error::{Error, Result};
use crate::meta::base::{make_labelmaps, BaseModel};
use crate::meta::train::{batch_loss, halfway_lr, pooled_support_features, MetaConfig};
use crate::model::{init_predictor, predict_detectors, ModelConfig};

/// Trains the detector predictor over `n_tasks` episodic tasks drawn from
/// the seen categories. The base encoder and detectors are read, never
/// updated. Returns the predictor and per-task query losses.
pub fn train_predictor(
    cfg: &ModelConfig,
    rc: &RenderConfig,
    registry: &Registry,
    base: &BaseModel,
    seen: &[usize],
    mc: &MetaConfig,
    seed: u64,
) -> Result<(ParamSet, Vec<f64>)> {
    cfg.validate()?;
    mc.validate()?;
    if rc.geom != cfg.geom {
        return Err(Error::data(
            "render geometry does not match the model geometry",
        ));
    }
    if seen.is_empty() {
        return Err(Error::data("seen category list is empty"));
    }
    let mut predictor = init_predictor(cfg, &mut Rng::derive(seed, &[1]))?;
    let mut losses = Vec::with_capacity(mc.n_tasks);
    for t in 0..mc.n_tasks {
        let mut rng = Rng::derive(seed, &[2, t as u64]);
        let category_id = *rng.pick(seen);
        let shots = *rng.pick(&mc.train_shots);
        let category = registry.get(category_id)?;
        let episode = sample_episode(
            registry,
            category_id,
            shots,
            mc.train_query,
            rc,
            seed_chain(&[seed, 3, t as u64]),
        )?;
        let pool_labelmaps = make_labelmaps(
            mc.labelmap_source_train,
            cfg,
            base,
            category,
            &episode.support,
        )?;
        let support_features =
            pooled_support_features(cfg, &base.encoder, &episode.support, &pool_labelmaps)?;

        let tape = Tape::new();
        let watched = tape.watch_params(&predictor);
        let detectors = predict_detectors(&watched, &support_features)?;
        let query_loss = batch_loss(cfg, &base.encoder, &detectors, &episode.query)?;
        losses.push(query_loss.item()?);
        let grads = grad(&query_loss, &watched, false)?;
        predictor = sgd_step(&predictor, &grads, halfway_lr(mc.predictor_lr, t, mc.n_tasks))?;
    }
    Ok((predictor, losses))
}
