//! Episodic meta-training of the encoder initialization.
//!
//! Each task runs four flows: (1) predict detectors from the frozen base
//! encoder's pooled support features, (2) adapt the encoder by unrolled SGD
//! on the support loss, (3) re-predict detectors from the adapted encoder's
//! features, (4) take the query-loss gradient with respect to the encoder
//! initialization and step it.

use fewmark_autodiff::{grad, ops, seed_chain, sgd_step, ParamSet, Rng, Tape, Tensor};

use crate::data::{sample_episode, Labelmap, Registry, RenderConfig, Sample};
use crate::error::{Error, Result};
use crate::meta::base::{make_labelmaps, BaseModel, LabelmapSource};
use crate::model::{
    detector_heatmaps, encode, heatmap_loss, pool_landmark_features, predict_detectors,
    ModelConfig,
};

/// Whether the outer gradient differentiates through the inner SGD chain
/// (`Second`) or treats the adapted encoder as `init - constant` (`First`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Order {
    Second,
    First,
}

impl Order {
    pub fn parse(s: &str) -> Result<Order> {
        match s {
            "second" => Ok(Order::Second),
            "first" => Ok(Order::First),
            other => Err(Error::usage(format!(
                "unknown order {other:?} (expected second or first)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Order::Second => "second",
            Order::First => "first",
        }
    }
}

/// Whether flow 3 re-predicts detectors from the adapted encoder, or the
/// flow-1 detectors are kept unchanged through the query loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetaVariant {
    Full,
    KeepDetectors,
}

/// Learning rates and schedule for predictor training and meta-training.
#[derive(Clone, Debug)]
pub struct MetaConfig {
    /// Inner-loop (support) learning rate.
    pub inner_lr: f64,
    /// Outer (meta) learning rate; drops tenfold at the halfway task.
    pub outer_lr: f64,
    /// Detector-predictor learning rate; drops tenfold at the halfway task.
    pub predictor_lr: f64,
    pub inner_steps: usize,
    pub n_tasks: usize,
    pub order: Order,
    /// Labelmap source for pooling support features during training;
    /// evaluation always pools with ground truth.
    pub labelmap_source_train: LabelmapSource,
    /// Per-task shot count is drawn uniformly from this list.
    pub train_shots: Vec<usize>,
    /// Query samples per training task.
    pub train_query: usize,
}

impl MetaConfig {
    pub fn standard() -> MetaConfig {
        MetaConfig {
            inner_lr: 0.01,
            outer_lr: 0.001,
            predictor_lr: 0.002,
            inner_steps: 5,
            n_tasks: 4000,
            order: Order::Second,
            labelmap_source_train: LabelmapSource::Predicted,
            train_shots: vec![1, 3, 5, 8, 10],
            train_query: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, lr) in [
            ("inner_lr", self.inner_lr),
            ("outer_lr", self.outer_lr),
            ("predictor_lr", self.predictor_lr),
        ] {
            if !lr.is_finite() || lr < 0.0 {
                return Err(Error::usage(format!(
                    "{name} must be finite and non-negative, got {lr}"
                )));
            }
        }
        if self.train_shots.is_empty() || self.train_shots.iter().any(|&k| k == 0) {
            return Err(Error::usage("train shot list must be non-empty, all shots >= 1"));
        }
        if self.train_query == 0 {
            return Err(Error::usage("train query size must be at least 1"));
        }
        Ok(())
    }
}

/// Learning rate with a tenfold drop at the halfway task.
pub(crate) fn halfway_lr(base: f64, task: usize, n_tasks: usize) -> f64 {
    if n_tasks > 0 && task >= n_tasks / 2 {
        base * 0.1
    } else {
        base
    }
}

/// Mean detection loss of (encoder, detectors) over samples, each against its
/// own ground-truth labelmap.
pub(crate) fn batch_loss(
    cfg: &ModelConfig,
    encoder: &ParamSet,
    detectors: &Tensor,
    samples: &[Sample],
) -> Result<Tensor> {
    if samples.is_empty() {
        return Err(Error::data("batch loss over an empty sample list"));
    }
    let mut acc: Option<Tensor> = None;
    for s in samples {
        let features = encode(cfg, encoder, &s.image_tensor()?)?;
        let heatmaps = detector_heatmaps(detectors, &features)?;
        let loss = heatmap_loss(&heatmaps, &s.labelmap)?;
        acc = Some(match acc {
            Some(prev) => ops::add(&prev, &loss)?,
            None => loss,
        });
    }
    Ok(ops::scale(&acc.unwrap(), 1.0 / samples.len() as f64)?)
}

/// Encodes every sample and pools one feature row per landmark, averaged over
/// the samples.
pub(crate) fn pooled_support_features(
    cfg: &ModelConfig,
    encoder: &ParamSet,
    samples: &[Sample],
    labelmaps: &[Labelmap],
) -> Result<Tensor> {
    let features: Vec<Tensor> = samples
        .iter()
        .map(|s| encode(cfg, encoder, &s.image_tensor()?))
        .collect::<Result<_>>()?;
    let refs: Vec<&Labelmap> = labelmaps.iter().collect();
    pool_landmark_features(&features, &refs)
}

/// One episodic task plus the labelmaps used to pool its support features.
/// Losses always target each sample's own ground truth.
pub struct TaskData<'a> {
    pub support: &'a [Sample],
    pub query: &'a [Sample],
    pub pool_labelmaps: &'a [Labelmap],
}

/// Runs flows 1-4 for one task and returns the query-loss gradient with
/// respect to the encoder initialization, plus the query loss value.
pub fn task_outer_gradient(
    cfg: &ModelConfig,
    base: &BaseModel,
    predictor: &ParamSet,
    theta: &ParamSet,
    task: &TaskData,
    mc: &MetaConfig,
    variant: MetaVariant,
) -> Result<(ParamSet, f64)> {
    let base_features =
        pooled_support_features(cfg, &base.encoder, task.support, task.pool_labelmaps)?;
    let detectors = predict_detectors(predictor, &base_features)?;

    let tape = Tape::new();
    let watched = tape.watch_params(theta);
    let create_graph = mc.order == Order::Second;
    let mut adapted = watched.clone();
    for _ in 0..mc.inner_steps {
        let support_loss = batch_loss(cfg, &adapted, &detectors, task.support)?;
        let inner_grads = grad(&support_loss, &adapted, create_graph)?;
        adapted = sgd_step(&adapted, &inner_grads, mc.inner_lr)?;
    }

    let refined = match variant {
        MetaVariant::Full => {
            let features =
                pooled_support_features(cfg, &adapted, task.support, task.pool_labelmaps)?;
            predict_detectors(predictor, &features)?
        }
        MetaVariant::KeepDetectors => detectors,
    };

    let query_loss = batch_loss(cfg, &adapted, &refined, task.query)?;
    let value = query_loss.item()?;
    let outer_grads = grad(&query_loss, &watched, false)?;
    Ok((outer_grads, value))
}

/// Meta-trains the encoder initialization over `n_tasks` episodic tasks drawn
/// from the seen categories. The base model and the detector predictor stay
/// frozen throughout. Returns the trained initialization and per-task query
/// losses.
#[allow(clippy::too_many_arguments)]
pub fn meta_train(
    cfg: &ModelConfig,
    rc: &RenderConfig,
    registry: &Registry,
    base: &BaseModel,
    predictor: &ParamSet,
    seen: &[usize],
    mc: &MetaConfig,
    variant: MetaVariant,
    theta_init: &ParamSet,
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
    let mut theta = theta_init.detached();
    let mut losses = Vec::with_capacity(mc.n_tasks);
    for t in 0..mc.n_tasks {
        let mut rng = Rng::derive(seed, &[5, t as u64]);
        let category_id = *rng.pick(seen);
        let shots = *rng.pick(&mc.train_shots);
        let category = registry.get(category_id)?;
        let episode = sample_episode(
            registry,
            category_id,
            shots,
            mc.train_query,
            rc,
            seed_chain(&[seed, 6, t as u64]),
        )?;
        let pool_labelmaps = make_labelmaps(
            mc.labelmap_source_train,
            cfg,
            base,
            category,
            &episode.support,
        )?;
        let task = TaskData {
            support: &episode.support,
            query: &episode.query,
            pool_labelmaps: &pool_labelmaps,
        };
        let (grads, value) = task_outer_gradient(cfg, base, predictor, &theta, &task, mc, variant)?;
        theta = sgd_step(&theta, &grads, halfway_lr(mc.outer_lr, t, mc.n_tasks))?;
        losses.push(value);
    }
    Ok((theta, losses))
}
