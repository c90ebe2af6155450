use fewmark_autodiff::ops::gather_rows;
use fewmark_autodiff::{grad, seed_chain, sgd_step, ParamSet, Rng, Tape, Tensor};

use crate::data::{sample_episode, Category, Registry, RenderConfig, Sample, MAX_LANDMARKS};
use crate::error::{Error, Result};
use crate::meta::{batch_loss, halfway_lr, MetaConfig, Order};
use crate::model::{init_detector_rows, ModelConfig};

/// Builds the joint parameter set for max-way meta-learning: the encoder plus
/// one detector row per global landmark slot.
pub fn maml_init(
    cfg: &ModelConfig,
    encoder_init: &ParamSet,
    seed: u64,
) -> Result<ParamSet> {
    let mut params = encoder_init.detached();
    params.insert(
        "detectors",
        init_detector_rows(MAX_LANDMARKS, cfg.feat_dim, &mut Rng::derive(seed, &[1]))?,
    )?;
    Ok(params)
}

/// Selects the detector rows a category occupies, in landmark order. Rows for
/// the other slots never enter the loss, so their gradients are exactly zero.
pub fn slot_detectors(params: &ParamSet, category: &Category) -> Result<Tensor> {
    let detectors = params.expect("detectors")?;
    let rows = detectors.dims()[0];
    if category.slots.len() != category.landmark_count() {
        return Err(Error::data(format!(
            "category {} slot table covers {} of {} landmarks",
            category.id,
            category.slots.len(),
            category.landmark_count()
        )));
    }
    if let Some(&bad) = category.slots.iter().find(|&&s| s >= rows) {
        return Err(Error::data(format!(
            "category {} uses slot {bad} but only {rows} detector rows exist",
            category.id
        )));
    }
    Ok(gather_rows(detectors, &category.slots)?)
}

fn slot_loss(
    cfg: &ModelConfig,
    params: &ParamSet,
    category: &Category,
    samples: &[Sample],
) -> Result<Tensor> {
    let detectors = slot_detectors(params, category)?;
    batch_loss(cfg, params, &detectors, samples)
}

/// Query-loss gradient for one task after adapting the joint parameters on the
/// support set. `Order::Second` differentiates through the inner updates.
pub fn maml_task_gradient(
    cfg: &ModelConfig,
    params: &ParamSet,
    category: &Category,
    support: &[Sample],
    query: &[Sample],
    mc: &MetaConfig,
) -> Result<(ParamSet, f64)> {
    let tape = Tape::new();
    let watched = tape.watch_params(params);
    let create_graph = mc.order == Order::Second;
    let mut adapted = watched.clone();
    for _ in 0..mc.inner_steps {
        let support_loss = slot_loss(cfg, &adapted, category, support)?;
        let inner_grads = grad(&support_loss, &adapted, create_graph)?;
        adapted = sgd_step(&adapted, &inner_grads, mc.inner_lr)?;
    }
    let query_loss = slot_loss(cfg, &adapted, category, query)?;
    let value = query_loss.item()?;
    let outer_grads = grad(&query_loss, &watched, false)?;
    Ok((outer_grads, value))
}

/// Meta-trains encoder and slot detectors jointly over episodic tasks from the
/// seen categories. Returns the trained parameters and per-task query losses.
pub fn maml_train(
    cfg: &ModelConfig,
    rc: &RenderConfig,
    registry: &Registry,
    seen: &[usize],
    mc: &MetaConfig,
    encoder_init: &ParamSet,
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
    let mut params = maml_init(cfg, encoder_init, seed)?;
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
        let (grads, value) =
            maml_task_gradient(cfg, &params, category, &episode.support, &episode.query, mc)?;
        params = sgd_step(&params, &grads, halfway_lr(mc.outer_lr, t, mc.n_tasks))?;
        losses.push(value);
    }
    Ok((params, losses))
}

/// Test-time adaptation: plain inner-loop SGD of the joint parameters on the
/// support loss. Zero steps returns the parameters unchanged.
pub fn maml_adapt(
    cfg: &ModelConfig,
    params: &ParamSet,
    category: &Category,
    support: &[Sample],
    mc: &MetaConfig,
) -> Result<ParamSet> {
    let mut adapted = params.detached();
    for _ in 0..mc.inner_steps {
        let tape = Tape::new();
        let watched = tape.watch_params(&adapted);
        let support_loss = slot_loss(cfg, &watched, category, support)?;
        let grads = grad(&support_loss, &watched, false)?;
        adapted = sgd_step(&adapted, &grads, mc.inner_lr)?;
    }
    Ok(adapted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meta::testutil::{
        tiny_base, tiny_meta, tiny_model, tiny_render, tiny_seen, TINY_SEED,
    };

    fn fixed_episode(shots: usize, query: usize) -> (Vec<Sample>, Vec<Sample>) {
        let reg = Registry::standard();
        let episode = sample_episode(&reg, 8, shots, query, &tiny_render(), 777).unwrap();
        (episode.support, episode.query)
    }

    fn tiny_params() -> ParamSet {
        let (base, _) = tiny_base();
        maml_init(&tiny_model(), &base.encoder, TINY_SEED + 7).unwrap()
    }

    #[test]
    fn detectors_cover_every_slot() {
        let params = tiny_params();
        let cfg = tiny_model();
        assert_eq!(
            params.expect("detectors").unwrap().dims(),
            &[MAX_LANDMARKS, cfg.feat_dim]
        );
        let reg = Registry::standard();
        for cat in reg.categories() {
            let rows = slot_detectors(&params, cat).unwrap();
            assert_eq!(rows.dims(), &[cat.landmark_count(), cfg.feat_dim]);
        }
    }

    #[test]
    fn unoccupied_slot_rows_do_not_affect_the_loss() {
        let params = tiny_params();
        let cfg = tiny_model();
        let reg = Registry::standard();
        let cat = reg.get(8).unwrap();
        let (support, _) = fixed_episode(2, 1);
        let baseline = slot_loss(&cfg, &params, cat, &support).unwrap().item().unwrap();

        let unoccupied = (0..MAX_LANDMARKS)
            .find(|s| !cat.slots.contains(s))
            .unwrap();
        let occupied = cat.slots[0];
        for (slot, expect_change) in [(unoccupied, false), (occupied, true)] {
            let det = params.expect("detectors").unwrap();
            let mut data: Vec<f64> = det.data().to_vec();
            for v in &mut data[slot * cfg.feat_dim..(slot + 1) * cfg.feat_dim] {
                *v += 10.0;
            }
            let det = Tensor::from_vec(det.dims(), data).unwrap();
            let mut bumped = ParamSet::new();
            for (name, t) in params.iter() {
                let value = if name == "detectors" { det.clone() } else { t.clone() };
                bumped.insert(name, value).unwrap();
            }
            let loss = slot_loss(&cfg, &bumped, cat, &support).unwrap().item().unwrap();
            if expect_change {
                assert_ne!(loss.to_bits(), baseline.to_bits());
            } else {
                assert_eq!(loss.to_bits(), baseline.to_bits());
            }
        }
    }

    #[test]
    fn unoccupied_slot_gradients_are_exactly_zero() {
        let params = tiny_params();
        let cfg = tiny_model();
        let reg = Registry::standard();
        let cat = reg.get(8).unwrap();
        let (support, query) = fixed_episode(1, 1);
        let mut mc = tiny_meta();
        mc.inner_steps = 1;
        let (grads, _) =
            maml_task_gradient(&cfg, &params, cat, &support, &query, &mc).unwrap();
        let det_grad = grads.expect("detectors").unwrap();
        let data = det_grad.data();
        for slot in 0..MAX_LANDMARKS {
            let row = &data[slot * cfg.feat_dim..(slot + 1) * cfg.feat_dim];
            if cat.slots.contains(&slot) {
                assert!(row.iter().any(|v| *v != 0.0), "occupied slot {slot} got no signal");
            } else {
                assert!(row.iter().all(|v| *v == 0.0), "unoccupied slot {slot} leaked gradient");
            }
        }
    }

    #[test]
    fn zero_inner_steps_adaptation_is_identity() {
        let params = tiny_params();
        let cfg = tiny_model();
        let reg = Registry::standard();
        let (support, _) = fixed_episode(2, 1);
        let mut mc = tiny_meta();
        mc.inner_steps = 0;
        let adapted = maml_adapt(&cfg, &params, reg.get(8).unwrap(), &support, &mc).unwrap();
        assert!(adapted.bit_eq(&params));
    }

    #[test]
    fn adaptation_reduces_support_loss() {
        let params = tiny_params();
        let cfg = tiny_model();
        let reg = Registry::standard();
        let cat = reg.get(8).unwrap();
        let (support, _) = fixed_episode(3, 1);
        let mc = tiny_meta();
        let before = slot_loss(&cfg, &params, cat, &support).unwrap().item().unwrap();
        let adapted = maml_adapt(&cfg, &params, cat, &support, &mc).unwrap();
        let after = slot_loss(&cfg, &adapted, cat, &support).unwrap().item().unwrap();
        assert!(after < before, "support loss {before} -> {after}");
    }

    #[test]
    fn training_is_deterministic_in_the_seed() {
        let (base, _) = tiny_base();
        let cfg = tiny_model();
        let reg = Registry::standard();
        let mut mc = tiny_meta();
        mc.n_tasks = 6;
        let run = |seed| {
            maml_train(&cfg, &tiny_render(), &reg, &tiny_seen(), &mc, &base.encoder, seed)
                .unwrap()
        };
        let (pa, la) = run(40);
        let (pb, lb) = run(40);
        let (pc, _) = run(41);
        assert!(pa.bit_eq(&pb));
        assert_eq!(la, lb);
        assert!(!pa.bit_eq(&pc));
    }

    #[test]
    fn orders_differ_once_inner_steps_run() {
        let params = tiny_params();
        let cfg = tiny_model();
        let reg = Registry::standard();
        let cat = reg.get(8).unwrap();
        let (support, query) = fixed_episode(2, 2);
        let mut mc = tiny_meta();
        mc.inner_steps = 2;
        mc.order = Order::Second;
        let (g2, v2) =
            maml_task_gradient(&cfg, &params, cat, &support, &query, &mc).unwrap();
        mc.order = Order::First;
        let (g1, v1) =
            maml_task_gradient(&cfg, &params, cat, &support, &query, &mc).unwrap();
        assert_eq!(v1.to_bits(), v2.to_bits());
        assert!(!g1.bit_eq(&g2));
    }

    #[test]
    fn malformed_slot_tables_are_rejected() {
        let params = tiny_params();
        let reg = Registry::standard();
        let mut cat = reg.get(8).unwrap().clone();
        cat.slots.pop();
        assert!(slot_detectors(&params, &cat).is_err());
        let mut cat = reg.get(8).unwrap().clone();
        cat.slots[0] = MAX_LANDMARKS + 3;
        assert!(slot_detectors(&params, &cat).is_err());
    }
}
