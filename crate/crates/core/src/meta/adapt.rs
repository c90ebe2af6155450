//! Test-time adaptation to a novel category from its support set, and pure
//! prediction with the adapted parameters.

use fewmark_autodiff::{grad, sgd_step, ParamSet, Tape, Tensor};

use crate::data::{Category, Sample};
use crate::error::Result;
use crate::meta::base::{make_labelmaps, BaseModel, LabelmapSource};
use crate::meta::train::{batch_loss, pooled_support_features, MetaConfig};
use crate::model::{detect, detector_heatmaps, encode, predict_detectors, ModelConfig};

/// What happened during one adaptation: support loss before and after, the
/// loss trace across inner steps, and whether the inner learning rate was
/// halved after a non-decrease.
#[derive(Clone, Debug)]
pub struct AdaptReport {
    pub loss_before: f64,
    pub loss_after: f64,
    /// Support loss before each inner step, then after the last one;
    /// length `inner_steps + 1`.
    pub inner_losses: Vec<f64>,
    pub halved_lr: bool,
    pub used_lr: f64,
}

/// Encoder and detectors adapted to one episode's support set.
#[derive(Clone, Debug)]
pub struct AdaptedTask {
    pub encoder: ParamSet,
    pub detectors: Tensor,
    pub report: AdaptReport,
}

/// Adapts the encoder initialization to a support set: predict detectors
/// from the frozen base encoder's features, run inner SGD on the support
/// loss, then optionally re-predict detectors from the adapted features.
/// Pooling always uses ground-truth labelmaps here. If the support loss
/// fails to decrease, the inner learning rate is halved once and adaptation
/// reruns; the report records both outcomes.
pub fn meta_adapt(
    cfg: &ModelConfig,
    base: &BaseModel,
    predictor: &ParamSet,
    theta: &ParamSet,
    category: &Category,
    support: &[Sample],
    mc: &MetaConfig,
    refine_detectors: bool,
) -> Result<AdaptedTask> {
    let pool_labelmaps =
        make_labelmaps(LabelmapSource::GroundTruth, cfg, base, category, support)?;
    let base_features = pooled_support_features(cfg, &base.encoder, support, &pool_labelmaps)?;
    let detectors = predict_detectors(predictor, &base_features)?;

    let attempt = |lr: f64| -> Result<(ParamSet, Tensor, Vec<f64>, f64)> {
        let mut adapted = theta.detached();
        let mut inner_losses = Vec::with_capacity(mc.inner_steps + 1);
        for _ in 0..mc.inner_steps {
            let tape = Tape::new();
            let watched = tape.watch_params(&adapted);
            let loss = batch_loss(cfg, &watched, &detectors, support)?;
            inner_losses.push(loss.item()?);
            let grads = grad(&loss, &watched, false)?;
            adapted = sgd_step(&adapted, &grads, lr)?;
        }
        inner_losses.push(batch_loss(cfg, &adapted, &detectors, support)?.item()?);
        let refined = if refine_detectors {
            let features = pooled_support_features(cfg, &adapted, support, &pool_labelmaps)?;
            predict_detectors(predictor, &features)?
        } else {
            detectors.clone()
        };
        let loss_after = batch_loss(cfg, &adapted, &refined, support)?.item()?;
        Ok((adapted, refined, inner_losses, loss_after))
    };

    let (adapted, refined, inner_losses, loss_after) = attempt(mc.inner_lr)?;
    let loss_before = inner_losses[0];
    if loss_after <= loss_before || mc.inner_steps == 0 {
        return Ok(AdaptedTask {
            encoder: adapted,
            detectors: refined,
            report: AdaptReport {
                loss_before,
                loss_after,
                inner_losses,
                halved_lr: false,
                used_lr: mc.inner_lr,
            },
        });
    }
    let halved = mc.inner_lr * 0.5;
    let (adapted, refined, inner_losses, loss_after) = attempt(halved)?;
    Ok(AdaptedTask {
        encoder: adapted,
        detectors: refined,
        report: AdaptReport {
            loss_before: inner_losses[0],
            loss_after,
            inner_losses,
            halved_lr: true,
            used_lr: halved,
        },
    })
}

/// Pure forward pass with adapted parameters: per-landmark heatmaps and
/// decoded pixel coordinates for one image.
pub fn meta_predict(
    cfg: &ModelConfig,
    encoder: &ParamSet,
    detectors: &Tensor,
    image: &Tensor,
) -> Result<(Tensor, Vec<(f64, f64)>)> {
    let features = encode(cfg, encoder, image)?;
    let heatmaps = detector_heatmaps(detectors, &features)?;
    let coords = detect(&heatmaps, &cfg.geom)?;
    Ok((heatmaps, coords))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{sample_episode, Registry};
    use crate::meta::testutil::{tiny_base, tiny_meta, tiny_model, tiny_predictor, tiny_render};

    #[test]
    fn zero_steps_keeps_theta_and_predicts_from_it() {
        let (base, _) = tiny_base();
        let (predictor, _) = tiny_predictor();
        let cfg = tiny_model();
        let reg = Registry::standard();
        let cat = reg.get(7).unwrap();
        let episode = sample_episode(&reg, 7, 2, 2, &tiny_render(), 70).unwrap();
        let mut mc = tiny_meta();
        mc.inner_steps = 0;
        mc.inner_lr = 0.0;

        let full = meta_adapt(
            &cfg, &base, &predictor, &base.encoder, cat, &episode.support, &mc, true,
        )
        .unwrap();
        assert!(full.encoder.bit_eq(&base.encoder));
        // With the encoder unchanged, refinement re-predicts from the same
        // unadapted features the adapted-feature path produces.
        let lms = make_labelmaps(
            LabelmapSource::GroundTruth, &cfg, &base, cat, &episode.support,
        )
        .unwrap();
        let feats =
            pooled_support_features(&cfg, &base.encoder, &episode.support, &lms).unwrap();
        let expect = predict_detectors(&predictor, &feats).unwrap();
        assert!(full.detectors.bit_eq(&expect));

        let kept = meta_adapt(
            &cfg, &base, &predictor, &base.encoder, cat, &episode.support, &mc, false,
        )
        .unwrap();
        assert!(kept.detectors.bit_eq(&expect));
        assert!(!kept.report.halved_lr);
        assert_eq!(kept.report.inner_losses.len(), 1);
    }

    #[test]
    fn detector_rows_match_category_landmarks_for_unseen_categories() {
        let (base, _) = tiny_base();
        let (predictor, _) = tiny_predictor();
        let cfg = tiny_model();
        let reg = Registry::standard();
        for id in [4usize, 7] {
            let cat = reg.get(id).unwrap();
            let episode = sample_episode(&reg, id, 1, 1, &tiny_render(), 71).unwrap();
            let out = meta_adapt(
                &cfg, &base, &predictor, &base.encoder, cat, &episode.support, &tiny_meta(), true,
            )
            .unwrap();
            assert_eq!(out.detectors.dims(), &[cat.landmark_count(), cfg.feat_dim]);
        }
    }

    #[test]
    fn report_is_coherent_and_loss_improves_or_halves() {
        let (base, _) = tiny_base();
        let (predictor, _) = tiny_predictor();
        let cfg = tiny_model();
        let reg = Registry::standard();
        let cat = reg.get(7).unwrap();
        let episode = sample_episode(&reg, 7, 3, 2, &tiny_render(), 72).unwrap();
        let mc = tiny_meta();
        let out = meta_adapt(
            &cfg, &base, &predictor, &base.encoder, cat, &episode.support, &mc, true,
        )
        .unwrap();
        let r = &out.report;
        assert_eq!(r.inner_losses.len(), mc.inner_steps + 1);
        assert_eq!(r.loss_before, r.inner_losses[0]);
        if r.halved_lr {
            assert_eq!(r.used_lr, mc.inner_lr * 0.5);
        } else {
            assert_eq!(r.used_lr, mc.inner_lr);
            assert!(r.loss_after <= r.loss_before);
        }
    }

    #[test]
    fn inner_loop_alone_never_raises_support_loss_here() {
        // Inner SGD against fixed detectors: the recorded trace along the
        // kept attempt must not increase at the tiny default rate.
        let (base, _) = tiny_base();
        let (predictor, _) = tiny_predictor();
        let cfg = tiny_model();
        let reg = Registry::standard();
        let cat = reg.get(7).unwrap();
        let episode = sample_episode(&reg, 7, 3, 2, &tiny_render(), 73).unwrap();
        let out = meta_adapt(
            &cfg, &base, &predictor, &base.encoder, cat, &episode.support, &tiny_meta(), false,
        )
        .unwrap();
        for pair in out.report.inner_losses.windows(2) {
            assert!(
                pair[1] <= pair[0] + 1e-9,
                "support loss rose along the inner loop: {:?}",
                out.report.inner_losses
            );
        }
    }

    #[test]
    fn prediction_is_pure_and_in_bounds() {
        let (base, _) = tiny_base();
        let (predictor, _) = tiny_predictor();
        let cfg = tiny_model();
        let reg = Registry::standard();
        let cat = reg.get(7).unwrap();
        let episode = sample_episode(&reg, 7, 1, 2, &tiny_render(), 74).unwrap();
        let out = meta_adapt(
            &cfg, &base, &predictor, &base.encoder, cat, &episode.support, &tiny_meta(), true,
        )
        .unwrap();
        let img = episode.query[0].image_tensor().unwrap();
        let (hm_a, coords_a) = meta_predict(&cfg, &out.encoder, &out.detectors, &img).unwrap();
        let (hm_b, coords_b) = meta_predict(&cfg, &out.encoder, &out.detectors, &img).unwrap();
        assert!(hm_a.bit_eq(&hm_b));
        assert_eq!(coords_a, coords_b);
        assert_eq!(coords_a.len(), cat.landmark_count());
        for (x, y) in coords_a {
            assert!(x >= 0.0 && x <= cfg.geom.image_w as f64);
            assert!(y >= 0.0 && y <= cfg.geom.image_h as f64);
        }
    }
}
