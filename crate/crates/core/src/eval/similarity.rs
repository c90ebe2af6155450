use fewmark_autodiff::{seed_chain, ParamSet};

use crate::data::{sample_episode, Labelmap, Registry, RenderConfig, Sample};
use crate::error::{Error, Result};
use crate::meta::{meta_adapt, pooled_support_features, BaseModel, MetaConfig};
use crate::model::ModelConfig;

use super::metrics::cosine;

/// Per-category feature-geometry report: how much each landmark's pooled
/// feature moved during adaptation, and how separable distinct landmarks are
/// afterwards.
#[derive(Clone, Debug)]
pub struct SimilarityRow {
    pub category_id: usize,
    /// Mean cosine between a landmark's pooled feature before and after the
    /// inner-loop update.
    pub same_landmark: f64,
    /// Mean pairwise cosine among distinct landmarks' pooled features after
    /// the update.
    pub cross_landmark: f64,
    pub episodes: usize,
}

fn pooled_rows(
    cfg: &ModelConfig,
    encoder: &ParamSet,
    support: &[Sample],
    labelmaps: &[Labelmap],
) -> Result<Vec<Vec<f64>>> {
    let pooled = pooled_support_features(cfg, encoder, support, labelmaps)?;
    let d = pooled.dims()[1];
    Ok(pooled.data().chunks(d).map(|row| row.to_vec()).collect())
}

/// Measures, over seeded episodes of each unseen category, (a) the mean
/// same-landmark cosine between pooled features under the initialization and
/// under the adapted encoder, and (b) the mean cosine between distinct
/// landmarks' pooled features under the adapted encoder.
#[allow(clippy::too_many_arguments)]
pub fn feature_similarity(
    cfg: &ModelConfig,
    rc: &RenderConfig,
    registry: &Registry,
    unseen: &[usize],
    base: &BaseModel,
    predictor: &ParamSet,
    theta: &ParamSet,
    mc: &MetaConfig,
    refine: bool,
    shot: usize,
    episodes_per_category: usize,
    seed: u64,
) -> Result<Vec<SimilarityRow>> {
    if episodes_per_category == 0 {
        return Err(Error::usage("similarity needs at least one episode"));
    }
    let mut rows = Vec::with_capacity(unseen.len());
    for &category_id in unseen {
        let category = registry.get(category_id)?;
        let mut same_sum = 0.0;
        let mut cross_sum = 0.0;
        for idx in 0..episodes_per_category {
            let episode_seed = seed_chain(&[seed, 8, category_id as u64, idx as u64]);
            let episode = sample_episode(registry, category_id, shot, 1, rc, episode_seed)?;
            let labelmaps: Vec<Labelmap> =
                episode.support.iter().map(|s| s.labelmap.clone()).collect();
            let before = pooled_rows(cfg, theta, &episode.support, &labelmaps)?;
            let adapted = meta_adapt(
                cfg,
                base,
                predictor,
                theta,
                category,
                &episode.support,
                mc,
                refine,
            )?;
            let after = pooled_rows(cfg, &adapted.encoder, &episode.support, &labelmaps)?;

            let n = before.len();
            same_sum += (0..n).map(|i| cosine(&before[i], &after[i])).sum::<f64>() / n as f64;
            let mut pair_sum = 0.0;
            let mut pairs = 0usize;
            for i in 0..n {
                for j in i + 1..n {
                    pair_sum += cosine(&after[i], &after[j]);
                    pairs += 1;
                }
            }
            if pairs > 0 {
                cross_sum += pair_sum / pairs as f64;
            }
        }
        rows.push(SimilarityRow {
            category_id,
            same_landmark: same_sum / episodes_per_category as f64,
            cross_landmark: cross_sum / episodes_per_category as f64,
            episodes: episodes_per_category,
        });
    }
    Ok(rows)
}
