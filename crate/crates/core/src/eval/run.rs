use fewmark_autodiff::{seed_chain, ParamSet};
use serde::{Deserialize, Serialize};

use crate::baselines::{ft_adapt, maml_adapt, proto_adapt, proto_predict, slot_detectors, wg_adapt, FtConfig};
use crate::data::{sample_episode, BenchmarkSplit, Category, Episode, Registry, RenderConfig};
use crate::error::{Error, Result};
use crate::meta::{meta_adapt, meta_predict, BaseModel, MetaConfig};
use crate::model::ModelConfig;

use super::metrics::{ci95, mean, ne_components};

/// Evaluation methods selectable on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Metacloth,
    Ft,
    Maml,
    Wg,
    Proto,
}

impl Method {
    pub fn parse(s: &str) -> Result<Method> {
        match s {
            "metacloth" => Ok(Method::Metacloth),
            "ft" => Ok(Method::Ft),
            "maml" => Ok(Method::Maml),
            "wg" => Ok(Method::Wg),
            "proto" => Ok(Method::Proto),
            other => Err(Error::usage(format!(
                "unknown method {other:?}; expected one of metacloth, ft, maml, wg, proto"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Metacloth => "metacloth",
            Method::Ft => "ft",
            Method::Maml => "maml",
            Method::Wg => "wg",
            Method::Proto => "proto",
        }
    }
}

/// Episode protocol: how many episodes per unseen category, queries per
/// episode, and which shot counts to sweep.
#[derive(Clone, Debug)]
pub struct EvalConfig {
    pub episodes_per_category: usize,
    pub query_size: usize,
    pub shots: Vec<usize>,
}

impl EvalConfig {
    pub fn standard() -> EvalConfig {
        EvalConfig {
            episodes_per_category: 100,
            query_size: 24,
            shots: vec![1, 3, 5, 8, 10],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.episodes_per_category == 0 || self.query_size == 0 {
            return Err(Error::usage("episode and query counts must be positive"));
        }
        if self.shots.is_empty() || self.shots.iter().any(|&s| s == 0) {
            return Err(Error::usage("shot list must be non-empty positive integers"));
        }
        Ok(())
    }
}

/// A method plus every artifact it needs to adapt and predict.
pub enum MethodSpec<'a> {
    /// Also serves the ablation variants: `theta` picks the initialization
    /// and `refine` controls the test-time detector update.
    Metacloth {
        base: &'a BaseModel,
        predictor: &'a ParamSet,
        theta: &'a ParamSet,
        mc: &'a MetaConfig,
        refine: bool,
    },
    Ft {
        base: &'a BaseModel,
        fc: &'a FtConfig,
    },
    Maml {
        params: &'a ParamSet,
        mc: &'a MetaConfig,
    },
    Wg {
        base: &'a BaseModel,
        predictor: &'a ParamSet,
    },
    Proto {
        base: &'a BaseModel,
    },
}

/// One evaluated episode: the per-query per-landmark error components and
/// their mean.
#[derive(Clone, Debug)]
pub struct EpisodeResult {
    pub method: String,
    pub benchmark: u8,
    pub category_id: usize,
    pub shot: usize,
    pub episode_seed: u64,
    pub components: Vec<f64>,
    pub ne: f64,
}

/// One row of the results table: a method x benchmark x shot aggregate.
/// `shot` is a number, or "mean" for the pooled all-shots row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: String,
    pub benchmark: u8,
    pub shot: String,
    pub mean_ne: f64,
    pub ci95: f64,
    pub n: usize,
}

/// Adapts to the episode's support set and predicts every query, returning
/// per-query per-landmark error components.
pub fn evaluate_episode(
    cfg: &ModelConfig,
    spec: &MethodSpec,
    category: &Category,
    episode: &Episode,
    episode_seed: u64,
) -> Result<Vec<f64>> {
    let mut predict: Box<dyn FnMut(&crate::data::Sample) -> Result<Vec<(f64, f64)>>> = match spec
    {
        MethodSpec::Metacloth { base, predictor, theta, mc, refine } => {
            let adapted =
                meta_adapt(cfg, base, predictor, theta, category, &episode.support, mc, *refine)?;
            Box::new(move |q| {
                Ok(meta_predict(cfg, &adapted.encoder, &adapted.detectors, &q.image_tensor()?)?.1)
            })
        }
        MethodSpec::Ft { base, fc } => {
            let (encoder, detectors) = ft_adapt(
                cfg,
                &base.encoder,
                category,
                &episode.support,
                fc,
                seed_chain(&[episode_seed, 101]),
            )?;
            Box::new(move |q| {
                Ok(meta_predict(cfg, &encoder, &detectors, &q.image_tensor()?)?.1)
            })
        }
        MethodSpec::Maml { params, mc } => {
            let adapted = maml_adapt(cfg, params, category, &episode.support, mc)?;
            let detectors = slot_detectors(&adapted, category)?;
            Box::new(move |q| {
                Ok(meta_predict(cfg, &adapted, &detectors, &q.image_tensor()?)?.1)
            })
        }
        MethodSpec::Wg { base, predictor } => {
            let detectors = wg_adapt(cfg, &base.encoder, predictor, &episode.support)?;
            let encoder = base.encoder.clone();
            Box::new(move |q| {
                Ok(meta_predict(cfg, &encoder, &detectors, &q.image_tensor()?)?.1)
            })
        }
        MethodSpec::Proto { base } => {
            let prototypes = proto_adapt(cfg, &base.encoder, &episode.support)?;
            let encoder = base.encoder.clone();
            Box::new(move |q| {
                Ok(proto_predict(cfg, &encoder, &prototypes, &q.image_tensor()?)?.1)
            })
        }
    };
    let mut components = Vec::with_capacity(episode.query.len() * category.landmark_count());
    for q in &episode.query {
        let coords = predict(q)?;
        components.extend(ne_components(&coords, &q.coords, q.area)?);
    }
    Ok(components)
}

/// Predicted heatmaps for one episode's first query, for visualization.
/// Returns `None` for the prototype method, whose scores are distances
/// rather than spatial distributions.
pub fn episode_heatmaps(
    cfg: &ModelConfig,
    spec: &MethodSpec,
    category: &Category,
    episode: &Episode,
    episode_seed: u64,
) -> Result<Option<fewmark_autodiff::Tensor>> {
    let query = episode
        .query
        .first()
        .ok_or_else(|| Error::data("heatmap export needs at least one query"))?;
    let image = query.image_tensor()?;
    let heatmaps = match spec {
        MethodSpec::Metacloth { base, predictor, theta, mc, refine } => {
            let adapted =
                meta_adapt(cfg, base, predictor, theta, category, &episode.support, mc, *refine)?;
            meta_predict(cfg, &adapted.encoder, &adapted.detectors, &image)?.0
        }
        MethodSpec::Ft { base, fc } => {
            let (encoder, detectors) = ft_adapt(
                cfg,
                &base.encoder,
                category,
                &episode.support,
                fc,
                seed_chain(&[episode_seed, 101]),
            )?;
            meta_predict(cfg, &encoder, &detectors, &image)?.0
        }
        MethodSpec::Maml { params, mc } => {
            let adapted = maml_adapt(cfg, params, category, &episode.support, mc)?;
            let detectors = slot_detectors(&adapted, category)?;
            meta_predict(cfg, &adapted, &detectors, &image)?.0
        }
        MethodSpec::Wg { base, predictor } => {
            let detectors = wg_adapt(cfg, &base.encoder, predictor, &episode.support)?;
            meta_predict(cfg, &base.encoder, &detectors, &image)?.0
        }
        MethodSpec::Proto { .. } => return Ok(None),
    };
    Ok(Some(heatmaps))
}

/// Runs the full episodic protocol: for every shot and every unseen category,
/// `episodes_per_category` deterministically seeded episodes, each adapted on
/// its support set and scored on its queries. The episode seeds depend only
/// on (seed, scheme, category, shot, index), so different methods see
/// identical episodes.
pub fn run_benchmark(
    cfg: &ModelConfig,
    rc: &RenderConfig,
    registry: &Registry,
    split: &BenchmarkSplit,
    spec: &MethodSpec,
    method: &str,
    ec: &EvalConfig,
    seed: u64,
) -> Result<(Vec<EpisodeResult>, Vec<Summary>)> {
    cfg.validate()?;
    ec.validate()?;
    if rc.geom != cfg.geom {
        return Err(Error::data(
            "render geometry does not match the model geometry",
        ));
    }
    let mut results = Vec::new();
    for &shot in &ec.shots {
        for &category_id in &split.unseen {
            let category = registry.get(category_id)?;
            for idx in 0..ec.episodes_per_category {
                let episode_seed = seed_chain(&[
                    seed,
                    split.scheme as u64,
                    category_id as u64,
                    shot as u64,
                    idx as u64,
                ]);
                let episode = sample_episode(
                    registry,
                    category_id,
                    shot,
                    ec.query_size,
                    rc,
                    episode_seed,
                )?;
                let components = evaluate_episode(cfg, spec, category, &episode, episode_seed)?;
                let ne = mean(&components);
                if !ne.is_finite() {
                    return Err(Error::data(format!(
                        "non-finite episode error for {method} on category {category_id}"
                    )));
                }
                results.push(EpisodeResult {
                    method: method.to_string(),
                    benchmark: split.scheme,
                    category_id,
                    shot,
                    episode_seed,
                    components,
                    ne,
                });
            }
        }
    }
    let summaries = summarize(&results)?;
    Ok((results, summaries))
}

/// Aggregates episode errors into per-shot rows plus one pooled "mean" row
/// per method x benchmark, in first-appearance order.
pub fn summarize(results: &[EpisodeResult]) -> Result<Vec<Summary>> {
    let rows: Vec<(String, u8, usize, f64)> = results
        .iter()
        .map(|r| (r.method.clone(), r.benchmark, r.shot, r.ne))
        .collect();
    summarize_rows(&rows)
}

/// Shared aggregation core: consumes `(method, benchmark, shot, ne)` rows in
/// order, so recomputing from a results CSV reproduces the same sums.
pub fn summarize_rows(rows: &[(String, u8, usize, f64)]) -> Result<Vec<Summary>> {
    let mut groups: Vec<(String, u8)> = Vec::new();
    for (method, benchmark, _, _) in rows {
        if !groups.iter().any(|g| g.0 == *method && g.1 == *benchmark) {
            groups.push((method.clone(), *benchmark));
        }
    }
    let mut summaries = Vec::new();
    for (method, benchmark) in groups {
        let group: Vec<&(String, u8, usize, f64)> = rows
            .iter()
            .filter(|r| r.0 == method && r.1 == benchmark)
            .collect();
        let mut shots: Vec<usize> = group.iter().map(|r| r.2).collect();
        shots.sort_unstable();
        shots.dedup();
        for &shot in &shots {
            let values: Vec<f64> = group.iter().filter(|r| r.2 == shot).map(|r| r.3).collect();
            summaries.push(Summary {
                method: method.clone(),
                benchmark,
                shot: shot.to_string(),
                mean_ne: mean(&values),
                ci95: ci95(&values)?,
                n: values.len(),
            });
        }
        let all: Vec<f64> = group.iter().map(|r| r.3).collect();
        summaries.push(Summary {
            method: method.clone(),
            benchmark,
            shot: "mean".to_string(),
            mean_ne: mean(&all),
            ci95: ci95(&all)?,
            n: all.len(),
        });
    }
    Ok(summaries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_benchmark;
    use crate::meta::testutil::{small_model, small_render, small_stack, tiny_meta};

    fn tiny_eval() -> EvalConfig {
        EvalConfig { episodes_per_category: 2, query_size: 2, shots: vec![1, 3] }
    }

    fn scheme_two() -> BenchmarkSplit {
        build_benchmark(&Registry::standard(), 2, 0).unwrap()
    }

    #[test]
    fn episode_totals_follow_the_protocol() {
        let (base, predictor) = small_stack();
        let cfg = small_model();
        let mut mc = tiny_meta();
        mc.inner_steps = 1;
        let split = scheme_two();
        let spec = MethodSpec::Metacloth {
            base: &base,
            predictor: &predictor,
            theta: &base.encoder,
            mc: &mc,
            refine: true,
        };
        let ec = tiny_eval();
        let (results, summaries) = run_benchmark(
            &cfg, &small_render(), &Registry::standard(), &split, &spec, "metacloth", &ec, 33,
        )
        .unwrap();
        assert_eq!(results.len(), ec.shots.len() * split.unseen.len() * 2);
        for r in &results {
            assert_eq!(
                r.components.len(),
                ec.query_size * Registry::standard().get(r.category_id).unwrap().landmark_count()
            );
            assert!(r.ne >= 0.0);
        }
        // one row per shot plus the pooled row
        assert_eq!(summaries.len(), ec.shots.len() + 1);
        assert_eq!(summaries.last().unwrap().shot, "mean");
        assert_eq!(summaries.last().unwrap().n, results.len());
    }

    #[test]
    fn methods_share_identical_episode_seeds() {
        let (base, predictor) = small_stack();
        let cfg = small_model();
        let split = scheme_two();
        let ec = EvalConfig { episodes_per_category: 1, query_size: 1, shots: vec![1] };
        let wg = MethodSpec::Wg { base: &base, predictor: &predictor };
        let proto = MethodSpec::Proto { base: &base };
        let (ra, _) = run_benchmark(
            &cfg, &small_render(), &Registry::standard(), &split, &wg, "wg", &ec, 12,
        )
        .unwrap();
        let (rb, _) = run_benchmark(
            &cfg, &small_render(), &Registry::standard(), &split, &proto, "proto", &ec, 12,
        )
        .unwrap();
        let sa: Vec<u64> = ra.iter().map(|r| r.episode_seed).collect();
        let sb: Vec<u64> = rb.iter().map(|r| r.episode_seed).collect();
        assert_eq!(sa, sb);
    }

    #[test]
    fn summary_means_match_their_episodes() {
        let (base, _) = small_stack();
        let cfg = small_model();
        let split = scheme_two();
        let ec = tiny_eval();
        let spec = MethodSpec::Proto { base: &base };
        let (results, summaries) = run_benchmark(
            &cfg, &small_render(), &Registry::standard(), &split, &spec, "proto", &ec, 5,
        )
        .unwrap();
        for s in &summaries {
            let values: Vec<f64> = results
                .iter()
                .filter(|r| s.shot == "mean" || r.shot.to_string() == s.shot)
                .map(|r| r.ne)
                .collect();
            assert_eq!(s.n, values.len());
            assert_eq!(s.mean_ne.to_bits(), mean(&values).to_bits());
        }
    }

    #[test]
    fn same_seed_reproduces_results_exactly() {
        let (base, _) = small_stack();
        let cfg = small_model();
        let split = scheme_two();
        let ec = EvalConfig { episodes_per_category: 1, query_size: 2, shots: vec![2] };
        let fc = FtConfig { steps: 2, lr: 0.01 };
        let spec = MethodSpec::Ft { base: &base, fc: &fc };
        let run = |seed| {
            run_benchmark(
                &cfg, &small_render(), &Registry::standard(), &split, &spec, "ft", &ec, seed,
            )
            .unwrap()
            .0
        };
        let a = run(77);
        let b = run(77);
        let c = run(78);
        let nes = |rs: &[EpisodeResult]| rs.iter().map(|r| r.ne.to_bits()).collect::<Vec<_>>();
        assert_eq!(nes(&a), nes(&b));
        assert_ne!(nes(&a), nes(&c));
    }

    #[test]
    fn every_method_runs_on_every_unseen_category() {
        let (base, predictor) = small_stack();
        let cfg = small_model();
        let reg = Registry::standard();
        let mut mc = tiny_meta();
        mc.inner_steps = 1;
        let maml_params =
            crate::baselines::maml_init(&cfg, &base.encoder, 90).unwrap();
        let fc = FtConfig { steps: 1, lr: 0.01 };
        let specs: Vec<(MethodSpec, &str)> = vec![
            (
                MethodSpec::Metacloth {
                    base: &base,
                    predictor: &predictor,
                    theta: &base.encoder,
                    mc: &mc,
                    refine: true,
                },
                "metacloth",
            ),
            (MethodSpec::Ft { base: &base, fc: &fc }, "ft"),
            (MethodSpec::Maml { params: &maml_params, mc: &mc }, "maml"),
            (MethodSpec::Wg { base: &base, predictor: &predictor }, "wg"),
            (MethodSpec::Proto { base: &base }, "proto"),
        ];
        for (spec, name) in &specs {
            for category in reg.categories() {
                let episode =
                    sample_episode(&reg, category.id, 1, 1, &small_render(), 99).unwrap();
                let components =
                    evaluate_episode(&cfg, spec, category, &episode, 99).unwrap();
                assert_eq!(components.len(), category.landmark_count(), "{name}");
            }
        }
    }
}
