use fewmark_autodiff::ParamSet;

use crate::data::{BenchmarkSplit, Registry, RenderConfig};
use crate::error::{Error, Result};
use crate::meta::{BaseModel, MetaConfig};
use crate::model::ModelConfig;

use super::run::{run_benchmark, EpisodeResult, EvalConfig, MethodSpec, Summary};

/// Which pieces of the full method are disabled:
/// - `BaseFen*` evaluates from the pretrained encoder instead of the
///   meta-learned initialization,
/// - `LdKeep*` uses an initialization meta-trained without the detector
///   re-prediction step,
/// - the `*Delta` forms additionally skip the detector update at test time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationVariant {
    Full,
    BaseFen,
    BaseFenDelta,
    LdKeep,
    LdKeepDelta,
}

pub const ALL_VARIANTS: [AblationVariant; 5] = [
    AblationVariant::Full,
    AblationVariant::BaseFen,
    AblationVariant::BaseFenDelta,
    AblationVariant::LdKeep,
    AblationVariant::LdKeepDelta,
];

impl AblationVariant {
    pub fn parse(s: &str) -> Result<AblationVariant> {
        match s {
            "full" => Ok(AblationVariant::Full),
            "base_fen" => Ok(AblationVariant::BaseFen),
            "base_fen_delta" => Ok(AblationVariant::BaseFenDelta),
            "ld_keep" => Ok(AblationVariant::LdKeep),
            "ld_keep_delta" => Ok(AblationVariant::LdKeepDelta),
            other => Err(Error::usage(format!(
                "unknown ablation variant {other:?}; expected full, base_fen, base_fen_delta, ld_keep, or ld_keep_delta"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::BaseFen => "base_fen",
            AblationVariant::BaseFenDelta => "base_fen_delta",
            AblationVariant::LdKeep => "ld_keep",
            AblationVariant::LdKeepDelta => "ld_keep_delta",
        }
    }

    pub fn refines_detectors_at_test(self) -> bool {
        matches!(
            self,
            AblationVariant::Full | AblationVariant::BaseFen | AblationVariant::LdKeep
        )
    }
}

/// Everything the ablation sweep needs: the shared frozen artifacts plus both
/// meta-trained initializations.
pub struct AblationArtifacts<'a> {
    pub base: &'a BaseModel,
    pub predictor: &'a ParamSet,
    pub theta_full: &'a ParamSet,
    pub theta_keep: &'a ParamSet,
}

/// Maps a variant to the evaluation spec it shares with the standard runner.
pub fn variant_spec<'a>(
    variant: AblationVariant,
    artifacts: &AblationArtifacts<'a>,
    mc: &'a MetaConfig,
) -> MethodSpec<'a> {
    let theta = match variant {
        AblationVariant::Full => artifacts.theta_full,
        AblationVariant::BaseFen | AblationVariant::BaseFenDelta => &artifacts.base.encoder,
        AblationVariant::LdKeep | AblationVariant::LdKeepDelta => artifacts.theta_keep,
    };
    MethodSpec::Metacloth {
        base: artifacts.base,
        predictor: artifacts.predictor,
        theta,
        mc,
        refine: variant.refines_detectors_at_test(),
    }
}

/// Runs the episodic protocol once per variant over the same seeded episodes.
#[allow(clippy::too_many_arguments)]
pub fn ablation_run(
    cfg: &ModelConfig,
    rc: &RenderConfig,
    registry: &Registry,
    split: &BenchmarkSplit,
    artifacts: &AblationArtifacts,
    variants: &[AblationVariant],
    mc: &MetaConfig,
    ec: &EvalConfig,
    seed: u64,
) -> Result<(Vec<EpisodeResult>, Vec<Summary>)> {
    let mut results = Vec::new();
    let mut summaries = Vec::new();
    for &variant in variants {
        let spec = variant_spec(variant, artifacts, mc);
        let (mut r, mut s) = run_benchmark(
            cfg,
            rc,
            registry,
            split,
            &spec,
            variant.as_str(),
            ec,
            seed,
        )?;
        results.append(&mut r);
        summaries.append(&mut s);
    }
    Ok((results, summaries))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_benchmark;
    use crate::meta::testutil::{
        small_model, small_render, small_stack, tiny_base, tiny_meta, tiny_predictor,
    };

    #[test]
    fn variant_names_round_trip() {
        for v in ALL_VARIANTS {
            assert_eq!(AblationVariant::parse(v.as_str()).unwrap(), v);
        }
        assert!(AblationVariant::parse("fen").is_err());
    }

    #[test]
    fn full_variant_matches_the_standard_runner() {
        let (base, predictor) = small_stack();
        let cfg = small_model();
        let reg = Registry::standard();
        let split = build_benchmark(&reg, 2, 0).unwrap();
        let mut mc = tiny_meta();
        mc.inner_steps = 1;
        let ec = EvalConfig { episodes_per_category: 1, query_size: 1, shots: vec![2] };
        let artifacts = AblationArtifacts {
            base: &base,
            predictor: &predictor,
            theta_full: &base.encoder,
            theta_keep: &base.encoder,
        };
        let (ablation, _) = ablation_run(
            &cfg, &small_render(), &reg, &split, &artifacts,
            &[AblationVariant::Full], &mc, &ec, 3,
        )
        .unwrap();
        let spec = MethodSpec::Metacloth {
            base: &base,
            predictor: &predictor,
            theta: &base.encoder,
            mc: &mc,
            refine: true,
        };
        let (standard, _) = run_benchmark(
            &cfg, &small_render(), &reg, &split, &spec, "metacloth", &ec, 3,
        )
        .unwrap();
        assert_eq!(ablation.len(), standard.len());
        for (a, b) in ablation.iter().zip(&standard) {
            assert_eq!(a.episode_seed, b.episode_seed);
            assert_eq!(a.ne.to_bits(), b.ne.to_bits());
        }
    }

    #[test]
    fn delta_variants_skip_the_test_time_detector_update() {
        assert!(AblationVariant::Full.refines_detectors_at_test());
        assert!(AblationVariant::BaseFen.refines_detectors_at_test());
        assert!(AblationVariant::LdKeep.refines_detectors_at_test());
        assert!(!AblationVariant::BaseFenDelta.refines_detectors_at_test());
        assert!(!AblationVariant::LdKeepDelta.refines_detectors_at_test());
    }

    #[test]
    fn variants_pick_the_right_initialization() {
        let (base, _) = tiny_base();
        let (predictor, _) = tiny_predictor();
        let mc = tiny_meta();
        let theta_full = base.encoder.detached();
        let theta_keep = base.encoder.detached();
        let artifacts = AblationArtifacts {
            base: &base,
            predictor: &predictor,
            theta_full: &theta_full,
            theta_keep: &theta_keep,
        };
        for v in ALL_VARIANTS {
            let spec = variant_spec(v, &artifacts, &mc);
            let MethodSpec::Metacloth { theta, refine, .. } = spec else {
                panic!("ablation must share the standard evaluation path");
            };
            let expected: *const _ = match v {
                AblationVariant::Full => artifacts.theta_full,
                AblationVariant::BaseFen | AblationVariant::BaseFenDelta => &base.encoder,
                _ => artifacts.theta_keep,
            };
            assert!(std::ptr::eq(theta, expected), "{v:?}");
            assert_eq!(refine, v.refines_detectors_at_test(), "{v:?}");
        }
    }
}
