//! Episodic evaluation: the normalized-error metric, the benchmark runner,
//! ablation variants, feature-similarity analysis, and file outputs.

mod ablate;
mod metrics;
mod report;
mod run;
mod similarity;

pub use ablate::{
    ablation_run, variant_spec, AblationArtifacts, AblationVariant, ALL_VARIANTS,
};
pub use metrics::{ci95, cosine, mean, ne_components, normalized_error};
pub use report::{
    coords_csv, dump_samples, episodes_csv, export_heatmaps, heatmap_pgm_bytes, image_pgm_bytes,
    labelmap_from_rle, labelmap_rle, similarity_csv, summaries_from_csv, summary_json,
    write_bytes, write_text, EPISODES_HEADER, SIMILARITY_HEADER,
};
pub use run::{
    episode_heatmaps, evaluate_episode, run_benchmark, summarize, summarize_rows,
    EpisodeResult, EvalConfig, Method, MethodSpec, Summary,
};
pub use similarity::{feature_similarity, SimilarityRow};
