//! Command-line surface: data dumping, the three training stages, episodic
//! evaluation, ablations, and feature-similarity analysis.

mod config;

pub use config::{parse_usize_list, Settings};

use std::path::{Path, PathBuf};
use std::process;

use clap::{Args, Parser, Subcommand};
use fewmark_autodiff::{seed_chain, ParamSet};

use crate::baselines::maml_train;
use crate::data::{build_benchmark, BenchmarkSplit, Registry};
use crate::error::{Error, Result};
use crate::eval::{
    ablation_run, dump_samples, episode_heatmaps, episodes_csv, export_heatmaps,
    feature_similarity, run_benchmark, similarity_csv, summary_json, write_text, Method,
    MethodSpec, Summary, ALL_VARIANTS,
};
use crate::meta::{
    meta_train, train_base, train_predictor, BaseModel, MetaVariant, Order,
};
use crate::model::{load_paramset, save_paramset};

#[derive(Parser)]
#[command(
    name = "fewmark",
    version,
    about = "Few-shot garment-landmark detection on a procedural benchmark"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Shared {
    /// Settings file of `key = value` lines; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Benchmark scheme: 1 mixed-region, 2 upper-to-lower, 3 few-to-many
    /// landmarks, 4 random split.
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(1..=4))]
    benchmark: u8,
    /// Directory for outputs; training artifacts are read back from here.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Render deterministic samples per category to disk.
    GenData {
        #[command(flatten)]
        shared: Shared,
    },
    /// Supervised pretraining of the encoder and per-category detectors on
    /// the seen split.
    TrainBase {
        #[command(flatten)]
        shared: Shared,
    },
    /// Train the detector predictor against the frozen base model.
    TrainPpnet {
        #[command(flatten)]
        shared: Shared,
    },
    /// Meta-train the encoder initialization, or the joint model for
    /// `--method maml`.
    MetaTrain {
        #[command(flatten)]
        shared: Shared,
        #[arg(long, default_value = "metacloth")]
        method: String,
        /// Outer-gradient mode: second differentiates through the inner
        /// updates, first treats them as constants.
        #[arg(long)]
        order: Option<String>,
        /// "full" re-predicts detectors from adapted features; "keep"
        /// skips that step (the LD-Keep ablation initialization).
        #[arg(long, default_value = "full")]
        variant: String,
        /// Encoder starting point: "base" warm-starts from the supervised
        /// encoder, "random" draws a fresh one.
        #[arg(long, default_value = "base")]
        init: String,
    },
    /// Episodic evaluation of one method over the unseen split.
    Eval {
        #[command(flatten)]
        shared: Shared,
        #[arg(long, default_value = "metacloth")]
        method: String,
        /// Comma-separated shot counts.
        #[arg(long)]
        shots: Option<String>,
    },
    /// Evaluate every ablation variant on identical episodes.
    Ablate {
        #[command(flatten)]
        shared: Shared,
        #[arg(long, default_value = "8")]
        shots: String,
    },
    /// Per-category cosine similarity of pooled landmark features across
    /// adaptation, for the full method and two ablations.
    Similarity {
        #[command(flatten)]
        shared: Shared,
        /// Shot count for the analysed episodes (first entry is used).
        #[arg(long, default_value = "8")]
        shots: String,
    },
}

/// Parses arguments, runs the command, and exits with 0 on success,
/// 1 for usage errors, 2 for data or checkpoint errors, 3 for numerical
/// failures.
pub fn run_main() -> ! {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            process::exit(code);
        }
    };
    match run(cli) {
        Ok(()) => process::exit(0),
        Err(e) => {
            eprintln!("error: {e}");
            process::exit(e.exit_code());
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { shared } => gen_data(&shared),
        Command::TrainBase { shared } => cmd_train_base(&shared),
        Command::TrainPpnet { shared } => cmd_train_ppnet(&shared),
        Command::MetaTrain { shared, method, order, variant, init } => {
            cmd_meta_train(&shared, &method, order.as_deref(), &variant, &init)
        }
        Command::Eval { shared, method, shots } => cmd_eval(&shared, &method, shots.as_deref()),
        Command::Ablate { shared, shots } => cmd_ablate(&shared, &shots),
        Command::Similarity { shared, shots } => cmd_similarity(&shared, &shots),
    }
}

struct Context {
    settings: Settings,
    registry: Registry,
    split: BenchmarkSplit,
    seed: u64,
    out: PathBuf,
}

impl Context {
    fn new(shared: &Shared) -> Result<Context> {
        let settings = match &shared.config {
            Some(path) => Settings::load(path)?,
            None => Settings::standard(),
        };
        let registry = Registry::standard();
        let split = build_benchmark(&registry, shared.benchmark, shared.seed)?;
        Ok(Context {
            settings,
            registry,
            split,
            seed: shared.seed,
            out: shared.out.clone(),
        })
    }

    fn base_path(&self) -> PathBuf {
        self.out.join("base.fmps")
    }

    fn predictor_path(&self) -> PathBuf {
        self.out.join("predictor.fmps")
    }

    fn theta_path(&self, variant: MetaVariant) -> PathBuf {
        match variant {
            MetaVariant::Full => self.out.join("theta.fmps"),
            MetaVariant::KeepDetectors => self.out.join("theta_keep.fmps"),
        }
    }

    fn maml_path(&self) -> PathBuf {
        self.out.join("maml.fmps")
    }

    fn load_base(&self) -> Result<BaseModel> {
        BaseModel::load(&self.base_path(), &self.registry)
    }

    fn load_predictor(&self) -> Result<ParamSet> {
        load_paramset(&self.predictor_path())
    }

    fn load_theta(&self, variant: MetaVariant) -> Result<ParamSet> {
        load_paramset(&self.theta_path(variant))
    }
}

fn mean_of(values: &[f64]) -> f64 {
    if values.is_empty() {
        f64::NAN
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

fn gen_data(shared: &Shared) -> Result<()> {
    let ctx = Context::new(shared)?;
    dump_samples(
        &ctx.registry,
        &ctx.settings.render,
        &ctx.out,
        ctx.settings.gen_samples,
        ctx.seed,
    )?;
    println!(
        "wrote {} samples per category under {}",
        ctx.settings.gen_samples,
        ctx.out.display()
    );
    Ok(())
}

fn cmd_train_base(shared: &Shared) -> Result<()> {
    let ctx = Context::new(shared)?;
    let (base, losses) = train_base(
        &ctx.settings.model,
        &ctx.settings.render,
        &ctx.registry,
        &ctx.split.seen,
        &ctx.settings.base,
        seed_chain(&[ctx.seed, 11]),
    )?;
    let path = ctx.base_path();
    base.save(&path)?;
    println!(
        "trained base model on categories {:?}: {} steps, final loss {:.4}",
        ctx.split.seen,
        losses.len(),
        losses.last().copied().unwrap_or(f64::NAN)
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_train_ppnet(shared: &Shared) -> Result<()> {
    let ctx = Context::new(shared)?;
    let base = ctx.load_base()?;
    let (predictor, losses) = train_predictor(
        &ctx.settings.model,
        &ctx.settings.render,
        &ctx.registry,
        &base,
        &ctx.split.seen,
        &ctx.settings.meta,
        seed_chain(&[ctx.seed, 12]),
    )?;
    let path = ctx.predictor_path();
    save_paramset(&path, &predictor)?;
    let tail = losses.len() / 10;
    println!(
        "trained detector predictor: {} tasks, mean loss over final tenth {:.4}",
        losses.len(),
        mean_of(&losses[losses.len() - tail.max(1)..])
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_meta_train(
    shared: &Shared,
    method: &str,
    order: Option<&str>,
    variant: &str,
    init: &str,
) -> Result<()> {
    let mut ctx = Context::new(shared)?;
    if let Some(order) = order {
        ctx.settings.meta.order = Order::parse(order)?;
    }
    let encoder_init = |ctx: &Context, base: &BaseModel, seed: u64| -> Result<ParamSet> {
        match init {
            "base" => Ok(base.encoder.clone()),
            "random" => crate::model::init_encoder(
                &ctx.settings.model,
                &mut fewmark_autodiff::Rng::derive(seed, &[2]),
            ),
            other => Err(Error::usage(format!(
                "unknown init {other:?}; expected base or random"
            ))),
        }
    };
    match Method::parse(method)? {
        Method::Metacloth => {
            let variant = match variant {
                "full" => MetaVariant::Full,
                "keep" | "keep_detectors" => MetaVariant::KeepDetectors,
                other => {
                    return Err(Error::usage(format!(
                        "unknown variant {other:?}; expected full or keep"
                    )))
                }
            };
            let base = ctx.load_base()?;
            let predictor = ctx.load_predictor()?;
            let train_seed = seed_chain(&[ctx.seed, 13]);
            let theta_init = encoder_init(&ctx, &base, train_seed)?;
            let (theta, losses) = meta_train(
                &ctx.settings.model,
                &ctx.settings.render,
                &ctx.registry,
                &base,
                &predictor,
                &ctx.split.seen,
                &ctx.settings.meta,
                variant,
                &theta_init,
                train_seed,
            )?;
            let path = ctx.theta_path(variant);
            save_paramset(&path, &theta)?;
            let tail = (losses.len() / 10).max(1);
            println!(
                "meta-trained initialization ({} order, {} tasks), mean query loss over final tenth {:.4}",
                ctx.settings.meta.order.as_str(),
                losses.len(),
                mean_of(&losses[losses.len().saturating_sub(tail)..])
            );
            println!("wrote {}", path.display());
        }
        Method::Maml => {
            let base = ctx.load_base()?;
            let train_seed = seed_chain(&[ctx.seed, 14]);
            let maml_init = encoder_init(&ctx, &base, train_seed)?;
            let (params, losses) = maml_train(
                &ctx.settings.model,
                &ctx.settings.render,
                &ctx.registry,
                &ctx.split.seen,
                &ctx.settings.meta,
                &maml_init,
                train_seed,
            )?;
            let path = ctx.maml_path();
            save_paramset(&path, &params)?;
            let tail = (losses.len() / 10).max(1);
            println!(
                "meta-trained joint model ({} order, {} tasks), mean query loss over final tenth {:.4}",
                ctx.settings.meta.order.as_str(),
                losses.len(),
                mean_of(&losses[losses.len().saturating_sub(tail)..])
            );
            println!("wrote {}", path.display());
        }
        other => {
            return Err(Error::usage(format!(
                "method {} has no meta-training stage",
                other.as_str()
            )))
        }
    }
    Ok(())
}

fn print_summaries(summaries: &[Summary]) {
    println!("method,benchmark,shot,mean_ne,ci95,n");
    for s in summaries {
        println!(
            "{},{},{},{:.4},{:.4},{}",
            s.method, s.benchmark, s.shot, s.mean_ne, s.ci95, s.n
        );
    }
}

fn write_results(
    out: &Path,
    results: &[crate::eval::EpisodeResult],
    summaries: &[Summary],
) -> Result<()> {
    let csv_path = out.join("episodes.csv");
    write_text(&csv_path, &episodes_csv(results))?;
    let json_path = out.join("summary.json");
    write_text(&json_path, &summary_json(summaries)?)?;
    println!("wrote {}", csv_path.display());
    println!("wrote {}", json_path.display());
    Ok(())
}

fn cmd_eval(shared: &Shared, method: &str, shots: Option<&str>) -> Result<()> {
    let mut ctx = Context::new(shared)?;
    if let Some(shots) = shots {
        ctx.settings.eval.shots = parse_usize_list(shots)?;
    }
    let method = Method::parse(method)?;
    let base = ctx.load_base()?;
    // artifacts beyond the base model depend on the method
    let predictor = match method {
        Method::Metacloth | Method::Wg => Some(ctx.load_predictor()?),
        _ => None,
    };
    let theta = match method {
        Method::Metacloth => Some(ctx.load_theta(MetaVariant::Full)?),
        _ => None,
    };
    let maml_params = match method {
        Method::Maml => Some(load_paramset(&ctx.maml_path())?),
        _ => None,
    };
    let spec = match method {
        Method::Metacloth => MethodSpec::Metacloth {
            base: &base,
            predictor: predictor.as_ref().expect("loaded above"),
            theta: theta.as_ref().expect("loaded above"),
            mc: &ctx.settings.meta,
            refine: true,
        },
        Method::Ft => MethodSpec::Ft { base: &base, fc: &ctx.settings.ft },
        Method::Maml => MethodSpec::Maml {
            params: maml_params.as_ref().expect("loaded above"),
            mc: &ctx.settings.meta,
        },
        Method::Wg => MethodSpec::Wg {
            base: &base,
            predictor: predictor.as_ref().expect("loaded above"),
        },
        Method::Proto => MethodSpec::Proto { base: &base },
    };
    let (results, summaries) = run_benchmark(
        &ctx.settings.model,
        &ctx.settings.render,
        &ctx.registry,
        &ctx.split,
        &spec,
        method.as_str(),
        &ctx.settings.eval,
        ctx.seed,
    )?;
    write_results(&ctx.out, &results, &summaries)?;
    export_first_episode_heatmaps(&ctx, &spec)?;
    print_summaries(&summaries);
    Ok(())
}

/// One heatmap set per unseen category, from the first evaluated episode's
/// first query.
fn export_first_episode_heatmaps(ctx: &Context, spec: &MethodSpec) -> Result<()> {
    let shot = ctx.settings.eval.shots[0];
    for &category_id in &ctx.split.unseen {
        let category = ctx.registry.get(category_id)?;
        let episode_seed = seed_chain(&[
            ctx.seed,
            ctx.split.scheme as u64,
            category_id as u64,
            shot as u64,
            0,
        ]);
        let episode = crate::data::sample_episode(
            &ctx.registry,
            category_id,
            shot,
            ctx.settings.eval.query_size,
            &ctx.settings.render,
            episode_seed,
        )?;
        if let Some(heatmaps) =
            episode_heatmaps(&ctx.settings.model, spec, category, &episode, episode_seed)?
        {
            export_heatmaps(&heatmaps, &ctx.out.join("heatmaps").join(&category.name))?;
        }
    }
    Ok(())
}

fn cmd_ablate(shared: &Shared, shots: &str) -> Result<()> {
    let mut ctx = Context::new(shared)?;
    ctx.settings.eval.shots = parse_usize_list(shots)?;
    let base = ctx.load_base()?;
    let predictor = ctx.load_predictor()?;
    let theta_full = ctx.load_theta(MetaVariant::Full)?;
    let theta_keep = ctx.load_theta(MetaVariant::KeepDetectors)?;
    let artifacts = crate::eval::AblationArtifacts {
        base: &base,
        predictor: &predictor,
        theta_full: &theta_full,
        theta_keep: &theta_keep,
    };
    let (results, summaries) = ablation_run(
        &ctx.settings.model,
        &ctx.settings.render,
        &ctx.registry,
        &ctx.split,
        &artifacts,
        &ALL_VARIANTS,
        &ctx.settings.meta,
        &ctx.settings.eval,
        ctx.seed,
    )?;
    write_results(&ctx.out, &results, &summaries)?;
    print_summaries(&summaries);
    Ok(())
}

fn cmd_similarity(shared: &Shared, shots: &str) -> Result<()> {
    let ctx = Context::new(shared)?;
    let shot = parse_usize_list(shots)?[0];
    let base = ctx.load_base()?;
    let predictor = ctx.load_predictor()?;
    let theta_full = ctx.load_theta(MetaVariant::Full)?;
    let theta_keep = ctx.load_theta(MetaVariant::KeepDetectors)?;
    let variants: [(&str, &ParamSet); 3] = [
        ("metacloth", &theta_full),
        ("base_fen", &base.encoder),
        ("ld_keep", &theta_keep),
    ];
    let mut rows = Vec::new();
    for (name, theta) in variants {
        let report = feature_similarity(
            &ctx.settings.model,
            &ctx.settings.render,
            &ctx.registry,
            &ctx.split.unseen,
            &base,
            &predictor,
            theta,
            &ctx.settings.meta,
            true,
            shot,
            ctx.settings.similarity_episodes,
            ctx.seed,
        )?;
        rows.extend(report.into_iter().map(|r| (name.to_string(), r)));
    }
    let path = ctx.out.join("similarity.csv");
    write_text(&path, &similarity_csv(&rows))?;
    println!("wrote {}", path.display());
    for (variant, row) in &rows {
        println!(
            "{variant} category {}: same-landmark {:.4}, cross-landmark {:.4} over {} episodes",
            row.category_id, row.same_landmark, row.cross_landmark, row.episodes
        );
    }
    Ok(())
}
