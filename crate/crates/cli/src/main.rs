//! `mgn`: train, extract, evaluate and visualize Multiple Granularity
//! Network models.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 1 anything
//! else.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use mgn_core::data::{generate_synthetic, load_market_layout, Split, SyntheticConfig};
use mgn_core::eval::{
    euclidean_distances, evaluate, pool_query_rows, rerank, ItemMeta, PoolMode, Protocol, QueryMode, RerankConfig,
};
use mgn_core::infer::{extract, response_map_for_file, write_heatmap, ExtractOptions};
use mgn_core::model::WeightMapping;
use mgn_core::train::{latest_checkpoint, AblationVariant, Checkpoint, Trainer};
use mgn_core::{Error, FeatureMatrix, RankingReport, Result, RunConfig};

/// Name of the effective configuration copied into every run directory.
const RUN_CONFIG_COPY: &str = "config.toml";

#[derive(Parser)]
#[command(name = "mgn", version, about = "Multiple Granularity Network for person re-identification")]
struct Cli {
    /// Log level filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic Market-1501 style dataset.
    Synth(SynthArgs),
    /// Train a model from a run configuration.
    Train(TrainArgs),
    /// Extract retrieval features of one dataset split.
    Extract(ExtractArgs),
    /// Rank a gallery for a set of queries and report CMC/mAP.
    Eval(EvalArgs),
    /// Render branch response maps over an image.
    Heatmap(HeatmapArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset root.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    ids: usize,
    /// Training images per identity.
    #[arg(long, default_value_t = 16)]
    images_per_id: usize,
    #[arg(long, default_value_t = 384)]
    height: usize,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    query_per_id: usize,
    #[arg(long, default_value_t = 4)]
    gallery_per_id: usize,
    /// Junk gallery images.
    #[arg(long, default_value_t = 2)]
    junk: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Ablation variant replacing the configured branches and losses,
    /// e.g. "MGN w/o Part-3" or "w/ Part-4".
    #[arg(long)]
    variant: Option<String>,
    /// Continue from a checkpoint directory, or from the run's latest
    /// checkpoint when given without a value.
    #[arg(long, num_args = 0..=1, default_missing_value = "latest")]
    resume: Option<String>,
}

#[derive(Args)]
struct ExtractArgs {
    /// Checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root.
    #[arg(long)]
    dataset: PathBuf,
    /// train, query or gallery.
    #[arg(long)]
    split: Split,
    /// Output directory for the feature files.
    #[arg(long)]
    out: PathBuf,
    /// Base name of the feature files (defaults to the split name).
    #[arg(long)]
    name: Option<String>,
    /// Images decoded per chunk.
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
}

#[derive(Args)]
struct EvalArgs {
    /// Query features (`.feat.json`).
    #[arg(long)]
    query: PathBuf,
    /// Gallery features (`.feat.json`).
    #[arg(long)]
    gallery: PathBuf,
    /// Run configuration whose [eval] section supplies the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Apply k-reciprocal re-ranking.
    #[arg(long)]
    rerank: bool,
    #[arg(long)]
    k1: Option<usize>,
    #[arg(long)]
    k2: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Pool all query images of an identity and camera into one query.
    #[arg(long)]
    multi_query: bool,
    /// Multi-query pooling: avg or max.
    #[arg(long)]
    pool: Option<PoolMode>,
    /// Dataset name shown in the report.
    #[arg(long, default_value = "dataset")]
    dataset_name: String,
    /// Write the JSON report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct HeatmapArgs {
    /// Checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input image.
    #[arg(long)]
    image: PathBuf,
    /// Branch to render; repeat for several. Defaults to every branch.
    #[arg(long)]
    branch: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Heat overlay opacity in [0, 1].
    #[arg(long, default_value_t = 0.5)]
    alpha: f32,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Extract(a) => extract_split(a),
        Command::Eval(a) => eval(a),
        Command::Heatmap(a) => heatmap(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_config() {
        2
    } else if e.is_data() {
        3
    } else {
        1
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| io_err(path, e))
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        query_per_id: a.query_per_id,
        gallery_per_id: a.gallery_per_id,
        junk_gallery: a.junk,
        ..SyntheticConfig::new(a.ids, a.images_per_id, (a.height, a.width), a.seed)
    };
    let summary = generate_synthetic(&a.out, &cfg)?;
    println!(
        "wrote {} train, {} query, {} gallery images to {}",
        summary.train,
        summary.query,
        summary.gallery,
        a.out.display()
    );
    Ok(())
}

/// Paths in a config file are relative to the file's directory.
fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(name) = &a.variant {
        let variant: AblationVariant = name.parse()?;
        cfg.train = variant.apply(cfg.train);
        cfg.validate()?;
        log::info!("training variant {variant}");
    }
    let base = a.config.parent().unwrap_or(Path::new("."));
    let dataset_root = resolve(base, &cfg.paths.dataset);
    let run_dir = resolve(base, &cfg.paths.run_dir);
    let dataset = load_market_layout(&dataset_root)?;
    log::info!(
        "{}: {} identities, {} train / {} query / {} gallery images",
        dataset_root.display(),
        dataset.meta.num_identities,
        dataset.meta.counts.train,
        dataset.meta.counts.query,
        dataset.meta.counts.gallery
    );

    let mut trainer = match &a.resume {
        None => {
            let mut t = Trainer::new(cfg.train.clone(), &dataset, &run_dir)?;
            if let Some(archive) = &cfg.paths.pretrained {
                let report = t.load_pretrained(&resolve(base, archive), &WeightMapping::torchvision_resnet50())?;
                log::info!(
                    "pretrained weights: {} assigned, {} unused, {} missing",
                    report.assigned,
                    report.unused.len(),
                    report.missing.len()
                );
            }
            t
        }
        Some(which) => {
            let ckpt = if which == "latest" {
                latest_checkpoint(&run_dir)?
                    .ok_or_else(|| Error::Data(format!("no checkpoint under {}", run_dir.display())))?
            } else {
                Checkpoint::open(which)?
            };
            Trainer::resume(cfg.train.clone(), &dataset, &run_dir, &ckpt)?
        }
    };
    let copy = run_dir.join(RUN_CONFIG_COPY);
    let header = format!("# run config hash {}\n", cfg.hash());
    fs::write(&copy, header + &cfg.to_toml()).map_err(|e| io_err(&copy, e))?;

    let outcome = trainer.run()?;
    match (outcome.history.last(), &outcome.last_checkpoint) {
        (Some(last), Some(ckpt)) => println!(
            "step {} loss {:.4}; checkpoint {}",
            last.step,
            last.report.total,
            ckpt.display()
        ),
        _ => println!("nothing to do: run already finished at step {}", trainer.step_count()),
    }
    Ok(())
}

fn extract_split(a: ExtractArgs) -> Result<()> {
    let ckpt = Checkpoint::open(&a.checkpoint)?;
    let model = ckpt.load_model()?;
    let dataset = load_market_layout(&a.dataset)?;
    let records: Vec<_> = dataset.split(a.split).cloned().collect();
    if records.is_empty() {
        log::warn!("split {} of {} is empty; writing an empty feature file", a.split, a.dataset.display());
    }
    let opts = ExtractOptions {
        batch_size: a.batch_size,
        checkpoint_hash: Some(ckpt.weights_hash()?),
        config_hash: Some(ckpt.state.config_hash.clone()),
    };
    let features = extract(&model, &records, &opts)?;
    let name = a.name.unwrap_or_else(|| a.split.to_string());
    let json = features.save(&a.out, &name)?;
    println!("{} x {} features -> {}", features.rows(), features.dim, json.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    query: &'a Path,
    gallery: &'a Path,
    model_hash: &'a str,
    checkpoint_hash: Option<&'a str>,
    config_hash: Option<&'a str>,
    rerank: Option<RerankConfig>,
    #[serde(flatten)]
    report: &'a RankingReport,
}

/// Feature files must come from the same architecture and, when both
/// record it, the same training configuration.
fn check_compatible(q: &FeatureMatrix, g: &FeatureMatrix) -> Result<()> {
    if q.model_hash != g.model_hash {
        return Err(Error::Config(format!(
            "query features come from model {} but gallery features from model {}",
            q.model_hash, g.model_hash
        )));
    }
    if let (Some(a), Some(b)) = (&q.config_hash, &g.config_hash) {
        if a != b {
            return Err(Error::Config(format!(
                "query features were produced under config {a}, gallery features under config {b}"
            )));
        }
    }
    if q.dim != g.dim {
        return Err(Error::Data(format!("feature widths differ: {} vs {}", q.dim, g.dim)));
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let settings = match &a.config {
        Some(path) => RunConfig::load(path)?.eval,
        None => Default::default(),
    };
    let q = FeatureMatrix::load(&a.query)?;
    let g = FeatureMatrix::load(&a.gallery)?;
    check_compatible(&q, &g)?;

    let query_meta: Vec<ItemMeta> = q.records.iter().map(Into::into).collect();
    let gallery_meta: Vec<ItemMeta> = g.records.iter().map(Into::into).collect();
    let multi = a.multi_query || settings.multi_query;
    let pool = a.pool.unwrap_or(settings.pool);
    let (query_data, query_meta, query_mode) = if multi {
        let (data, meta) = pool_query_rows(&q.data, q.dim, &query_meta, pool)?;
        (data, meta, QueryMode::Multi(pool))
    } else {
        (q.data.clone(), query_meta, QueryMode::Single)
    };

    let reranked = a.rerank || settings.rerank;
    let rerank_cfg = RerankConfig {
        k1: a.k1.unwrap_or(settings.rerank_params.k1),
        k2: a.k2.unwrap_or(settings.rerank_params.k2),
        lambda: a.lambda.unwrap_or(settings.rerank_params.lambda),
    };
    let mut dist = euclidean_distances(&query_data, &g.data, g.dim)?;
    if reranked {
        let qq = euclidean_distances(&query_data, &query_data, g.dim)?;
        let gg = euclidean_distances(&g.data, &g.data, g.dim)?;
        dist = rerank(&dist, &qq, &gg, &rerank_cfg)?;
    }
    let protocol = Protocol {
        dataset: a.dataset_name.clone(),
        query_mode,
        reranked,
    };
    let report = evaluate(&dist, &query_meta, &gallery_meta, &protocol)?;
    print!("{}", report.table());
    if report.dropped_queries > 0 {
        log::warn!("{} queries had no valid gallery match and were skipped", report.dropped_queries);
    }
    if let Some(path) = &a.report {
        let out = EvalOutput {
            query: &a.query,
            gallery: &a.gallery,
            model_hash: &q.model_hash,
            checkpoint_hash: q.checkpoint_hash.as_deref(),
            config_hash: q.config_hash.as_deref(),
            rerank: reranked.then_some(rerank_cfg),
            report: &report,
        };
        write_json(path, &out)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct HeatmapIndex {
    checkpoint: PathBuf,
    image: PathBuf,
    config_hash: String,
    model_hash: String,
    files: Vec<PathBuf>,
}

fn heatmap(a: HeatmapArgs) -> Result<()> {
    let ckpt = Checkpoint::open(&a.checkpoint)?;
    let model = ckpt.load_model()?;
    let branches: Vec<String> = if a.branch.is_empty() {
        model.config().branch_names().into_iter().map(String::from).collect()
    } else {
        a.branch.clone()
    };
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    let stem = a.image.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
    let mut files = Vec::new();
    for branch in &branches {
        let map = response_map_for_file(&model, &a.image, branch)?;
        let path = a.out.join(format!("{stem}-{branch}.png"));
        write_heatmap(&map, model.config().input_size, a.alpha, &path)?;
        println!("{branch}: {}x{} map -> {}", map.height, map.width, path.display());
        files.push(path);
    }
    let index = HeatmapIndex {
        checkpoint: a.checkpoint.clone(),
        image: a.image.clone(),
        config_hash: ckpt.state.config_hash.clone(),
        model_hash: model.config().hash(),
        files,
    };
    write_json(&a.out.join(format!("{stem}-heatmaps.json")), &index)
}
