mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use vtt_core::data::{open_embedding_store, read_manifest, write_manifest, DatasetManifest, EmbeddingStore, Split};
use vtt_core::dataset::{assign_splits, build_samples, compute_stats, read_annotations, split_seen_unseen, DatasetStats};
use vtt_core::decoder::{read_predictions, write_predictions, Prediction, SamplingConfig, Vocabulary};
use vtt_core::diagnostics::{
    run_ablation_grid, run_context_retrain, run_context_suite, run_seen_unseen, AblationData, AblationGrid,
    ContextMode, ContextSuiteReport, MASK_RATIO_SWEEP, SAMPLE_RATIO_SWEEP,
};
use vtt_core::metrics::{evaluate_corpus, Metric, MetricReport, Scores};
use vtt_core::model::generate_split;
use vtt_core::synth::{generate, SyntheticTaskSpec};
use vtt_core::train::{train, write_log, Checkpoint};
use vtt_core::VttError;

use config::{echo, load, parse_metrics, parse_ratios, EvaluateOptions, GenerateOptions, SplitOptions, TrainOptions};

#[derive(Parser)]
#[command(name = "vtt", version, about = "Visual transformation telling toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Turn segment annotations into a split manifest.
    BuildDataset(BuildDatasetArgs),
    /// Write a synthetic manifest and embedding store.
    Synth(SynthArgs),
    /// Re-split a manifest and optionally write the seen/unseen partition.
    Split(SplitArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Describe every sample of a split.
    Generate(GenerateArgs),
    /// Score predictions against references.
    Evaluate(EvaluateArgs),
    /// Context-restriction and seen/unseen analyses of a trained model.
    Diagnose(DiagnoseArgs),
    /// Train and score one model per cell of an ablation grid.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct Common {
    /// JSON file with the command's options; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct BuildDatasetArgs {
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Train, val and test fractions, e.g. `0.8,0.1,0.1`.
    #[arg(long)]
    ratios: Option<String>,
    /// Print dataset statistics per split.
    #[arg(long)]
    stats: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SynthArgs {
    /// Task specification JSON; defaults are used when absent.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output directory for `manifest.jsonl`, `embeddings.bin` and `spec.json`.
    #[arg(long)]
    out: PathBuf,
    #[arg(short = 'n', long = "n-samples")]
    n: usize,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    ratios: Option<String>,
    /// Also write the seen/unseen partition of `--eval-split` here.
    #[arg(long)]
    seen_unseen: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    eval_split: Split,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    /// Output directory for checkpoints, the epoch log and the vocabulary.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    preset: Option<config::Preset>,
    #[arg(long)]
    no_diff: bool,
    #[arg(long)]
    no_mtm: bool,
    #[arg(long)]
    no_aux: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SamplingFlags {
    #[arg(long)]
    greedy: bool,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    top_p: Option<f64>,
    #[arg(long)]
    max_len: Option<usize>,
}

impl SamplingFlags {
    fn apply(&self, cfg: &mut SamplingConfig, seed: Option<u64>) {
        if self.greedy {
            *cfg = SamplingConfig {
                seed: cfg.seed,
                max_len: cfg.max_len,
                ..SamplingConfig::greedy()
            };
        }
        cfg.top_k = self.top_k.unwrap_or(cfg.top_k);
        cfg.top_p = self.top_p.unwrap_or(cfg.top_p);
        cfg.max_len = self.max_len.unwrap_or(cfg.max_len);
        cfg.seed = seed.unwrap_or(cfg.seed);
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    split: Option<Split>,
    /// Predictions JSONL.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    sampling: SamplingFlags,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    split: Option<Split>,
    /// Comma-separated subset of `bleu4,rougeL,cider,meteor`.
    #[arg(long)]
    metrics: Option<String>,
    /// Report JSON.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    split: Option<Split>,
    /// `full`, `adjacent_only`, `mask_one_random`, `endpoints_only`, `all`
    /// or `seen_unseen`.
    #[arg(long, default_value = "all")]
    setting: String,
    /// Also train on two-state sub-samples with the checkpoint's settings
    /// and report them under adjacent-only inference.
    #[arg(long)]
    retrain: bool,
    /// Report JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    sampling: SamplingFlags,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    /// `components`, `aux`, `fusion`, `mask-ratio` or `sample-ratio`.
    #[arg(long)]
    grid: String,
    /// Results JSON; finished cells found here are not rerun.
    #[arg(long)]
    results: PathBuf,
    #[arg(long, default_value = "val")]
    eval_split: Split,
    #[arg(long)]
    greedy: bool,
    #[command(flatten)]
    common: Common,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let core = e.chain().find_map(|c| c.downcast_ref::<VttError>());
            let kind = core.map_or("error", VttError::kind);
            let body = serde_json::json!({ "error": kind, "message": format!("{e:#}") });
            eprintln!("{body}");
            if core.is_some_and(VttError::is_validation) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::BuildDataset(a) => build_dataset(a),
        Command::Synth(a) => synth(a),
        Command::Split(a) => split(a),
        Command::Train(a) => train_cmd(a),
        Command::Generate(a) => generate_cmd(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Diagnose(a) => diagnose(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn split_options(common: &Common, ratios: Option<&str>) -> Result<SplitOptions> {
    let mut opts: SplitOptions = load(common.config.as_deref())?;
    if let Some(r) = ratios {
        opts.ratios = parse_ratios(r)?;
    }
    opts.seed = common.seed.unwrap_or(opts.seed);
    Ok(opts)
}

fn print_stats(manifest: &DatasetManifest) {
    let per: Vec<(&str, DatasetStats)> = Split::ALL
        .iter()
        .map(|&s| (s.as_str(), compute_stats(manifest, Some(s))))
        .chain([("total", compute_stats(manifest, None))])
        .collect();
    let cols: Vec<(&str, &DatasetStats)> = per.iter().map(|(n, s)| (*n, s)).collect();
    print!("{}", DatasetStats::table(&cols));
}

fn build_dataset(a: BuildDatasetArgs) -> Result<()> {
    let opts = split_options(&a.common, a.ratios.as_deref())?;
    echo("build-dataset", &opts);
    let samples = build_samples(&read_annotations(&a.annotations)?)?;
    let manifest = assign_splits(samples, opts.ratios, opts.seed)?;
    write_manifest(&manifest, &a.out)?;
    log::info!("wrote {} samples to {}", manifest.samples.len(), a.out.display());
    if a.stats {
        print_stats(&manifest);
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut spec: SyntheticTaskSpec = match (&a.spec, &a.common.config) {
        (Some(p), _) | (None, Some(p)) => load(Some(p))?,
        (None, None) => SyntheticTaskSpec::default(),
    };
    spec.seed = a.common.seed.unwrap_or(spec.seed);
    echo("synth", &serde_json::json!({ "spec": spec, "n_samples": a.n }));
    let (manifest, store) = generate(&spec, a.n)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_manifest(&manifest, &a.out.join("manifest.jsonl"))?;
    store.write(&a.out.join("embeddings.bin"))?;
    write_json(&a.out.join("spec.json"), &spec)?;
    log::info!("wrote {} synthetic samples to {}", manifest.samples.len(), a.out.display());
    Ok(())
}

fn split(a: SplitArgs) -> Result<()> {
    let opts = split_options(&a.common, a.ratios.as_deref())?;
    echo("split", &opts);
    let manifest = assign_splits(read_manifest(&a.manifest)?.samples, opts.ratios, opts.seed)?;
    write_manifest(&manifest, &a.out)?;
    for s in Split::ALL {
        println!("{s}: {}", manifest.split_len(s));
    }
    if let Some(path) = &a.seen_unseen {
        let parts = split_seen_unseen(&manifest, a.eval_split)?;
        println!(
            "{}: {} seen, {} unseen",
            a.eval_split,
            parts.seen_sample_ids.len(),
            parts.unseen_sample_ids.len()
        );
        write_json(path, &parts)?;
    }
    Ok(())
}

fn load_data(manifest: &Path, embeddings: &Path) -> Result<(DatasetManifest, EmbeddingStore)> {
    let manifest = read_manifest(manifest)?;
    let store = open_embedding_store(embeddings)?;
    Ok((manifest, store))
}

fn train_options(a: &TrainArgs) -> Result<TrainOptions> {
    let mut opts: TrainOptions = load(a.common.config.as_deref())?;
    let t = &mut opts.train;
    t.seed = a.common.seed.unwrap_or(t.seed);
    t.epochs = a.epochs.unwrap_or(t.epochs);
    t.max_steps = a.max_steps.or(t.max_steps);
    t.lr_peak = a.lr.unwrap_or(t.lr_peak);
    t.warmup_steps = a.warmup.unwrap_or(t.warmup_steps);
    t.batch_size = a.batch_size.unwrap_or(t.batch_size);
    t.toggles.diff &= !a.no_diff;
    t.toggles.mtm &= !a.no_mtm;
    t.toggles.aux &= !a.no_aux;
    opts.model.preset = a.preset.unwrap_or(opts.model.preset);
    Ok(opts)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let opts = train_options(&a)?;
    echo("train", &opts);
    let (manifest, store) = load_data(&a.manifest, &a.embeddings)?;
    manifest.validate()?;
    let corpus: Vec<&str> = manifest
        .split(Split::Train)
        .flat_map(|s| s.transformations.iter().map(String::as_str))
        .collect();
    let vocab = Vocabulary::build(&corpus, opts.min_freq)?;
    let model_cfg = opts
        .model
        .resolve(store.dim(), vocab.len(), manifest.categories.len(), manifest.topics.len());
    let outcome = train(&manifest, &store, &vocab, &model_cfg, &opts.train)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    outcome.best.save(&a.out.join("best.ckpt"))?;
    outcome.last.save(&a.out.join("last.ckpt"))?;
    write_log(&outcome.log, &a.out.join("train_log.jsonl"))?;
    vocab.write(&a.out.join("vocab.txt"))?;
    write_json(&a.out.join("config.json"), &serde_json::json!({ "options": opts, "model": model_cfg }))?;
    println!(
        "trained {} steps; best checkpoint epoch {} sha256 {}",
        outcome.step_losses.len(),
        outcome.best.epoch,
        outcome.best.hash()
    );
    Ok(())
}

fn generate_cmd(a: GenerateArgs) -> Result<()> {
    let mut opts: GenerateOptions = load(a.common.config.as_deref())?;
    opts.split = a.split.unwrap_or(opts.split);
    a.sampling.apply(&mut opts.sampling, a.common.seed);
    echo("generate", &opts);
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let (manifest, store) = load_data(&a.manifest, &a.embeddings)?;
    let results = generate_split(&ckpt.model, &ckpt.vocab, &manifest, &store, opts.split, &opts.sampling)?;
    let preds: Vec<Prediction> = results.iter().map(Prediction::from).collect();
    write_predictions(&preds, &a.out)?;
    log::info!("wrote {} predictions to {}", preds.len(), a.out.display());
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let mut opts: EvaluateOptions = load(a.common.config.as_deref())?;
    opts.split = a.split.unwrap_or(opts.split);
    if let Some(m) = &a.metrics {
        opts.metrics = parse_metrics(m)?;
    }
    echo("evaluate", &opts);
    let preds = read_predictions(&a.predictions)?;
    let manifest = read_manifest(&a.manifest)?;
    let report = evaluate_corpus(&preds, &manifest, opts.split, &opts.metrics)?;
    report.write(&a.out)?;
    println!("{}", header(&opts.metrics));
    println!("{}", row(opts.split.as_str(), &report.corpus, &opts.metrics));
    Ok(())
}

const METRIC_ORDER: [(Metric, &str); 4] = [
    (Metric::Bleu4, "B@4"),
    (Metric::Meteor, "M"),
    (Metric::RougeL, "R"),
    (Metric::Cider, "C"),
];

fn header(metrics: &[Metric]) -> String {
    let mut out = format!("{:<24}", "");
    for (m, name) in METRIC_ORDER {
        if metrics.contains(&m) {
            out += &format!("{name:>9}");
        }
    }
    out
}

fn row(label: &str, scores: &Scores, metrics: &[Metric]) -> String {
    let mut out = format!("{label:<24}");
    for (m, _) in METRIC_ORDER {
        if metrics.contains(&m) {
            out += &scores.get(m).map_or(format!("{:>9}", "-"), |v| format!("{v:>9.2}"));
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
struct DiagnoseOptions {
    split: Split,
    setting: String,
    retrain: bool,
    sampling: SamplingConfig,
    seed: u64,
}

fn diagnose(a: DiagnoseArgs) -> Result<()> {
    let mut gen: GenerateOptions = load(a.common.config.as_deref())?;
    gen.split = a.split.unwrap_or(gen.split);
    a.sampling.apply(&mut gen.sampling, a.common.seed);
    let opts = DiagnoseOptions {
        split: gen.split,
        setting: a.setting.clone(),
        retrain: a.retrain,
        sampling: gen.sampling,
        seed: a.common.seed.unwrap_or(0),
    };
    echo("diagnose", &opts);
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let (manifest, store) = load_data(&a.manifest, &a.embeddings)?;
    let metrics = Metric::ALL;

    if opts.setting == "seen_unseen" {
        let r = run_seen_unseen(&ckpt.model, &ckpt.vocab, &manifest, &store, opts.split, &opts.sampling, &metrics)?;
        println!("{}", header(&metrics));
        for (name, n, rep) in [("seen", r.n_seen, &r.seen), ("unseen", r.n_unseen, &r.unseen)] {
            match rep {
                Some(rep) => println!("{}", row(&format!("{name} ({n})"), &rep.corpus, &metrics)),
                None => println!("{name:<24}   empty partition"),
            }
        }
        if let Some(out) = &a.out {
            write_json(out, &r)?;
        }
        return Ok(());
    }

    let modes: Vec<ContextMode> = if opts.setting == "all" {
        ContextMode::ALL.to_vec()
    } else {
        vec![opts.setting.parse()?]
    };
    let mut report = run_context_suite(
        &ckpt.model,
        &ckpt.vocab,
        &manifest,
        &store,
        opts.split,
        &modes,
        opts.seed,
        &opts.sampling,
        &metrics,
    )?;
    if opts.retrain {
        let retrained: MetricReport = run_context_retrain(
            &manifest,
            &store,
            &ckpt.vocab,
            &ckpt.model.config,
            &ckpt.train,
            opts.split,
            &opts.sampling,
            &metrics,
        )?;
        report.push("adjacent_only_retrain", retrained);
    }
    print_context_table(&report, &metrics);
    if let Some(out) = &a.out {
        report.write(out)?;
    }
    Ok(())
}

fn print_context_table(report: &ContextSuiteReport, metrics: &[Metric]) {
    println!("{}{:>10}", header(metrics), "C drop");
    for r in &report.rows {
        let drop = r.relative_drop.cider.map_or("-".to_string(), |d| format!("{:.1}%", 100.0 * d));
        println!("{}{drop:>10}", row(&r.setting, &r.report.corpus, metrics));
    }
}

fn ablate(a: AblateArgs) -> Result<()> {
    let opts: TrainOptions = {
        let mut o: TrainOptions = load(a.common.config.as_deref())?;
        o.train.seed = a.common.seed.unwrap_or(o.train.seed);
        o
    };
    echo("ablate", &serde_json::json!({ "grid": a.grid, "base": opts, "eval_split": a.eval_split }));
    let base = &opts.train;
    let grid = match a.grid.as_str() {
        "components" => AblationGrid::components(base),
        "aux" => AblationGrid::aux_tasks(base),
        "fusion" => AblationGrid::diff_fusion(base),
        "mask-ratio" => AblationGrid::mask_ratios(base, &MASK_RATIO_SWEEP),
        "sample-ratio" => AblationGrid::sample_ratios(base, &SAMPLE_RATIO_SWEEP),
        other => bail!(VttError::Config(format!("unknown grid `{other}`"))),
    };
    let (manifest, store) = load_data(&a.manifest, &a.embeddings)?;
    let corpus: Vec<&str> = manifest
        .split(Split::Train)
        .flat_map(|s| s.transformations.iter().map(String::as_str))
        .collect();
    let vocab = Vocabulary::build(&corpus, opts.min_freq)?;
    let model_cfg = opts
        .model
        .resolve(store.dim(), vocab.len(), manifest.categories.len(), manifest.topics.len());
    let sampling = if a.greedy {
        SamplingConfig::greedy()
    } else {
        SamplingConfig::default()
    };
    let metrics = Metric::ALL;
    let data = AblationData {
        manifest: &manifest,
        store: &store,
        vocab: &vocab,
        eval_split: a.eval_split,
        sampling: &sampling,
        metrics: &metrics,
    };
    let results = run_ablation_grid(&grid, &model_cfg, &data, Some(&a.results))?;
    println!("{}", header(&metrics));
    for r in &results {
        let t = &r.config.toggles;
        let label = format!(
            "d{} m{} a{} {:.2}/{:.2}",
            u8::from(t.diff),
            u8::from(t.mtm),
            u8::from(t.aux),
            r.config.mtm.mask_ratio,
            r.config.mtm.sample_ratio
        );
        match (&r.scores, &r.error) {
            (Some(s), _) => println!("{}", row(&label, s, &metrics)),
            (None, e) => println!("{label:<24}   failed: {}", e.as_deref().unwrap_or("unknown")),
        }
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}
