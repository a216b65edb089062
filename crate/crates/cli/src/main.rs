use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fsaug::classifier::{evaluate_accuracy, Classifier, FinetuneRegime, RegimeKind};
use fsaug::dataset::{load_image_directory, write_image_directory};
use fsaug::gan::{DFinetuneMode, GFinetuneMode};
use fsaug::harness::{classifier_cell_id, gan_cell_id, render_report, run_pipeline, GanCell, RecordFile, RunConfig, Workspace};
use fsaug::metrics::{extract_features, fit_gaussian, frechet_distance, knn_precision_recall, sample_generator};
use fsaug::training::GanCheckpoint;
use serde_json::json;

/// Few-shot GAN data augmentation workbench.
///
/// Artifacts go under the configured `output_dir`, or under
/// `$FSAUG_ARTIFACT_ROOT` when that is set. Stages that need earlier
/// artifacts compute and store them first if they are missing.
#[derive(Parser)]
#[command(name = "fsaug", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration value by dotted path, e.g. `gan_pretrain.max_steps=200`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Split classes into source and target sets for a dataset seed.
    Split(SeedArg),
    /// Pre-train the classifier on the source classes.
    PretrainClassifier(SeedArg),
    /// Pre-train the conditional GAN on the source classes.
    PretrainGan(SeedArg),
    /// Fine-tune the pre-trained GAN on a k-shot support set.
    FinetuneGan(FinetuneGanArgs),
    /// Sample a GAN checkpoint into a class-per-directory PNG tree.
    Generate(GenerateArgs),
    /// Fine-tune the classifier head on the target classes under one regime.
    FinetuneClassifier(FinetuneClassifierArgs),
    /// Accuracy of a saved classifier on the valid or test split.
    Evaluate(EvaluateArgs),
    /// Run the full pipeline over every seed, k, regime and grid cell.
    Sweep,
    /// Aggregate a record file into tables and plot data.
    Report(ReportArgs),
    /// FID and precision/recall between two image directories.
    Score(ScoreArgs),
    /// Print the effective configuration.
    ShowConfig,
}

#[derive(Args)]
struct SeedArg {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct FinetuneGanArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    k: usize,
    #[arg(long, default_value = "all")]
    dfm: DFinetuneMode,
    #[arg(long, default_value = "embed")]
    gfm: GFinetuneMode,
    #[arg(long, default_value_t = 0.0)]
    alpha: f64,
    #[arg(long, default_value_t = 0.0)]
    p_ada: f64,
}

#[derive(Args)]
struct GenerateArgs {
    /// GAN checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated class ids.
    #[arg(long, value_delimiter = ',', required = true)]
    classes: Vec<usize>,
    #[arg(long)]
    per_class: usize,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FinetuneClassifierArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    k: usize,
    /// baseline, baseline+aug, mixup, gan or gan+semi.
    #[arg(long)]
    regime: RegimeKind,
    #[arg(long)]
    min_scale: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    n_s: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    /// GAN cell id (relative to the artifact root) supplying generated samples.
    #[arg(long)]
    gan_cell: Option<String>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Classifier directory.
    #[arg(long)]
    classifier: PathBuf,
    #[arg(long, default_value = "test", value_parser = ["valid", "test"])]
    split: String,
}

#[derive(Args)]
struct ReportArgs {
    /// Defaults to `<root>/records.csv`.
    #[arg(long)]
    records: Option<PathBuf>,
    /// Defaults to `<root>/report`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    real: PathBuf,
    #[arg(long)]
    fake: PathBuf,
    /// Classifier whose penultimate features are compared.
    #[arg(long)]
    classifier: PathBuf,
    #[arg(long, default_value_t = 3)]
    knn_k: usize,
}

type CliResult = Result<bool, Box<dyn std::error::Error>>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.common.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn load_config(common: &Common) -> fsaug::Result<RunConfig> {
    let base = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    base.with_overrides(&common.overrides)
}

fn print(value: serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(&value).expect("json"));
}

fn run(cli: Cli) -> CliResult {
    let config = load_config(&cli.common)?;
    match cli.command {
        Command::ShowConfig => println!("{}", config.to_json()),
        Command::Split(a) => {
            let p = Workspace::new(config)?.partition(a.seed)?;
            print(json!({"seed": a.seed, "train_classes": p.train_classes, "target_classes": p.target_classes}));
        }
        Command::PretrainClassifier(a) => {
            let ws = Workspace::new(config)?;
            let clf = ws.classifier(a.seed)?;
            let part = ws.partition(a.seed)?;
            let acc = evaluate_accuracy(&clf, &part.train_set(&ws.dataset))?;
            print(json!({"seed": a.seed, "train_accuracy": acc}));
        }
        Command::PretrainGan(a) => {
            let ck = Workspace::new(config)?.pretrained_gan(a.seed)?;
            print(json!({"seed": a.seed, "step": ck.step, "best_fid": ck.best_fid}));
        }
        Command::FinetuneGan(a) => {
            let ws = Workspace::new(config)?;
            let cell = GanCell { dfm: a.dfm, gfm: a.gfm, alpha: a.alpha, p_ada: a.p_ada };
            let res = ws.finetuned_gan(a.seed, a.k, &cell)?;
            print(json!({
                "cell_id": gan_cell_id(a.seed, a.k, &cell),
                "fid": res.fid,
                "precision": res.pr.precision,
                "recall": res.pr.recall,
            }));
        }
        Command::Generate(a) => {
            let ck = GanCheckpoint::load(&a.checkpoint)?;
            let set = sample_generator(&ck.sampler(), &a.classes, a.per_class, a.sigma, a.seed, ck.image_shape())?;
            write_image_directory(&set, &a.out)?;
            print(json!({"images": set.len(), "out": a.out}));
        }
        Command::FinetuneClassifier(a) => {
            let ws = Workspace::new(config)?;
            let base = ws.regimes(a.regime).into_iter().next().unwrap_or_else(|| FinetuneRegime::new(a.regime));
            let regime = FinetuneRegime {
                min_scale: a.min_scale.unwrap_or(base.min_scale),
                mixup_beta: a.beta.unwrap_or(base.mixup_beta),
                n_s: a.n_s.unwrap_or(base.n_s),
                sigma: a.sigma.unwrap_or(base.sigma),
                ..base
            };
            let gan = match (&a.gan_cell, a.regime.uses_gan()) {
                (Some(id), true) => Some((id.clone(), GanCheckpoint::load(ws.path(id))?)),
                (None, true) => return Err(format!("regime {} needs --gan-cell", a.regime).into()),
                (_, false) => None,
            };
            let gan_ref = gan.as_ref().map(|(id, ck)| (id.as_str(), ck));
            let (_, valid, fake) = ws.finetuned_classifier(a.seed, a.k, &regime, gan_ref)?;
            print(json!({
                "cell_id": classifier_cell_id(a.seed, a.k, &regime, gan_ref.map(|g| g.0)),
                "valid_accuracy": valid,
                "fake_valid_accuracy": fake,
            }));
        }
        Command::Evaluate(a) => {
            let ws = Workspace::new(config)?;
            let part = ws.partition(a.seed)?;
            let set = if a.split == "test" { part.test_set(&ws.dataset) } else { part.valid_set(&ws.dataset) };
            let acc = evaluate_accuracy(&Classifier::load(&a.classifier)?, &set)?;
            print(json!({"split": a.split, "accuracy": acc}));
        }
        Command::Sweep => {
            let summary = run_pipeline(&config)?;
            print(json!({
                "records": summary.records,
                "completed": summary.completed,
                "skipped": summary.skipped,
                "failed": summary.failed,
            }));
            return Ok(summary.all_succeeded());
        }
        Command::Report(a) => {
            let root = config.artifact_root();
            let records = RecordFile::new(a.records.unwrap_or_else(|| root.join("records.csv"))).read()?;
            let out = a.out.unwrap_or_else(|| root.join("report"));
            let report = render_report(&records, Some(&out))?;
            print!("{}", report.text);
        }
        Command::Score(a) => {
            let s = score(&a.real, &a.fake, &a.classifier, a.knn_k)?;
            print(s);
        }
    }
    Ok(true)
}

fn score(real: &Path, fake: &Path, classifier: &Path, knn_k: usize) -> fsaug::Result<serde_json::Value> {
    let clf = Classifier::load(classifier)?;
    let side = Some(clf.arch.image_side);
    let feats = |dir: &Path| -> fsaug::Result<_> {
        let ds = load_image_directory(dir, side)?;
        let all: Vec<usize> = (0..ds.len()).collect();
        extract_features(&clf, &ds.gather(&all).batch(&all), &dir.display().to_string())
    };
    let (fr, ff) = (feats(real)?, feats(fake)?);
    let fid = frechet_distance(&fit_gaussian(&fr)?, &fit_gaussian(&ff)?)?;
    let pr = knn_precision_recall(&fr, &ff, knn_k)?;
    Ok(json!({"fid": fid, "precision": pr.precision, "recall": pr.recall, "n_real": fr.n, "n_fake": ff.n}))
}
