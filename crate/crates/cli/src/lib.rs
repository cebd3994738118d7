//! Command-line surface of the `pllfer` binary. [`cli_main`] parses the
//! arguments, runs one subcommand and maps the outcome to an exit code.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use pllfer::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use pllfer::datasets::{
    corrupt_to_partial_labels, generate_synthetic_dataset, load_image_folder, load_partial_folder,
    write_image_folder, PartialSample, Sample, SynthSpec, MANIFEST_NAME,
};
use pllfer::eval::{
    disambiguation_report, evaluate, export_confusion_plot, run_ablation, write_runs_csv, write_summary_csv,
    AblationGrid,
};
use pllfer::hog::{descriptor_csv, hog_descriptor};
use pllfer::model::{HeadKind, ModelConfig};
use pllfer::trainer::{
    finetune, finetune_checkpoint, load_classifier, pretrain, EpochSnapshot, FinetuneOptions, PretrainConfig,
    PretrainRun, TrainConfig,
};
use pllfer::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Contents of a `--config` file. Every section is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: SynthSpec,
    /// Flip-in probability used by `gen-data` to build candidate sets.
    pub flip_prob: f64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub pretrain_epochs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: SynthSpec::default(),
            flip_prob: 0.3,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            pretrain: PretrainConfig::default(),
            pretrain_epochs: 5,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "pllfer", version, about = "Partial-label facial expression recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset with partial labels.
    GenData(CommonArgs),
    /// Masked HOG pre-training of the encoder.
    Pretrain(CommonArgs),
    /// Partial-label fine-tuning.
    Finetune(CommonArgs),
    /// Evaluate a fine-tuned checkpoint on a labelled test set.
    Eval(CommonArgs),
    /// Disambiguation report of a finished fine-tuning run.
    Report(CommonArgs),
    /// Run an ablation grid.
    Ablate(CommonArgs),
}

#[derive(Debug, Args, Default)]
struct CommonArgs {
    /// Dataset directory (with `train/` and `test/` manifests).
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// JSON configuration; flags take precedence over it.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    #[arg(long, value_name = "F")]
    mask_ratio: Option<f64>,
    #[arg(long, value_name = "F")]
    threshold: Option<f64>,
    #[arg(long, value_name = "F")]
    tau: Option<f64>,
    #[arg(long, value_name = "N")]
    k_top: Option<usize>,
    #[arg(long, value_name = "F")]
    lambda_uniform: Option<f64>,
    #[arg(long, value_name = "F")]
    lambda_align: Option<f64>,
    /// Fine-tune from a randomly initialised encoder.
    #[arg(long)]
    no_pretrain: bool,
    /// Replace the query decoder with mean pooling and a linear head.
    #[arg(long)]
    no_decoder: bool,
    #[arg(long, value_name = "N")]
    epochs: Option<usize>,
    #[arg(long, value_name = "N")]
    batch_size: Option<usize>,
    /// Checkpoint to read: the pre-trained encoder for `finetune`, the
    /// classifier for `eval`, or a pre-training run to resume.
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
    /// Candidate flip-in probability for `gen-data`.
    #[arg(long, value_name = "F")]
    flip_prob: Option<f64>,
    /// `pretrain` only: write the HOG cells of the first training image as
    /// CSV to this file before training.
    #[arg(long, value_name = "FILE")]
    dump_hog: Option<PathBuf>,
}

/// Runs the CLI and returns the process exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                EXIT_VALIDATION
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(&a),
        Command::Pretrain(a) => pretrain_cmd(&a),
        Command::Finetune(a) => finetune_cmd(&a),
        Command::Eval(a) => eval_cmd(&a),
        Command::Report(a) => report_cmd(&a),
        Command::Ablate(a) => ablate_cmd(&a),
    }
}

fn required<'a>(v: &'a Option<PathBuf>, flag: &str, cmd: &str) -> Result<&'a Path> {
    v.as_deref()
        .ok_or_else(|| Error::Config(format!("`{cmd}` requires --{flag}")))
}

fn out_dir(a: &CommonArgs) -> Result<PathBuf> {
    let dir = a.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
    Ok(dir)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v).expect("value serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// File configuration, then `$PLLFER_SEED`, then flags.
fn resolve_config(a: &CommonArgs) -> Result<RunConfig> {
    let mut c: RunConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    let file_seed = c.train.seed;
    c.train = c.train.with_env_seed()?;
    if c.train.seed != file_seed {
        c.data.seed = c.train.seed;
    }
    if let Some(s) = a.seed {
        c.train.seed = s;
        c.data.seed = s;
    }
    if let Some(v) = a.mask_ratio {
        c.pretrain.mask_ratio = v;
    }
    if let Some(v) = a.threshold {
        c.train.revision.threshold = v;
    }
    if let Some(v) = a.k_top {
        c.train.revision.k_top = v;
    }
    if let Some(v) = a.tau {
        c.train.tau = v;
    }
    if let Some(v) = a.lambda_uniform {
        c.train.lambda_uniform = v;
    }
    if let Some(v) = a.lambda_align {
        c.train.lambda_align = v;
    }
    if let Some(v) = a.epochs {
        c.train.epochs = v;
    }
    if let Some(v) = a.batch_size {
        c.train.batch_size = v;
    }
    if let Some(v) = a.flip_prob {
        c.flip_prob = v;
    }
    if a.no_decoder {
        c.model.head = HeadKind::Pooled;
    }
    c.model.validate()?;
    Ok(c)
}

fn split_manifest(data: &Path, split: &str) -> (PathBuf, PathBuf) {
    let root = data.join(split);
    let manifest = root.join(MANIFEST_NAME);
    (root, manifest)
}

fn load_train(data: &Path, c: &RunConfig) -> Result<Vec<PartialSample>> {
    let (root, manifest) = split_manifest(data, "train");
    load_partial_folder(&root, &manifest, c.model.encoder.image_size, c.model.num_classes())
}

/// The `test/` split, or nothing when the dataset has none.
fn load_test(data: &Path, c: &RunConfig) -> Result<Vec<Sample>> {
    let (root, manifest) = split_manifest(data, "test");
    if !manifest.exists() {
        return Ok(Vec::new());
    }
    load_image_folder(&root, &manifest, c.model.encoder.image_size, c.model.num_classes())
}

fn gen_data(a: &CommonArgs) -> Result<()> {
    let c = resolve_config(a)?;
    let out = required(&a.out, "out", "gen-data")?;
    c.data.validate()?;
    let (train, test) = generate_synthetic_dataset(&c.data)?;
    let partial = corrupt_to_partial_labels(&train, c.data.num_classes, c.flip_prob, c.data.seed)?;
    let sets: Vec<_> = partial.iter().map(|p| p.candidates.clone()).collect();
    write_image_folder(&out.join("train"), &train, Some(&sets))?;
    write_image_folder(&out.join("test"), &test, None)?;
    write_json(&out.join("data.json"), &c)?;
    println!("wrote {} train and {} test samples to {}", train.len(), test.len(), out.display());
    Ok(())
}

fn pretrain_cmd(a: &CommonArgs) -> Result<()> {
    let c = resolve_config(a)?;
    let data = required(&a.data, "data", "pretrain")?;
    let out = out_dir(a)?;
    let (root, manifest) = split_manifest(data, "train");
    let images: Vec<_> = load_image_folder(&root, &manifest, c.model.encoder.image_size, c.model.num_classes())?
        .into_iter()
        .map(|s| s.image)
        .collect();
    if let Some(path) = &a.dump_hog {
        let first = images
            .first()
            .ok_or_else(|| Error::Validation("no training images to describe".into()))?;
        let grid = hog_descriptor(first, &c.pretrain.hog)?;
        fs::write(path, descriptor_csv(&grid)).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
    }
    let cfg = TrainConfig {
        epochs: a.epochs.unwrap_or(c.pretrain_epochs),
        ..c.train
    };
    let run = PretrainRun {
        checkpoint: Some(out.join("pretrain.ckpt")),
        resume: a.checkpoint.clone(),
        stop_after: None,
    };
    let outcome = pretrain(&images, c.model.encoder, &c.pretrain, &cfg, &run)?;
    println!(
        "pre-training done: {} epochs, final loss {:.6}",
        outcome.epoch_losses.len(),
        outcome.epoch_losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn finetune_cmd(a: &CommonArgs) -> Result<()> {
    let c = resolve_config(a)?;
    let data = required(&a.data, "data", "finetune")?;
    let out = out_dir(a)?;
    let train = load_train(data, &c)?;
    let test = load_test(data, &c)?;

    let init: Option<Checkpoint> = if a.no_pretrain {
        None
    } else if let Some(path) = &a.checkpoint {
        Some(load_checkpoint(path)?)
    } else {
        let images: Vec<_> = train.iter().map(|s| s.sample.image.clone()).collect();
        let cfg = TrainConfig {
            epochs: c.pretrain_epochs.max(1),
            ..c.train
        };
        let run = PretrainRun {
            checkpoint: Some(out.join("pretrain.ckpt")),
            ..Default::default()
        };
        pretrain(&images, c.model.encoder, &c.pretrain, &cfg, &run)?;
        Some(load_checkpoint(&out.join("pretrain.ckpt"))?)
    };

    let opts = FinetuneOptions {
        snapshot_dir: Some(out.join("store")),
        keep_snapshots: true,
        eval_every: 1,
    };
    let outcome = finetune(&train, &test, init.as_ref(), c.model, &c.train, &opts)?;
    save_checkpoint(&out.join("model.ckpt"), &finetune_checkpoint(&outcome.model, &c.train))?;
    outcome.record.write_jsonl(&out.join("run.jsonl"))?;
    outcome.store.write_snapshot(&out.join("store.jsonl"))?;
    write_snapshots(&out.join("snapshots.jsonl"), &outcome.snapshots)?;
    if let Some(anchors) = &outcome.anchors {
        anchors.save(&out.join("anchors.json"))?;
    }
    write_json(&out.join("config.json"), &c)?;
    let report = disambiguation_report(&outcome.store, &train, &outcome.snapshots)?;
    write_json(&out.join("report.json"), &report)?;
    if test.iter().all(|s| s.true_label.is_some()) && !test.is_empty() {
        let metrics = evaluate(&outcome.model, &test)?;
        metrics.write_json(&out.join("metrics.json"))?;
        export_confusion_plot(&metrics, &out.join("confusion.svg"))?;
        println!("test accuracy {:.4}", metrics.accuracy);
    }
    println!(
        "fine-tuning done: one-hot fraction {:.3}, confidence correctness {:?}",
        report.collapse_fraction, report.confidence_correctness
    );
    Ok(())
}

fn write_snapshots(path: &Path, snaps: &[EpochSnapshot]) -> Result<()> {
    let mut buf = Vec::new();
    for s in snaps {
        serde_json::to_writer(&mut buf, s).expect("snapshot serializes");
        buf.push(b'\n');
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
}

fn read_snapshots(path: &Path) -> Result<Vec<EpochSnapshot>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                msg: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

fn eval_cmd(a: &CommonArgs) -> Result<()> {
    let data = required(&a.data, "data", "eval")?;
    let ckpt = required(&a.checkpoint, "checkpoint", "eval")?;
    let out = out_dir(a)?;
    let model = load_classifier(ckpt)?;
    let c = RunConfig {
        model: model.config,
        ..RunConfig::default()
    };
    let mut test = load_test(data, &c)?;
    if test.is_empty() && data.join(MANIFEST_NAME).exists() {
        test = load_image_folder(
            data,
            &data.join(MANIFEST_NAME),
            model.config.encoder.image_size,
            model.num_classes(),
        )?;
    }
    if test.is_empty() {
        return Err(Error::Validation(format!("no test manifest under {}", data.display())));
    }
    let metrics = evaluate(&model, &test)?;
    metrics.write_json(&out.join("metrics.json"))?;
    export_confusion_plot(&metrics, &out.join("confusion.svg"))?;
    println!(
        "accuracy {:.4}, mean class accuracy {:.4}",
        metrics.accuracy, metrics.mean_class_accuracy
    );
    Ok(())
}

fn report_cmd(a: &CommonArgs) -> Result<()> {
    let data = required(&a.data, "data", "report")?;
    let run_dir = required(&a.out, "out", "report")?;
    let c: RunConfig = read_json(&run_dir.join("config.json"))?;
    let train = load_train(data, &c)?;
    let mut store = pllfer::candidate_store::ConfidenceStore::from_samples(&train, c.model.num_classes())?;
    store.load_snapshot(&run_dir.join("store.jsonl"))?;
    let snaps = read_snapshots(&run_dir.join("snapshots.jsonl"))?;
    let report = disambiguation_report(&store, &train, &snaps)?;
    write_json(&run_dir.join("report.json"), &report)?;
    println!(
        "collapse {:.3}, confidence correctness {:?}, top-2 coverage {:?}",
        report.collapse_fraction, report.confidence_correctness, report.top2_coverage
    );
    Ok(())
}

fn ablate_cmd(a: &CommonArgs) -> Result<()> {
    let path = required(&a.config, "config", "ablate")?;
    let mut grid: AblationGrid = read_json(path)?;
    if let Some(s) = a.seed {
        grid.seeds = vec![s];
    }
    if let Some(e) = a.epochs {
        grid.train.epochs = e;
    }
    if let Some(b) = a.batch_size {
        grid.train.batch_size = b;
    }
    let out = out_dir(a)?;
    let outcome = run_ablation(&grid)?;
    write_runs_csv(&out.join("runs.csv"), &outcome.runs)?;
    write_summary_csv(&out.join("summary.csv"), &outcome.summary)?;
    let failed = outcome.runs.iter().filter(|r| r.status != "ok").count();
    println!(
        "{} runs ({} failed), {} summary rows in {}",
        outcome.runs.len(),
        failed,
        outcome.summary.len(),
        out.display()
    );
    Ok(())
}
