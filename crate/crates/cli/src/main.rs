//! `rgcl`: validate, train, evaluate, generate synthetic data and export
//! retrieval indexes.
//!
//! Machine-readable results go to stdout as one JSON document; progress
//! lines go to stderr. Exit codes: 0 ok, 1 validation or config error,
//! 2 numerical failure, 3 I/O failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use rgcl_core::data::{load_sidecar, save_sidecar, sidecar_path, validate_for_training};
use rgcl_core::eval::{evaluate_knn, evaluate_logistic, ExampleScore};
use rgcl_core::retrieval::export_index;
use rgcl_core::trainer::{train_with, write_history};
use rgcl_core::{
    load_checkpoint, load_config, load_dataset, save_checkpoint, save_dataset, DenseIndex, EmbeddingDataset,
    Error, ErrorClass, Metrics, SynthSpec,
};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "rgcl", version, about = "Retrieval-guided contrastive training over precomputed meme features")]
struct Cli {
    /// Worker threads; 1 keeps every run bitwise reproducible.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check that a dataset file loads and can be trained on.
    Validate {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train and keep the checkpoint with the best dev AUROC.
    Train {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a test set with a checkpoint.
    Eval {
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Logistic)]
        mode: Mode,
        /// Retrieval set for knn mode.
        #[arg(long)]
        retrieval: Option<PathBuf>,
        /// Neighbours for knn mode; defaults to the checkpoint's knn_k.
        #[arg(long)]
        k: Option<u32>,
    },
    /// Generate the synthetic confounder benchmark.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out_train: PathBuf,
        #[arg(long)]
        out_test: PathBuf,
        #[arg(long)]
        out_dev: Option<PathBuf>,
    },
    /// Encode a dataset and write the retrieval index plus its manifest.
    ExportIndex {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum Mode {
    Logistic,
    Knn,
}

#[derive(Serialize)]
struct ClassCounts {
    benign: usize,
    hateful: usize,
}

#[derive(Serialize)]
struct Summary {
    n: usize,
    d_img: usize,
    d_txt: usize,
    class_counts: ClassCounts,
}

impl Summary {
    fn of(ds: &EmbeddingDataset) -> Self {
        let (benign, hateful) = ds.class_counts();
        Summary { n: ds.len(), d_img: ds.d_img, d_txt: ds.d_txt, class_counts: ClassCounts { benign, hateful } }
    }
}

#[derive(Serialize)]
struct EvalReport<'a> {
    config_hash: String,
    paths: EvalPaths<'a>,
    mode: Mode,
    k: Option<usize>,
    metrics: &'a Metrics,
    per_example: &'a [ExampleScore],
}

#[derive(Serialize)]
struct EvalPaths<'a> {
    test: &'a Path,
    checkpoint: &'a Path,
    retrieval: Option<&'a Path>,
}

fn print_json<T: Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

/// Loads a dataset and, when one sits next to it, its text sidecar.
fn load_with_texts(path: &Path) -> anyhow::Result<EmbeddingDataset> {
    let ds = load_dataset(path)?;
    let side = sidecar_path(path);
    Ok(if side.exists() { ds.with_texts(load_sidecar(&side)?) } else { ds })
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(a), Ok(b)) => a == b,
        _ => a == b,
    }
}

fn write_split(ds: &EmbeddingDataset, path: &Path) -> anyhow::Result<()> {
    save_dataset(ds, path)?;
    if let Some(texts) = &ds.texts {
        save_sidecar(texts, sidecar_path(path))?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Validate { data } => {
            let ds = load_dataset(&data)?;
            validate_for_training(&ds)?;
            print_json(&Summary::of(&ds))
        }
        Command::Train { train, dev, config, out, seed } => {
            let mut config = load_config(&config)?;
            if let Some(seed) = seed {
                config.seed = seed;
            }
            config.validate()?;
            let train = load_with_texts(&train)?;
            let dev = load_dataset(&dev)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let outcome = train_with(&train, &dev, &config, |r| {
                let auroc = r.dev_auroc.map_or("n/a".to_string(), |a| format!("{a:.4}"));
                eprintln!(
                    "epoch {:>3}  loss {:.5}  rgcll {:.5}  ce {:.5}  dev_auroc {auroc}  {:.1}s",
                    r.epoch, r.mean_loss, r.mean_rgcll, r.mean_ce, r.seconds
                );
            })?;
            let ck_path = out.join("best.rgc1");
            let hist_path = out.join("history.jsonl");
            save_checkpoint(&outcome.best, &ck_path)?;
            write_history(&outcome.history, &hist_path)?;
            print_json(&serde_json::json!({
                "config_hash": config.hash(),
                "best_epoch": outcome.best_epoch,
                "best_dev_auroc": outcome.best_dev_auroc,
                "checkpoint": ck_path,
                "history": hist_path,
            }))
        }
        Command::Eval { test, checkpoint, mode, retrieval, k } => {
            if mode == Mode::Knn && retrieval.is_none() {
                return Err(Error::InvariantViolation("knn mode needs --retrieval".into()).into());
            }
            let ck = load_checkpoint(&checkpoint)?;
            let test_ds = load_dataset(&test)?;
            let (metrics, k) = match mode {
                Mode::Logistic => (evaluate_logistic(&test_ds, &ck.model)?, None),
                Mode::Knn => {
                    let rpath = retrieval.as_deref().expect("checked above");
                    let k = k.map_or(ck.config.knn_k, |k| k as usize);
                    if k == 0 {
                        return Err(Error::OutOfRange("k".into()).into());
                    }
                    let exclude_self = same_file(rpath, &test);
                    let rds = if exclude_self { test_ds.clone() } else { load_dataset(rpath)? };
                    let m = evaluate_knn(&test_ds, &rds, &ck.model, ck.config.sim_metric, k, exclude_self)?;
                    (m, Some(k))
                }
            };
            print_json(&EvalReport {
                config_hash: ck.config.hash(),
                paths: EvalPaths { test: &test, checkpoint: &checkpoint, retrieval: retrieval.as_deref() },
                mode,
                k,
                metrics: &metrics,
                per_example: &metrics.per_example,
            })
        }
        Command::Synth { spec, out_train, out_test, out_dev } => {
            let text = std::fs::read_to_string(&spec).map_err(|e| Error::io(&spec, e))?;
            let spec: SynthSpec = serde_json::from_str(&text).map_err(|e| Error::ParseError(e.to_string()))?;
            let (train, dev, test) = rgcl_core::data::gen_synthetic_splits(&spec)?;
            write_split(&train, &out_train)?;
            write_split(&test, &out_test)?;
            if let Some(path) = &out_dev {
                write_split(&dev, path)?;
            }
            let mut summary = serde_json::json!({ "train": Summary::of(&train), "test": Summary::of(&test) });
            if out_dev.is_some() {
                summary["dev"] = serde_json::to_value(Summary::of(&dev))?;
            }
            print_json(&summary)
        }
        Command::ExportIndex { data, checkpoint, out } => {
            let ck = load_checkpoint(&checkpoint)?;
            let ds = load_dataset(&data)?;
            if ds.is_empty() {
                bail!(Error::EmptyIndex);
            }
            let index = DenseIndex::build(&ds, &ck.model.encoder, ck.config.sim_metric)?;
            let manifest = export_index(&index, &out)?;
            print_json(&serde_json::json!({
                "index": out,
                "manifest": manifest,
                "metric": index.metric(),
                "N": index.len(),
                "n": index.dim(),
            }))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>().map(Error::class) {
        Some(ErrorClass::Validation) => 1,
        Some(ErrorClass::Numerical) => 2,
        Some(ErrorClass::Io) => 3,
        None if err.downcast_ref::<std::io::Error>().is_some() => 3,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build_global()
        .context("starting worker pool");
    if let Err(e) = pool {
        eprintln!("error: {e:#}");
        return ExitCode::from(1);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
