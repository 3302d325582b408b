//! Command line front end: synthesize benchmark data, train, evaluate,
//! and run config sweeps. Every command exits 0 on success, 2 on a config
//! problem, 3 on a data problem, 4 on numeric failure, 1 otherwise.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use aeon::benchmark::{
    self, meta_path, read_dataset, synthesize, tag_counts, test_path, write_dataset, write_meta,
    DatasetMeta, SynthConfig, TaggedDataset, GENERATOR_VERSION,
};
use aeon::metrics::{evaluate, EvalContext};
use aeon::sweep::{run_sweep, SweepSpec};
use aeon::trainer::{config_digest, fit, load_checkpoint, FitOptions, TrainConfig};
use aeon::{Error, Result};

#[derive(Parser)]
#[command(name = "aeon", version, about = "Noise-rate estimation laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a tagged synthetic dataset (train CSV, test CSV, meta sidecar).
    Synth {
        /// Generator config, .toml or .json.
        #[arg(long)]
        config: PathBuf,
        /// Training CSV path; the test split lands next to it as
        /// <stem>.test.csv and the sidecar as <stem>.meta.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset CSV, logging per-epoch metrics and checkpointing.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Training config, .toml or .json.
        #[arg(long)]
        config: PathBuf,
        /// Per-epoch JSONL metrics log.
        #[arg(long)]
        log: PathBuf,
        /// Checkpoint directory (written at start, on the configured
        /// interval, and at the end).
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Score a checkpoint against a tagged dataset and its test split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Where to write the JSON report.
        #[arg(long)]
        report: PathBuf,
    },
    /// Run a config grid from a sweep spec, writing per-run reports and an
    /// aggregate CSV.
    Sweep {
        /// Sweep spec, .toml or .json; its `data` path is taken relative
        /// to the spec file.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Concurrent runs.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
}

/// Parse a config file by extension. Anything but .toml or .json is
/// rejected rather than guessed at.
fn load_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => toml::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display()))),
        Some("json") => serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display()))),
        _ => Err(Error::config(format!(
            "{}: config files must end in .toml or .json",
            path.display()
        ))),
    }
}

/// `AEON_SEED` overrides the config seed for synth and train runs.
fn seed_override() -> Result<Option<u64>> {
    match std::env::var("AEON_SEED") {
        Ok(s) => s
            .trim()
            .parse::<u64>()
            .map(Some)
            .map_err(|_| Error::config(format!("AEON_SEED must be an unsigned integer, got {s:?}"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(Error::config(format!("AEON_SEED: {e}"))),
    }
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

/// Load the test split named by a dataset's meta sidecar, when both exist.
fn sidecar_test_split(data: &Path) -> Result<Option<(DatasetMeta, TaggedDataset)>> {
    let meta_file = meta_path(data);
    if !meta_file.exists() {
        return Ok(None);
    }
    let meta = benchmark::read_meta(&meta_file)?;
    let Some(name) = meta.test_file.clone() else {
        return Ok(None);
    };
    let file = match data.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => dir.join(&name),
        _ => PathBuf::from(&name),
    };
    let test = read_dataset(&file)?;
    Ok(Some((meta, test)))
}

fn cmd_synth(config: &Path, out: &Path) -> Result<()> {
    let mut cfg: SynthConfig = load_config(config)?;
    if let Some(seed) = seed_override()? {
        cfg.seed = seed;
    }
    let (train, test) = synthesize(&cfg)?;
    create_parent(out)?;
    let test_file = test_path(out);
    write_dataset(&train, out)?;
    write_dataset(&test, &test_file)?;
    let meta = DatasetMeta {
        tag_counts: tag_counts(&train),
        generator_version: GENERATOR_VERSION,
        test_file: test_file
            .file_name()
            .map(|n| n.to_string_lossy().into_owned()),
        config: cfg,
    };
    let meta_file = meta_path(out);
    write_meta(&meta, &meta_file)?;
    println!(
        "wrote {} ({} records), {} ({} records), {}",
        out.display(),
        train.records.len(),
        test_file.display(),
        test.records.len(),
        meta_file.display()
    );
    Ok(())
}

fn cmd_train(data: &Path, config: &Path, log: &Path, ckpt: &Path) -> Result<()> {
    let mut cfg: TrainConfig = load_config(config)?;
    if let Some(seed) = seed_override()? {
        cfg.seed = seed;
    }
    let train = read_dataset(data)?;
    let sidecar = sidecar_test_split(data)?;
    let test = sidecar.as_ref().map(|(_, t)| t);
    let opts = FitOptions {
        log_path: Some(log.to_path_buf()),
        ckpt_dir: Some(ckpt.to_path_buf()),
    };
    let result = fit(&cfg, &train, test, &opts)?;
    let last = result
        .history
        .last()
        .expect("fit always runs at least one epoch");
    print!(
        "trained {} epochs: loss {:.4}, eta_id {:.4}, eta_ood {:.4}",
        result.history.len(),
        last.loss_total,
        last.eta_id,
        last.eta_ood
    );
    match last.test_acc {
        Some(acc) => println!(", test accuracy {acc:.4}"),
        None => println!(),
    }
    println!("checkpoint at {}", ckpt.display());
    Ok(())
}

fn cmd_eval(data: &Path, ckpt: &Path, report: &Path) -> Result<()> {
    let (model, estimators, cfg) = load_checkpoint(ckpt)?;
    let train = read_dataset(data)?;
    let (meta, test) = sidecar_test_split(data)?.ok_or_else(|| {
        Error::data(format!(
            "{}: eval needs the meta sidecar naming a test split",
            data.display()
        ))
    })?;
    let ctx = EvalContext {
        train: &train,
        test: &test,
        r_id: Some(meta.config.r_id),
        r_ood: Some(meta.config.r_ood),
        config_digest: Some(config_digest(&cfg)?),
        seed: cfg.seed,
    };
    let rep = evaluate(&model, &estimators, &cfg.mask, &ctx)?;
    create_parent(report)?;
    let text = serde_json::to_string_pretty(&rep)?;
    fs::write(report, text).map_err(|e| Error::io(report, e))?;
    println!(
        "accuracy {:.4}, ece {:.4}, eta_id {:.4}, eta_ood {:.4}; report at {}",
        rep.test_accuracy,
        rep.test_ece,
        rep.eta_id,
        rep.eta_ood,
        report.display()
    );
    Ok(())
}

fn cmd_sweep(spec_path: &Path, out: &Path, workers: usize) -> Result<()> {
    let mut spec: SweepSpec = load_config(spec_path)?;
    if spec.data.is_relative() {
        if let Some(dir) = spec_path.parent().filter(|d| !d.as_os_str().is_empty()) {
            spec.data = dir.join(&spec.data);
        }
    }
    let outcome = run_sweep(&spec, out, workers)?;
    println!(
        "{} cells, {} runs, {} failed; aggregate at {}",
        outcome.cells,
        outcome.runs,
        outcome.failed_runs,
        outcome.csv_path.display()
    );
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth { config, out } => cmd_synth(config, out),
        Command::Train {
            data,
            config,
            log,
            ckpt,
        } => cmd_train(data, config, log, ckpt),
        Command::Eval { data, ckpt, report } => cmd_eval(data, ckpt, report),
        Command::Sweep { spec, out, workers } => cmd_sweep(spec, out, *workers),
    };
    if let Err(e) = result {
        eprintln!("{e}");
        std::process::exit(e.exit_code());
    }
}
