use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use cwseg_core::ablation::{run_ablation, Axis};
use cwseg_core::checkpoint::Checkpoint;
use cwseg_core::config::ExperimentConfig;
use cwseg_core::data::{generate_synthetic, partition, write_dataset_dir, Split};
use cwseg_core::dpm::write_score_dump;
use cwseg_core::metrics::CSV_HEADER;
use cwseg_core::reliability::score_images;
use cwseg_core::trainer::{evaluate_params, run_experiment, RunOptions};
use cwseg_core::Error;

/// Semi-supervised segmentation with cross-window consistency and a dynamic pseudo-label bank.
#[derive(Parser)]
#[command(name = "cwseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset with its split manifest.
    GenData(Common),
    /// Run both training stages and evaluate on the test split.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint inside the same output directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many epochs overall.
        #[arg(long)]
        halt_after_epoch: Option<usize>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Run one experiment per value of an ablation axis.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// overlap, n_pairs, ratio, components, or filter.
        #[arg(long)]
        axis: String,
        /// Comma-separated cell values; defaults to the axis's standard sweep.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
    /// Write reliability scores of every unlabeled image under a checkpoint.
    ScoreDump {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

/// Precedence, lowest to highest: built-in defaults, `--config`, `--set`, `--seed`.
#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted-key override such as `loss.lambda_bcc=0.2`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

enum Failure {
    Validation(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<Error>() {
            Some(Error::Config { key, message }) => Failure::Validation(format!("invalid `{key}`: {message}")),
            Some(Error::UnknownAxis(a)) => Failure::Validation(format!("unknown ablation axis `{a}`")),
            _ => Failure::Runtime(e),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig, Failure> {
        let text = match &self.config {
            Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            None => String::new(),
        };
        let mut overrides = Vec::new();
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Failure::Validation(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            overrides.push((k.trim().to_string(), v.trim().to_string()));
        }
        if let Some(seed) = self.seed {
            overrides.push(("seed".into(), seed.to_string()));
        }
        let cfg = ExperimentConfig::from_toml_with_overrides(&text, &overrides)?;
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        fs::write(self.out.join("config.resolved"), cfg.to_toml()).context("writing config.resolved")?;
        Ok(cfg)
    }
}

fn load_params(cfg: &ExperimentConfig, path: &Path) -> Result<cwseg_core::model::ModelParams, Failure> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    if ckpt.header.arch != cfg.arch() {
        return Err(Failure::Runtime(anyhow::anyhow!(
            "checkpoint architecture does not match the configuration"
        )));
    }
    Ok(ckpt.params)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData(common) => {
            let cfg = common.resolve()?;
            let ds = generate_synthetic(&cfg.data.synth(), cfg.seed)?;
            let splits = partition(&ds, &cfg.protocol())?;
            write_dataset_dir(&common.out, &ds, &splits.assignment())?;
            println!("wrote {} images to {}", ds.items.len(), common.out.display());
        }
        Command::Train {
            common,
            resume,
            halt_after_epoch,
        } => {
            let cfg = common.resolve()?;
            let outcome = run_experiment(&cfg, &common.out, &RunOptions { resume, halt_after_epoch })?;
            match outcome.report {
                Some(r) => println!("test mIoU {:.4} after {} epochs", r.test.miou, r.epochs),
                None => println!("halted after {} epochs", outcome.state.epoch),
            }
        }
        Command::Eval {
            common,
            checkpoint,
            split,
        } => {
            let cfg = common.resolve()?;
            let split: Split = split.parse().map_err(|_| Failure::Validation(format!("unknown split `{split}`")))?;
            let params = load_params(&cfg, &checkpoint)?;
            let ds = generate_synthetic(&cfg.data.synth(), cfg.seed)?;
            let splits = partition(&ds, &cfg.protocol())?;
            let samples = match split {
                Split::Labeled => &splits.labeled,
                Split::Val => &splits.val,
                Split::Test => &splits.test,
                Split::Unlabeled => return Err(Failure::Validation("the unlabeled split has no labels".into())),
            };
            let report = evaluate_params(&params, samples, splits.num_classes)?;
            let epoch = Checkpoint::load(&checkpoint)?.header.epoch;
            fs::write(
                common.out.join("eval.csv"),
                format!("{CSV_HEADER}\n{}\n", report.csv_row(split.name(), epoch)),
            )
            .context("writing eval.csv")?;
            println!("{} mIoU {:.4}", split.name(), report.miou);
        }
        Command::Ablate { common, axis, values } => {
            let axis: Axis = axis.parse()?;
            let cfg = common.resolve()?;
            let values = if values.is_empty() {
                axis.default_values().iter().map(|v| v.to_string()).collect()
            } else {
                values
            };
            let rows = run_ablation(&cfg, axis, &values, &common.out)?;
            for r in &rows {
                println!("{axis}={}: test mIoU {:.4}", r.value, r.test.miou);
            }
        }
        Command::ScoreDump { common, checkpoint } => {
            let cfg = common.resolve()?;
            let params = load_params(&cfg, &checkpoint)?;
            let ds = generate_synthetic(&cfg.data.synth(), cfg.seed)?;
            let splits = partition(&ds, &cfg.protocol())?;
            let images: Vec<_> = splits.unlabeled.iter().map(|u| (u.id, &u.image)).collect();
            let scores = score_images(
                &params,
                &images,
                cfg.geometry.crop_size,
                cfg.geometry.min_overlap(),
                cfg.seed,
                0,
            )?;
            write_score_dump(&common.out.join("scores.csv"), &scores)?;
            println!("scored {} unlabeled images", scores.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
