use std::path::{Path, PathBuf};
use std::process::ExitCode;

use amr_core::harness::experiments::{self, Table, SWEEP_XIS};
use amr_core::harness::export::export_heatmaps;
use amr_core::harness::train::{from_checkpoint, to_checkpoint, train_in};
use amr_core::harness::{evaluate, RunConfig};
use amr_core::network::Checkpoint;
use amr_core::synthdata::{Dataset, Split};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Attention-modulated CAM recalibration on a synthetic segmentation task.
#[derive(Parser)]
#[command(name = "amr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Plain-text key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set epochs=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for initialization, shuffling and augmentation.
    #[arg(long)]
    seed: Option<u64>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        apply_overrides(&mut c, &self.overrides)?;
        if let Some(s) = self.seed {
            c.seed = s;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct CheckpointArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Override a stored evaluation setting such as `xi` or `bg_threshold`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Accepted for interface uniformity; evaluation is deterministic.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "val")]
    split: SplitArg,
}

impl CheckpointArgs {
    fn load(&self) -> Result<(amr_core::network::AmrModel<f32>, RunConfig, Dataset)> {
        let ck = Checkpoint::load(&self.checkpoint)?;
        let (model, mut config) = from_checkpoint(&ck)?;
        apply_overrides(&mut config, &self.overrides)?;
        if let Some(s) = self.seed {
            config.seed = s;
        }
        config.validate()?;
        let data = Dataset::generate(&config.dataset, self.split.into())?;
        Ok((model, config, data))
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model, save a checkpoint and report validation metrics.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "amr.ckpt")]
        out: PathBuf,
        /// CSV of per-CAM validation metrics.
        #[arg(long)]
        report: Option<PathBuf>,
        /// CSV of per-step losses.
        #[arg(long)]
        losses: Option<PathBuf>,
        /// Directory for diagnostic dumps of non-finite batches.
        #[arg(long, default_value = ".")]
        dump_dir: PathBuf,
    },
    /// Evaluate a checkpoint's pseudo labels.
    Eval {
        #[command(flatten)]
        ck: CheckpointArgs,
        #[arg(long)]
        xi: Option<f64>,
        #[arg(long)]
        bg_threshold: Option<f64>,
        /// Also print per-class IoU.
        #[arg(long)]
        per_class: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Weighted-CAM mIoU across recalibration coefficients.
    XiSweep {
        #[command(flatten)]
        ck: CheckpointArgs,
        #[arg(long, value_delimiter = ',', default_values_t = SWEEP_XIS)]
        xis: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate the five component-ablation rows.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate baseline, threshold and Gaussian modulation.
    ModfnCompare {
        #[command(flatten)]
        run: RunArgs,
        /// Add an identity-modulation diagnostic row.
        #[arg(long)]
        identity: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write input images and per-class CAM heatmaps.
    ExportHeatmaps {
        #[command(flatten)]
        ck: CheckpointArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        indices: Vec<usize>,
        #[arg(long, default_value = "heatmaps")]
        out_dir: PathBuf,
    },
    /// Write the synthetic dataset as PPM/PGM files with a label manifest.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Dataset seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "data")]
        out_dir: PathBuf,
    },
}

fn apply_overrides(c: &mut RunConfig, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let Some((k, v)) = o.split_once('=') else {
            bail!("override {o:?} is not KEY=VALUE");
        };
        c.set(k, v)?;
    }
    Ok(())
}

fn emit(table: &Table, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => table.write_csv(p)?,
        None => print!("{}", String::from_utf8(table.to_csv()?)?),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            run,
            out,
            report,
            losses,
            dump_dir,
        } => {
            let config = run.resolve()?;
            let (train_data, val) = amr_core::synthdata::generate(&config.dataset)?;
            let trained = train_in(&config, &train_data, &dump_dir)?;
            to_checkpoint(&trained.model, &config)
                .save(&out)
                .with_context(|| format!("saving {}", out.display()))?;
            let mut metrics = evaluate(&trained.model, &config, &val)?;
            metrics.loss_curve = trained.epochs.clone();
            if let Some(p) = losses {
                let mut t = Table::new(&["epoch", "step", "all", "cls", "cps"]);
                for s in &trained.steps {
                    t.push(vec![
                        s.epoch.to_string(),
                        s.step.to_string(),
                        format!("{:.6}", s.all),
                        format!("{:.6}", s.cls),
                        format!("{:.6}", s.cps),
                    ]);
                }
                t.write_csv(&p)?;
            }
            for e in &metrics.loss_curve {
                eprintln!("epoch {}: loss {:.5} (cls {:.5}, cps {:.5})", e.epoch, e.all, e.cls, e.cps);
            }
            emit(&experiments::report_table(&metrics), report.as_deref())
        }
        Command::Eval {
            ck,
            xi,
            bg_threshold,
            per_class,
            out,
        } => {
            let (model, mut config, data) = ck.load()?;
            if let Some(x) = xi {
                config.xi = x;
            }
            if let Some(b) = bg_threshold {
                config.bg_threshold = b;
            }
            config.validate()?;
            let metrics = evaluate(&model, &config, &data)?;
            emit(&experiments::report_table(&metrics), out.as_deref())?;
            if per_class {
                emit(&experiments::class_iou_table(&metrics), None)?;
            }
            Ok(())
        }
        Command::XiSweep { ck, xis, out } => {
            let (model, config, data) = ck.load()?;
            emit(&experiments::xi_sweep(&model, &config, &data, &xis)?, out.as_deref())
        }
        Command::Ablate { run, out } => {
            let config = run.resolve()?;
            let (train_data, val) = amr_core::synthdata::generate(&config.dataset)?;
            emit(&experiments::ablate(&config, &train_data, &val)?, out.as_deref())
        }
        Command::ModfnCompare { run, identity, out } => {
            let config = run.resolve()?;
            let (train_data, val) = amr_core::synthdata::generate(&config.dataset)?;
            let table = experiments::modfn_compare(&config, &train_data, &val, identity)?;
            emit(&table, out.as_deref())
        }
        Command::ExportHeatmaps { ck, indices, out_dir } => {
            let (model, config, data) = ck.load()?;
            let files = export_heatmaps(&model, &config, &data, &indices, &out_dir)?;
            eprintln!("wrote {} files to {}", files.len(), out_dir.display());
            Ok(())
        }
        Command::GenData {
            config,
            overrides,
            seed,
            out_dir,
        } => {
            let mut c = match &config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            apply_overrides(&mut c, &overrides)?;
            if let Some(s) = seed {
                c.dataset.seed = s;
            }
            let (train_data, val) = amr_core::synthdata::generate(&c.dataset)?;
            train_data.write_cache(&out_dir.join("train"))?;
            val.write_cache(&out_dir.join("val"))?;
            eprintln!(
                "wrote {} train and {} val samples to {}",
                train_data.len(),
                val.len(),
                out_dir.display()
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("error: {}", msg.join(": "));
            ExitCode::FAILURE
        }
    }
}
