//! Command-line surface: data generation, training, evaluation, gradient
//! checking, the ablation grid, and checkpoint inspection.
//!
//! Every command exits 0 on success and nonzero with a one-line diagnostic
//! on failure.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};

use crate::ablate;
use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{generate_splits, load_dataset, save_dataset, Dataset, SourceLabel};
use crate::gradcheck::joint_gradient_check;
use crate::metrics::{accuracy, per_attribute_report, per_source_report, recall_at_precision};
use crate::train::{self, RunPaths};

#[derive(Parser)]
#[command(
    name = "moemoe",
    about = "Question-guided multi-source QA with sparse mixture-of-experts routing"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multi-source QA splits.
    Datagen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the generator seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = false)]
        quiet: bool,
    },
    /// Train a model per the run config; writes logs and checkpoints.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Dataset directory (from datagen) or explicit train-split file.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Resume from an epoch checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = false)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on a dataset split and write reports.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = false)]
        quiet: bool,
    },
    /// Compare autograd against finite differences on the joint objective.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        n_params: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = false)]
        quiet: bool,
    },
    /// Run the configured ablation grid and emit the comparison table.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = false)]
        quiet: bool,
    },
    /// Print a checkpoint's header and parameter manifest.
    InspectCkpt {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

/// Parse argv and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version go to stdout with success per clap convention.
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::from_path(p).map_err(|e| anyhow!("{e}")),
        None => Ok(RunConfig::default()),
    }
}

/// Resolve train/val/test split files from a directory or explicit paths.
fn resolve_splits(run: &RunConfig, dataset: &Option<PathBuf>) -> Result<(PathBuf, PathBuf, PathBuf)> {
    let base: PathBuf = match dataset {
        Some(p) => p.clone(),
        None => {
            if run.data.dataset.is_empty() {
                bail!("no dataset given: pass --dataset or set data.dataset in the config");
            }
            PathBuf::from(&run.data.dataset)
        }
    };
    if base.is_dir() {
        let val = if run.data.val_dataset.is_empty() {
            base.join("val.moemoe-ds")
        } else {
            PathBuf::from(&run.data.val_dataset)
        };
        let test = if run.data.test_dataset.is_empty() {
            base.join("test.moemoe-ds")
        } else {
            PathBuf::from(&run.data.test_dataset)
        };
        Ok((base.join("train.moemoe-ds"), val, test))
    } else {
        if run.data.val_dataset.is_empty() {
            bail!("explicit train file {} needs data.val_dataset", base.display());
        }
        let test = if run.data.test_dataset.is_empty() {
            run.data.val_dataset.clone()
        } else {
            run.data.test_dataset.clone()
        };
        Ok((base, PathBuf::from(&run.data.val_dataset), PathBuf::from(test)))
    }
}

fn label_counts(ds: &Dataset) -> HashMap<SourceLabel, usize> {
    let mut counts = HashMap::new();
    for s in &ds.samples {
        *counts.entry(s.source_label).or_insert(0) += 1;
    }
    counts
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Datagen {
            config,
            out,
            seed,
            quiet,
        } => {
            let mut run = load_config(&config)?;
            if let Some(s) = seed {
                run.data.synth.seed = s;
            }
            fs::create_dir_all(&out)?;
            let splits = generate_splits(&run.data.synth)?;
            for (name, ds) in [
                ("train", &splits.train),
                ("val", &splits.val),
                ("test", &splits.test),
            ] {
                let path = out.join(format!("{name}.moemoe-ds"));
                save_dataset(ds, &path)?;
                if !quiet {
                    let counts = label_counts(ds);
                    println!(
                        "{name}: {} samples -> {} (context {}, image {}, both {})",
                        ds.samples.len(),
                        path.display(),
                        counts.get(&SourceLabel::Context).unwrap_or(&0),
                        counts.get(&SourceLabel::Image).unwrap_or(&0),
                        counts.get(&SourceLabel::Both).unwrap_or(&0),
                    );
                }
            }
            Ok(0)
        }

        Command::Train {
            config,
            out,
            dataset,
            checkpoint: resume,
            seed,
            quiet,
        } => {
            let (mut model, mut opt, run, start_epoch) = match &resume {
                Some(ckpt) => {
                    // The checkpoint's embedded config is authoritative for
                    // the continuation, so the run replays identically.
                    let (model, opt, run, epoch) = checkpoint::load(ckpt)?;
                    (model, opt, run, epoch)
                }
                None => {
                    let mut run = load_config(&config)?;
                    if let Some(s) = seed {
                        run.optimizer.seed = s;
                    }
                    let model = run.build_model().map_err(|e| anyhow!("{e}"))?;
                    let opt = run.optimizer.adam_state();
                    (model, opt, run, 0)
                }
            };
            let (train_path, val_path, _) = resolve_splits(&run, &dataset)?;
            let train_ds = load_dataset(&train_path)
                .with_context(|| format!("loading {}", train_path.display()))?;
            let val_ds = load_dataset(&val_path)
                .with_context(|| format!("loading {}", val_path.display()))?;
            let out_dir = out
                .or_else(|| (!run.output.is_empty()).then(|| PathBuf::from(&run.output)))
                .ok_or_else(|| anyhow!("no output directory: pass --out or set output"))?;
            let paths = RunPaths::new(&out_dir);
            let records = train::train(
                &mut model, &mut opt, &train_ds, &val_ds, &run, Some(&paths), start_epoch, quiet,
            )?;
            match records.last() {
                Some(last) => println!(
                    "final: val accuracy {:.4}, recall@90 {:.4}",
                    last.val_accuracy, last.val_recall_at_90
                ),
                None => println!("final: no epochs trained (initialized checkpoint written)"),
            }
            Ok(0)
        }

        Command::Eval {
            checkpoint: ckpt,
            dataset,
            out,
            quiet,
        } => {
            let (model, _, _, _) = checkpoint::load(&ckpt)?;
            let ds = load_dataset(&dataset)
                .with_context(|| format!("loading {}", dataset.display()))?;
            let records = train::evaluate(&model, &ds)?;
            let acc = accuracy(&records).map_err(|e| anyhow!("{e}"))?;
            let (recall, threshold) = recall_at_precision(&records, 0.90).map_err(|e| anyhow!("{e}"))?;
            let by_attr = per_attribute_report(&records, 0.90).map_err(|e| anyhow!("{e}"))?;
            let by_source = per_source_report(&records, 0.90).map_err(|e| anyhow!("{e}"))?;
            let mut text = format!(
                "samples: {}\naccuracy: {acc:.4}\nrecall@90: {recall:.4} (threshold {})\n\n",
                records.len(),
                if threshold.is_finite() {
                    format!("{threshold:.4}")
                } else {
                    "none".into()
                }
            );
            text.push_str(&by_attr.to_table("attribute"));
            text.push('\n');
            text.push_str(&by_source.to_table("source"));
            if !quiet {
                print!("{text}");
            }
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("report.txt"), &text)?;
                fs::write(dir.join("report_attribute.csv"), by_attr.to_csv("attribute"))?;
                fs::write(dir.join("report_source.csv"), by_source.to_csv("source"))?;
            }
            Ok(0)
        }

        Command::Gradcheck {
            config,
            n_params,
            seed,
            quiet,
        } => {
            let mut run = match &config {
                Some(p) => RunConfig::from_path(p).map_err(|e| anyhow!("{e}"))?,
                None => RunConfig::gradcheck_default(),
            };
            if let Some(s) = seed {
                run.optimizer.seed = s;
            }
            if run.model.d_model > 16 {
                bail!(
                    "gradcheck requires d_model <= 16 (got {}); finite differences at larger sizes are too slow",
                    run.model.d_model
                );
            }
            let mut model = run.build_model().map_err(|e| anyhow!("{e}"))?;
            let splits = generate_splits(&run.data.synth)?;
            let samples: Vec<_> = splits
                .train
                .samples
                .iter()
                .take(2)
                .map(|s| model.prepare(s))
                .collect();
            let report = joint_gradient_check(
                &mut model,
                &samples,
                n_params,
                1e-4,
                run.optimizer.seed,
                run.optimizer.seed ^ 0x5eed,
                None,
            )
            .map_err(|e| anyhow!("{e}"))?;
            if !quiet {
                println!(
                    "{:<44} {:>6} {:>14} {:>14} {:>10}",
                    "parameter", "index", "autograd", "finite-diff", "rel-err"
                );
                for e in &report.entries {
                    println!(
                        "{:<44} {:>6} {:>14.6e} {:>14.6e} {:>10.3e}",
                        e.param, e.index, e.autograd, e.finite_diff, e.rel_err
                    );
                }
            }
            println!(
                "worst relative error {:.3e} at {} (h = {:.0e}, {} parameters)",
                report.worst_rel_err,
                report.worst_param,
                report.h,
                report.entries.len()
            );
            Ok(if report.passed(1e-3) { 0 } else { 1 })
        }

        Command::Ablate {
            config,
            out,
            dataset,
            seed,
            quiet,
        } => {
            let mut run = load_config(&config)?;
            if let Some(s) = seed {
                run.optimizer.seed = s;
            }
            let (train_path, val_path, test_path) = resolve_splits(&run, &dataset)?;
            let train_ds = load_dataset(&train_path)?;
            let val_ds = load_dataset(&val_path)?;
            let test_ds = load_dataset(&test_path)?;
            let out_dir = out
                .or_else(|| (!run.output.is_empty()).then(|| PathBuf::from(&run.output)))
                .ok_or_else(|| anyhow!("no output directory: pass --out or set output"))?;
            let rows = ablate::run_grid(&run, &train_ds, &val_ds, &test_ds, &out_dir, quiet)?;
            println!("{}", ablate::grid_table(&rows));
            let failures = rows.iter().filter(|r| r.status != "ok").count();
            Ok(if failures == 0 { 0 } else { 1 })
        }

        Command::InspectCkpt { checkpoint: ckpt } => {
            print!("{}", checkpoint::inspect(&ckpt)?);
            Ok(0)
        }
    }
}

/// Entry point for the thin binary.
pub fn main_from_env() -> i32 {
    run(std::env::args_os())
}

#[allow(dead_code)]
fn unused_path_helper(_: &Path) {}
