//! The ablation grid: question-guidance off, alignment off, single joint
//! encoder, expert placements crossed with training modes, and the
//! aux-loss weight sweep, all trained under one seed and budget.
//!
//! Expert variants fine-tune from a shared pretrained backbone (the base
//! variant's final checkpoint): experts clone the dense feed-forward weights
//! they replace, so expert-only fine-tuning starts from the trained model.
//! Failures are recorded as rows and the grid continues.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::Dataset;
use crate::fusion::FusionMode;
use crate::metrics::{accuracy, recall_at_precision};
use crate::model::Model;
use crate::moe::{LayerSelector, MoeSite, TrainMode};
use crate::train::{self, RunPaths, TrainError};

/// One grid cell.
#[derive(Debug, Clone, PartialEq)]
pub enum Variant {
    Base,
    NoQga,
    NoAlignment,
    SingleEncoder,
    Moe {
        site: MoeSite,
        layers: LayerSelector,
        mode: TrainMode,
    },
    /// Aux-weight sweep over the best expert recipe (decoder-odd,
    /// experts-only).
    AuxWeight(f64),
}

impl Variant {
    pub fn parse(name: &str) -> Result<Variant, TrainError> {
        let bad = || {
            TrainError::Data(crate::data::DataError::InvalidConfig(format!(
                "unknown ablation variant {name:?}"
            )))
        };
        match name {
            "base" => return Ok(Variant::Base),
            "no-qga" => return Ok(Variant::NoQga),
            "no-alignment" => return Ok(Variant::NoAlignment),
            "single-encoder" => return Ok(Variant::SingleEncoder),
            _ => {}
        }
        if let Some(w) = name.strip_prefix("aux-") {
            return w.parse::<f64>().map(Variant::AuxWeight).map_err(|_| bad());
        }
        let rest = name.strip_prefix("moe-").ok_or_else(bad)?;
        let (site, rest) = rest.split_once('-').ok_or_else(bad)?;
        let (layers, mode) = rest.split_once('-').ok_or_else(bad)?;
        let site = match site {
            "encoder" => MoeSite::Encoder,
            "decoder" => MoeSite::Decoder,
            "both" => MoeSite::Both,
            _ => return Err(bad()),
        };
        let layers = match layers {
            "all" => LayerSelector::All,
            "even" => LayerSelector::Even,
            "odd" => LayerSelector::Odd,
            "last" => LayerSelector::Last,
            "last2" => LayerSelector::Last2,
            _ => return Err(bad()),
        };
        let mode = match mode {
            "full" => TrainMode::Full,
            "experts-only" => TrainMode::ExpertsOnly,
            "backbone-only" => TrainMode::BackboneOnly,
            _ => return Err(bad()),
        };
        Ok(Variant::Moe { site, layers, mode })
    }

    fn needs_backbone(&self) -> bool {
        matches!(self, Variant::Moe { .. } | Variant::AuxWeight(_))
    }
}

/// Result row for one variant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridRow {
    pub variant: String,
    pub status: String,
    pub accuracy: f64,
    pub recall_at_90: f64,
    pub params_trained: usize,
    pub wall_secs: f64,
    pub seed: u64,
}

/// Derive the run configuration for a variant from the grid's base config.
pub fn variant_run(base: &RunConfig, variant: &Variant, epochs: usize) -> RunConfig {
    let mut run = base.clone();
    run.optimizer.epochs = epochs;
    run.moe.enabled = false;
    run.model.fusion = FusionMode::QgaSoftmax;
    run.model.alignment = true;
    run.model.single_encoder = false;
    match variant {
        Variant::Base => {}
        Variant::NoQga => run.model.fusion = FusionMode::FixedHalf,
        Variant::NoAlignment => run.model.alignment = false,
        Variant::SingleEncoder => run.model.single_encoder = true,
        Variant::Moe { site, layers, mode } => {
            run.moe.enabled = true;
            run.moe.site = *site;
            run.moe.layers = *layers;
            run.moe.train_mode = *mode;
        }
        Variant::AuxWeight(w) => {
            run.moe.enabled = true;
            run.moe.site = MoeSite::Decoder;
            run.moe.layers = LayerSelector::Odd;
            run.moe.train_mode = TrainMode::ExpertsOnly;
            run.moe.lambda = *w;
        }
    }
    run
}

fn variant_dir(out: &Path, name: &str) -> PathBuf {
    out.join(name.replace('.', "_"))
}

/// Train the shared backbone if its checkpoint does not exist yet; returns
/// the checkpoint path.
fn ensure_backbone(
    base: &RunConfig,
    train_ds: &Dataset,
    val_ds: &Dataset,
    out: &Path,
    quiet: bool,
) -> Result<PathBuf, TrainError> {
    let dir = variant_dir(out, "base");
    let paths = RunPaths::new(&dir);
    let ckpt = paths.final_checkpoint();
    if ckpt.exists() {
        return Ok(ckpt);
    }
    let run = variant_run(base, &Variant::Base, base.ablate.pretrain_epochs);
    let mut model = run.build_model()?;
    let mut opt = run.optimizer.adam_state();
    train::train(
        &mut model, &mut opt, train_ds, val_ds, &run, Some(&paths), 0, quiet,
    )?;
    Ok(ckpt)
}

fn score(model: &Model, test_ds: &Dataset) -> Result<(f64, f64), TrainError> {
    let records = train::evaluate(model, test_ds)?;
    let acc = accuracy(&records)?;
    let (recall, _) = recall_at_precision(&records, 0.90)?;
    Ok((acc, recall))
}

/// Run one variant end to end and score it on the test split.
pub fn run_variant(
    base: &RunConfig,
    name: &str,
    train_ds: &Dataset,
    val_ds: &Dataset,
    test_ds: &Dataset,
    out: &Path,
    quiet: bool,
) -> Result<GridRow, TrainError> {
    let started = Instant::now();
    let variant = Variant::parse(name)?;
    let dir = variant_dir(out, name);
    let paths = RunPaths::new(&dir);

    let (mut model, run) = if variant.needs_backbone() {
        let ckpt = ensure_backbone(base, train_ds, val_ds, out, quiet)?;
        let run = variant_run(base, &variant, base.ablate.finetune_epochs);
        let (mut model, _, _, _) = checkpoint::load(&ckpt)?;
        checkpoint::place_experts(&mut model, &run)?;
        // The placed model keeps the backbone's weights but adopts the
        // variant's aux weight for its own objective.
        model.config.lambda_aux = run.moe.lambda;
        (model, run)
    } else {
        let run = variant_run(base, &variant, base.ablate.pretrain_epochs);
        (run.build_model()?, run)
    };

    let mut opt = run.optimizer.adam_state();
    let params_trained = model.trainable_param_count();
    if name == "base" && paths.final_checkpoint().exists() {
        // The backbone stage may already have produced this row's model.
        let (m, _, _, _) = checkpoint::load(&paths.final_checkpoint())?;
        let (acc, recall) = score(&m, test_ds)?;
        return Ok(GridRow {
            variant: name.to_string(),
            status: "ok".into(),
            accuracy: acc,
            recall_at_90: recall,
            params_trained,
            wall_secs: started.elapsed().as_secs_f64(),
            seed: run.optimizer.seed,
        });
    }
    train::train(
        &mut model, &mut opt, train_ds, val_ds, &run, Some(&paths), 0, quiet,
    )?;
    let (acc, recall) = score(&model, test_ds)?;
    Ok(GridRow {
        variant: name.to_string(),
        status: "ok".into(),
        accuracy: acc,
        recall_at_90: recall,
        params_trained,
        wall_secs: started.elapsed().as_secs_f64(),
        seed: run.optimizer.seed,
    })
}

/// Run every configured variant; failed runs become rows with their error
/// text and the grid moves on.
pub fn run_grid(
    base: &RunConfig,
    train_ds: &Dataset,
    val_ds: &Dataset,
    test_ds: &Dataset,
    out: &Path,
    quiet: bool,
) -> Result<Vec<GridRow>, TrainError> {
    fs::create_dir_all(out)?;
    let mut rows = Vec::new();
    for name in &base.ablate.variants {
        let row = match run_variant(base, name, train_ds, val_ds, test_ds, out, quiet) {
            Ok(row) => row,
            Err(e) => GridRow {
                variant: name.clone(),
                status: e.to_string(),
                accuracy: f64::NAN,
                recall_at_90: f64::NAN,
                params_trained: 0,
                wall_secs: 0.0,
                seed: base.optimizer.seed,
            },
        };
        if !quiet {
            println!(
                "{:<36} {:>8} {:>10} {:>12}",
                row.variant,
                row.status,
                format_metric(row.accuracy),
                format_metric(row.recall_at_90)
            );
        }
        rows.push(row);
    }
    fs::write(out.join("grid_report.csv"), grid_csv(&rows))?;
    fs::write(out.join("grid_report.txt"), grid_table(&rows))?;
    Ok(rows)
}

fn format_metric(v: f64) -> String {
    if v.is_nan() {
        "-".into()
    } else {
        format!("{v:.4}")
    }
}

pub fn grid_csv(rows: &[GridRow]) -> String {
    let mut out = String::from("variant,status,accuracy,recall_at_90,params_trained,wall_secs,seed\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.3},{}",
            r.variant, r.status, r.accuracy, r.recall_at_90, r.params_trained, r.wall_secs, r.seed
        );
    }
    out
}

pub fn grid_table(rows: &[GridRow]) -> String {
    let mut out = format!(
        "{:<36} {:>8} {:>10} {:>12} {:>14} {:>10}\n",
        "variant", "status", "accuracy", "recall@90", "params_trained", "wall_s"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<36} {:>8} {:>10} {:>12} {:>14} {:>10.1}",
            r.variant,
            r.status,
            format_metric(r.accuracy),
            format_metric(r.recall_at_90),
            r.params_trained,
            r.wall_secs
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_parse_to_the_grid_cells() {
        assert_eq!(Variant::parse("base").unwrap(), Variant::Base);
        assert_eq!(Variant::parse("no-qga").unwrap(), Variant::NoQga);
        assert_eq!(
            Variant::parse("single-encoder").unwrap(),
            Variant::SingleEncoder
        );
        assert_eq!(
            Variant::parse("moe-decoder-odd-experts-only").unwrap(),
            Variant::Moe {
                site: MoeSite::Decoder,
                layers: LayerSelector::Odd,
                mode: TrainMode::ExpertsOnly
            }
        );
        assert_eq!(
            Variant::parse("moe-encoder-all-full").unwrap(),
            Variant::Moe {
                site: MoeSite::Encoder,
                layers: LayerSelector::All,
                mode: TrainMode::Full
            }
        );
        assert_eq!(Variant::parse("aux-0.01").unwrap(), Variant::AuxWeight(0.01));
        assert!(Variant::parse("moe-nowhere-odd-full").is_err());
        assert!(Variant::parse("bogus").is_err());
    }

    #[test]
    fn default_grid_covers_the_aux_weight_sweep() {
        let cfg = RunConfig::default();
        let lambdas: Vec<f64> = cfg
            .ablate
            .variants
            .iter()
            .filter_map(|v| match Variant::parse(v) {
                Ok(Variant::AuxWeight(w)) => Some(w),
                _ => None,
            })
            .collect();
        assert_eq!(lambdas, vec![0.01, 0.1, 0.5]);
    }

    #[test]
    fn variant_run_flips_exactly_the_intended_switch() {
        let base = RunConfig::default();
        let woqg = variant_run(&base, &Variant::NoQga, 3);
        assert_eq!(woqg.model.fusion, FusionMode::FixedHalf);
        assert!(woqg.model.alignment);
        assert_eq!(woqg.optimizer.epochs, 3);

        let woal = variant_run(&base, &Variant::NoAlignment, 3);
        assert!(!woal.model.alignment);
        assert_eq!(woal.model.fusion, FusionMode::QgaSoftmax);

        let aux = variant_run(&base, &Variant::AuxWeight(0.5), 2);
        assert!(aux.moe.enabled);
        assert_eq!(aux.moe.lambda, 0.5);
        assert_eq!(aux.moe.train_mode, TrainMode::ExpertsOnly);
    }
}
