//! Teacher-forced mini-batch training with per-epoch validation, structured
//! logging, routing-statistics export, and per-epoch checkpoints.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::config::{stream_rng, streams, RunConfig};
use crate::data::{DataError, Dataset};
use crate::metrics::{accuracy, recall_at_precision, PredictionRecord};
use crate::model::{EncodedSample, LossBreakdown, Model};
use crate::moe::RoutingStats;
use crate::optim::AdamState;
use crate::tape::Tape;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("log serialization: {0}")]
    Log(#[from] serde_json::Error),
    #[error("non-finite loss at epoch {epoch} step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
    },
    #[error("model vocabulary {model} does not match dataset vocabulary {dataset}")]
    VocabMismatch { model: usize, dataset: usize },
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// One exported routing record: per epoch, layer, and expert.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoutingRow {
    pub layer: String,
    pub expert: usize,
    /// Fraction of tokens that ranked this expert first.
    pub f: f64,
    /// Mean gate weight this expert received.
    pub p: f64,
}

/// Per-epoch log record; serialized as one JSON line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub routing: Vec<RoutingRow>,
    pub val_accuracy: f64,
    pub val_recall_at_90: f64,
    pub val_threshold: f64,
    pub wall_secs: f64,
}

fn routing_rows(per_layer: &[(String, RoutingStats)]) -> Vec<RoutingRow> {
    let mut rows = Vec::new();
    for (layer, stats) in per_layer {
        let f = stats.top_rank_fractions();
        let p = stats.mean_weights();
        for e in 0..stats.n_experts {
            rows.push(RoutingRow {
                layer: layer.clone(),
                expert: e,
                f: f[e],
                p: p[e],
            });
        }
    }
    rows
}

/// Greedy-decode a whole split into scored prediction records.
pub fn evaluate(model: &Model, ds: &Dataset) -> Result<Vec<PredictionRecord>> {
    check_vocab(model, ds)?;
    let mut records = Vec::with_capacity(ds.samples.len());
    for s in &ds.samples {
        let (predicted, confidence) = model.generate(s, model.config.max_answer_len)?;
        records.push(PredictionRecord {
            predicted,
            confidence,
            gold: s.answer.clone(),
            attribute_id: s.attribute_id,
            source_label: s.source_label,
        });
    }
    Ok(records)
}

pub fn check_vocab(model: &Model, ds: &Dataset) -> Result<()> {
    let dataset = ds.config.vocab_size();
    let model_v = model.config.block.vocab_size;
    if model_v != dataset {
        return Err(TrainError::VocabMismatch {
            model: model_v,
            dataset,
        });
    }
    Ok(())
}

/// Output file layout for a training run.
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: &Path) -> Self {
        RunPaths {
            dir: dir.to_path_buf(),
        }
    }

    pub fn log(&self) -> PathBuf {
        self.dir.join("train_log.jsonl")
    }

    pub fn routing_csv(&self) -> PathBuf {
        self.dir.join("routing_stats.csv")
    }

    pub fn epoch_checkpoint(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("ckpt_epoch{epoch}.moemoe"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("ckpt_final.moemoe")
    }
}

/// Train from `start_epoch` to the configured epoch count. Every epoch
/// derives its own noise/shuffle stream from (seed, epoch), so resuming from
/// an epoch checkpoint replays the identical remainder of the run.
pub fn train(
    model: &mut Model,
    opt: &mut AdamState,
    train_ds: &Dataset,
    val_ds: &Dataset,
    run: &RunConfig,
    out: Option<&RunPaths>,
    start_epoch: usize,
    quiet: bool,
) -> Result<Vec<EpochRecord>> {
    check_vocab(model, train_ds)?;
    check_vocab(model, val_ds)?;
    if train_ds.samples.is_empty() {
        return Err(TrainError::Data(DataError::InvalidConfig(
            "training dataset is empty".into(),
        )));
    }

    let mut log_file = match out {
        Some(paths) => {
            fs::create_dir_all(&paths.dir)?;
            let fresh = start_epoch == 0 || !paths.log().exists();
            let mut f = if fresh {
                File::create(paths.log())?
            } else {
                OpenOptions::new().append(true).open(paths.log())?
            };
            if fresh {
                // Echo the full config for provenance.
                let echo = serde_json::json!({ "event": "config", "config": run });
                writeln!(f, "{echo}")?;
            }
            Some(f)
        }
        None => None,
    };
    let mut routing_file = match out {
        Some(paths) => {
            let fresh = start_epoch == 0 || !paths.routing_csv().exists();
            let mut f = if fresh {
                File::create(paths.routing_csv())?
            } else {
                OpenOptions::new().append(true).open(paths.routing_csv())?
            };
            if fresh {
                writeln!(f, "epoch,layer,expert,f,p")?;
            }
            Some(f)
        }
        None => None,
    };

    let prepared: Vec<EncodedSample> = train_ds.samples.iter().map(|s| model.prepare(s)).collect();
    let batch = run.optimizer.batch_size.max(1);
    let seed = run.optimizer.seed;
    let mut records = Vec::new();

    for epoch in start_epoch..run.optimizer.epochs {
        let started = Instant::now();
        let mut rng = stream_rng(seed, streams::EPOCH_BASE + epoch as u64);
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        order.shuffle(&mut rng);

        let mut step_losses = Vec::new();
        let mut epoch_routing: Vec<(String, RoutingStats)> = Vec::new();
        for (step, chunk) in order.chunks(batch).enumerate() {
            let samples: Vec<EncodedSample> =
                chunk.iter().map(|&i| prepared[i].clone()).collect();
            let mut tape = Tape::new();
            let outcome = model.forward_batch(&mut tape, &samples, true, Some(&mut rng))?;
            if !outcome.breakdown.total.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    step,
                    detail: format!("{:?}", outcome.breakdown),
                });
            }
            model.zero_grads();
            tape.backward(outcome.total)?;
            model.apply_tape_grads(&tape);
            model.optimizer_step(opt, epoch)?;
            step_losses.push(outcome.breakdown);
            for lr in &outcome.routing {
                match epoch_routing.iter_mut().find(|(l, _)| *l == lr.layer) {
                    Some((_, acc)) => acc.merge(&lr.stats),
                    None => epoch_routing.push((lr.layer.clone(), lr.stats.clone())),
                }
            }
        }

        let val_records = evaluate(model, val_ds)?;
        let val_accuracy = accuracy(&val_records)?;
        let (val_recall, val_threshold) = recall_at_precision(&val_records, 0.90)?;

        let record = EpochRecord {
            epoch,
            lr: opt.lr_at(epoch),
            loss: LossBreakdown::mean_of(&step_losses),
            routing: routing_rows(&epoch_routing),
            val_accuracy,
            val_recall_at_90: val_recall,
            val_threshold,
            wall_secs: started.elapsed().as_secs_f64(),
        };
        if let Some(f) = &mut log_file {
            writeln!(f, "{}", serde_json::to_string(&record)?)?;
        }
        if let Some(f) = &mut routing_file {
            for row in &record.routing {
                writeln!(f, "{},{},{},{},{}", epoch, row.layer, row.expert, row.f, row.p)?;
            }
        }
        if let Some(paths) = out {
            checkpoint::save(model, opt, run, epoch + 1, &paths.epoch_checkpoint(epoch))?;
        }
        if !quiet {
            println!(
                "epoch {:>2}  lr {:<8.6}  loss {:.4}  val acc {:.4}  val recall@90 {:.4}",
                epoch, record.lr, record.loss.total, val_accuracy, val_recall
            );
        }
        records.push(record);
    }

    if let Some(paths) = out {
        checkpoint::save(model, opt, run, run.optimizer.epochs, &paths.final_checkpoint())?;
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DataSection, ModelSection, OptimizerSection};
    use crate::data::{generate_splits, SynthConfig};
    use crate::encoders::ImageShape;

    pub(crate) fn tiny_run() -> (RunConfig, Dataset, Dataset) {
        let synth = SynthConfig {
            n_attributes: 4,
            n_values: 3,
            n_fillers: 4,
            n_distractors: 1,
            k: 16,
            image: ImageShape {
                channels: 3,
                height: 8,
                width: 8,
                patch_size: 4,
            },
            n_train: 8,
            n_val: 4,
            n_test: 4,
            seed: 3,
            ..SynthConfig::default()
        };
        let run = RunConfig {
            model: ModelSection {
                k: 16,
                d_model: 8,
                n_heads: 2,
                d_ff: 16,
                n_enc_layers: 1,
                n_dec_layers: 1,
                vocab_size: synth.vocab_size(),
                max_answer_len: 2,
                image_height: 8,
                image_width: 8,
                patch_size: 4,
                ..ModelSection::default()
            },
            optimizer: OptimizerSection {
                epochs: 1,
                batch_size: 4,
                seed: 5,
                ..OptimizerSection::default()
            },
            data: DataSection {
                synth: synth.clone(),
                ..DataSection::default()
            },
            ..RunConfig::default()
        };
        let splits = generate_splits(&synth).unwrap();
        (run, splits.train, splits.val)
    }

    #[test]
    fn zero_learning_rate_changes_nothing_but_logs_loss() {
        let (mut run, train_ds, val_ds) = tiny_run();
        run.optimizer.lr = 0.0;
        let mut model = run.build_model().unwrap();
        let mut opt = run.optimizer.adam_state();
        let before: Vec<Vec<f64>> = {
            let mut v = Vec::new();
            model.visit_params(&mut |p| v.push(p.value.data().to_vec()));
            v
        };
        let records = train(
            &mut model, &mut opt, &train_ds, &val_ds, &run, None, 0, true,
        )
        .unwrap();
        assert_eq!(records.len(), 1);
        assert!(records[0].loss.total.is_finite());
        let mut after = Vec::new();
        model.visit_params(&mut |p| after.push(p.value.data().to_vec()));
        assert_eq!(before, after);
    }

    #[test]
    fn fifty_steps_on_a_fixed_batch_reduce_the_loss() {
        let (run, train_ds, _) = tiny_run();
        let mut model = run.build_model().unwrap();
        let mut opt = AdamState::new(1e-3, 1.0, vec![]);
        let batch: Vec<_> = train_ds.samples[..4]
            .iter()
            .map(|s| model.prepare(s))
            .collect();
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..50 {
            let mut tape = Tape::new();
            let out = model.forward_batch(&mut tape, &batch, true, None).unwrap();
            model.zero_grads();
            tape.backward(out.total).unwrap();
            model.apply_tape_grads(&tape);
            model.optimizer_step(&mut opt, 0).unwrap();
            first.get_or_insert(out.breakdown.total);
            last = out.breakdown.total;
        }
        assert!(
            last < first.unwrap(),
            "loss did not decrease: {} -> {last}",
            first.unwrap()
        );
    }

    #[test]
    fn divergence_aborts_with_a_diagnostic() {
        let (run, train_ds, val_ds) = tiny_run();
        let mut model = run.build_model().unwrap();
        // Poison one weight so the forward pass overflows.
        model.visit_params_mut(&mut |p| {
            if p.name == "decoder.out_proj.w" {
                p.value.data_mut().fill(1e308);
            }
        });
        let mut opt = run.optimizer.adam_state();
        let err = train(
            &mut model, &mut opt, &train_ds, &val_ds, &run, None, 0, true,
        )
        .unwrap_err();
        // Either the forward finite-check or the loss guard trips, depending
        // on where the overflow lands.
        let msg = err.to_string();
        assert!(
            msg.contains("non-finite") || msg.contains("Diverged"),
            "unexpected error: {msg}"
        );
    }

    #[test]
    fn vocab_mismatch_is_rejected() {
        let (mut run, train_ds, val_ds) = tiny_run();
        run.model.vocab_size += 1;
        let mut model = run.build_model().unwrap();
        let mut opt = run.optimizer.adam_state();
        let err = train(
            &mut model, &mut opt, &train_ds, &val_ds, &run, None, 0, true,
        )
        .unwrap_err();
        assert!(matches!(err, TrainError::VocabMismatch { .. }));
    }

    #[test]
    fn logged_learning_rates_follow_the_schedule() {
        let (mut run, train_ds, val_ds) = tiny_run();
        run.optimizer.epochs = 10;
        run.data.synth.n_train = 4;
        let small = Dataset {
            config: train_ds.config.clone(),
            samples: train_ds.samples[..4].to_vec(),
        };
        let mut model = run.build_model().unwrap();
        let mut opt = run.optimizer.adam_state();
        let records = train(
            &mut model, &mut opt, &small, &val_ds, &run, None, 0, true,
        )
        .unwrap();
        let lrs: Vec<f64> = records.iter().map(|r| r.lr).collect();
        assert_eq!(lrs.len(), 10);
        for (e, lr) in lrs.iter().enumerate() {
            let expected = match e {
                0..=5 => 0.001,
                6..=8 => 2e-4,
                _ => 4e-5,
            };
            assert!((lr - expected).abs() < 1e-15, "epoch {e}: lr {lr}");
        }
    }
}
