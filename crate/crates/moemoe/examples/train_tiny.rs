//! End-to-end training on a small synthetic task: generate data, train with
//! the step learning-rate schedule, and report per-epoch validation metrics.
//!
//! ```bash
//! cargo run --release -p moemoe --example train_tiny
//! ```

use moemoe::config::{OptimizerSection, RunConfig};
use moemoe::data::generate_splits;
use moemoe::data::SynthConfig;
use moemoe::metrics::{accuracy, per_source_report};
use moemoe::train;

fn main() {
    let synth = SynthConfig {
        n_train: 1200,
        n_val: 200,
        n_test: 200,
        ..SynthConfig::default()
    };
    let mut run = RunConfig {
        optimizer: OptimizerSection {
            epochs: 6,
            ..OptimizerSection::default()
        },
        ..RunConfig::default()
    };
    run.data.synth = synth.clone();

    let splits = generate_splits(&synth).unwrap();
    let mut model = run.build_model().unwrap();
    let mut opt = run.optimizer.adam_state();
    println!(
        "training {} parameters on {} samples",
        model.param_count(),
        splits.train.samples.len()
    );
    let records = train::train(
        &mut model, &mut opt, &splits.train, &splits.val, &run, None, 0, false,
    )
    .unwrap();
    let last = records.last().unwrap();
    println!(
        "\nfinal validation: accuracy {:.4}, recall@90 {:.4}",
        last.val_accuracy, last.val_recall_at_90
    );

    let test_records = train::evaluate(&model, &splits.test).unwrap();
    println!("test accuracy: {:.4}", accuracy(&test_records).unwrap());
    println!("\nby answer source:");
    print!(
        "{}",
        per_source_report(&test_records, 0.90).unwrap().to_table("source")
    );
}
