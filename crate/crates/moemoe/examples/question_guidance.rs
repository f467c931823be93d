//! The central behavioral claim, made measurable: after training, the
//! question alone drives the per-token source weights, so image-answered
//! questions put more weight on the image stream than context-answered
//! questions do. Also compares against the guidance-off ablation.
//!
//! Trains two small models (a couple of minutes).
//!
//! ```bash
//! cargo run --release -p moemoe --example question_guidance
//! ```

use moemoe::config::{OptimizerSection, RunConfig};
use moemoe::data::{generate_splits, Dataset, SourceLabel, SynthConfig};
use moemoe::fusion::FusionMode;
use moemoe::metrics::accuracy;
use moemoe::model::Model;
use moemoe::train;

fn mean_image_weight(model: &Model, ds: &Dataset, label: SourceLabel) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for s in ds.samples.iter().filter(|s| s.source_label == label) {
        let (alpha, _) = model.fusion_weights(s).unwrap();
        total += alpha.iter().sum::<f64>() / alpha.len() as f64;
        n += 1;
    }
    total / n as f64
}

fn main() {
    let synth = SynthConfig {
        n_train: 1500,
        n_val: 300,
        n_test: 300,
        ..SynthConfig::default()
    };
    let mut run = RunConfig {
        optimizer: OptimizerSection {
            epochs: 5,
            ..OptimizerSection::default()
        },
        ..RunConfig::default()
    };
    run.data.synth = synth.clone();
    let splits = generate_splits(&synth).unwrap();

    println!("training the question-guided model...");
    let mut model = run.build_model().unwrap();
    let mut opt = run.optimizer.adam_state();
    train::train(
        &mut model, &mut opt, &splits.train, &splits.val, &run, None, 0, true,
    )
    .unwrap();

    println!("training the guidance-off ablation (fixed half weights)...");
    let mut woqg_run = run.clone();
    woqg_run.model.fusion = FusionMode::FixedHalf;
    let mut woqg = woqg_run.build_model().unwrap();
    let mut woqg_opt = woqg_run.optimizer.adam_state();
    train::train(
        &mut woqg, &mut woqg_opt, &splits.train, &splits.val, &woqg_run, None, 0, true,
    )
    .unwrap();

    let alpha_img = mean_image_weight(&model, &splits.test, SourceLabel::Image);
    let alpha_ctx = mean_image_weight(&model, &splits.test, SourceLabel::Context);
    let alpha_both = mean_image_weight(&model, &splits.test, SourceLabel::Both);
    println!("\nmean image weight by question type (question-guided model):");
    println!("  image-answered questions:   {alpha_img:.3}");
    println!("  context-answered questions: {alpha_ctx:.3}");
    println!("  both-source questions:      {alpha_both:.3}");
    println!("  separation: {:+.3}", alpha_img - alpha_ctx);

    let qga_acc = accuracy(&train::evaluate(&model, &splits.test).unwrap()).unwrap();
    let woqg_acc = accuracy(&train::evaluate(&woqg, &splits.test).unwrap()).unwrap();
    println!("\ntest accuracy: question-guided {qga_acc:.4} vs guidance-off {woqg_acc:.4}");
}
