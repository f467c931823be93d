//! A reduced ablation grid: the base model, guidance/alignment/encoder
//! ablations, and expert variants fine-tuned from the shared backbone.
//! Takes several minutes.
//!
//! ```bash
//! cargo run --release -p moemoe --example ablation_grid
//! ```

use moemoe::ablate;
use moemoe::config::{AblateSection, OptimizerSection, RunConfig};
use moemoe::data::{generate_splits, SynthConfig};

fn main() {
    let synth = SynthConfig {
        n_train: 1200,
        n_val: 200,
        n_test: 300,
        ..SynthConfig::default()
    };
    let mut run = RunConfig {
        optimizer: OptimizerSection {
            ..OptimizerSection::default()
        },
        ablate: AblateSection {
            variants: [
                "base",
                "no-qga",
                "no-alignment",
                "single-encoder",
                "moe-decoder-odd-experts-only",
                "moe-encoder-all-full",
                "aux-0.01",
                "aux-0.5",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
            pretrain_epochs: 5,
            finetune_epochs: 3,
        },
        ..RunConfig::default()
    };
    run.data.synth = synth.clone();

    let splits = generate_splits(&synth).unwrap();
    let out = std::env::temp_dir().join("moemoe_grid_example");
    let rows = ablate::run_grid(&run, &splits.train, &splits.val, &splits.test, &out, true)
        .unwrap();
    println!("{}", ablate::grid_table(&rows));
    println!("full report in {}", out.display());
}
